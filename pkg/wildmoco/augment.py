"""
Stochastic augmentation module and the multi-view policies.

Images flow through here as float CHW tensors scaled to [0, 1]; uint8 HxWx3
arrays are converted on entry. Every sampled parameter is kept in the bundle's
``trace`` so view-pairing constraints can be checked after the fact.

Base aug:  random crop (no resize), horizontal flip, Gaussian blur
Color aug: ColorJitter(0.4, 0.4, 0.4, 0.1) in random order, random grayscale
Rot aug:   lossless rotation by 90, 180 or 270 degrees
"""

import json
from dataclasses import dataclass
from typing import Dict

import numpy as np
import torch
import torchvision.transforms.functional as TF

from wildmoco.run_config import AugPolicy

VIEW_POLICIES = ("moco_v2", "geo", "cld", "geocld", "mixco", "cld_color")
DEFAULT_POLICY = AugPolicy()


def to_image_tensor(img):
    if isinstance(img, torch.Tensor):
        if img.dtype == torch.uint8:
            return img.float().div(255.0)
        return img
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float().div(255.0)


def sample_base_params(rng, height, width, policy=DEFAULT_POLICY):
    size = policy.crop_size
    if height < size or width < size:
        raise ValueError(f"input {width}x{height} is smaller than the required minimum {size}x{size}")
    x = int(rng.integers(0, width - size + 1))
    y = int(rng.integers(0, height - size + 1))
    flip = bool(rng.random() < policy.hflip_p)
    sigma = None
    if rng.random() < policy.blur_p:
        sigma = float(rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max))
    return {"x": x, "y": y, "flip": flip, "blur_sigma": sigma}


def apply_base(img, params, policy=DEFAULT_POLICY):
    size = policy.crop_size
    out = img[..., params["y"]:params["y"] + size, params["x"]:params["x"] + size]
    if params["flip"]:
        out = torch.flip(out, dims=[-1])
    if params["blur_sigma"] is not None:
        # reflect padding needs the half-kernel to stay inside the crop
        kernel = min(policy.blur_kernel, 2 * size - 1)
        sigma = params["blur_sigma"]
        out = TF.gaussian_blur(out, kernel_size=[kernel, kernel], sigma=[sigma, sigma])
    return out


def sample_color_params(rng, policy=DEFAULT_POLICY):
    b, c, s = policy.jitter_brightness, policy.jitter_contrast, policy.jitter_saturation
    return {
        "jitter": bool(rng.random() < policy.jitter_p),
        "order": [int(i) for i in rng.permutation(4)],
        "brightness": float(rng.uniform(max(0.0, 1 - b), 1 + b)),
        "contrast": float(rng.uniform(max(0.0, 1 - c), 1 + c)),
        "saturation": float(rng.uniform(max(0.0, 1 - s), 1 + s)),
        "hue": float(rng.uniform(-policy.jitter_hue, policy.jitter_hue)),
        "grayscale": bool(rng.random() < policy.grayscale_p),
    }


def apply_color(img, params):
    out = img
    if params["jitter"]:
        for fn_id in params["order"]:
            if fn_id == 0:
                out = TF.adjust_brightness(out, params["brightness"])
            elif fn_id == 1:
                out = TF.adjust_contrast(out, params["contrast"])
            elif fn_id == 2:
                out = TF.adjust_saturation(out, params["saturation"])
            elif params["hue"] != 0:
                out = TF.adjust_hue(out, params["hue"])
    if params["grayscale"]:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    return out


def sample_rotation(rng, policy=DEFAULT_POLICY):
    angles = policy.rotation_angles
    return int(angles[int(rng.integers(len(angles)))])


def apply_rotation(img, angle):
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"rotation needs a square image, got {img.shape[-1]}x{img.shape[-2]}")
    if angle % 90 != 0:
        raise ValueError(f"rotation angle must be a multiple of 90, got {angle}")
    return torch.rot90(img, k=(angle // 90) % 4, dims=(-2, -1))


def base_aug(img, rng, policy=DEFAULT_POLICY):
    img = to_image_tensor(img)
    params = sample_base_params(rng, img.shape[-2], img.shape[-1], policy)
    return apply_base(img, params, policy)


def color_aug(img, rng, policy=DEFAULT_POLICY):
    img = to_image_tensor(img)
    if img.shape[-3] != 3:
        raise ValueError(f"color augmentation needs 3 channels, got {img.shape[-3]}")
    return apply_color(img, sample_color_params(rng, policy))


def rot_aug(img, rng, policy=DEFAULT_POLICY):
    img = to_image_tensor(img)
    angle = sample_rotation(rng, policy)
    return apply_rotation(img, angle), angle


@dataclass
class ViewBundle:
    views: Dict[str, torch.Tensor]
    trace: Dict[str, dict]
    patch_id: str = ""
    strategy: str = ""

    def trace_json(self):
        return json.dumps({"patch_id": self.patch_id, "strategy": self.strategy, "trace": self.trace},
                          sort_keys=True)


def make_views(patch, strategy, rng, policy=DEFAULT_POLICY, patch_id=""):
    """Build the strategy's views of one patch.

    moco_v2    I1, I_plus: independent base+color
    geo        I2: base+rotation, I_plus: base+color
    cld_color  I1, I2, I_plus: independent base+color
    cld        I1: base+color(c), I2: base+rotation(r), I_plus: base+color(c)+rotation(r)
    geocld     same as cld
    mixco      I: base, I1: color(I), I2: rotation(I), I_plus: independent base+color
    """
    if strategy not in VIEW_POLICIES:
        raise ValueError(f"unknown strategy '{strategy}', expected one of {list(VIEW_POLICIES)}")
    img = to_image_tensor(patch)
    height, width = img.shape[-2], img.shape[-1]
    views, trace = {}, {}

    def base():
        params = sample_base_params(rng, height, width, policy)
        return apply_base(img, params, policy), params

    def base_color(role):
        view, bp = base()
        cp = sample_color_params(rng, policy)
        views[role] = apply_color(view, cp)
        trace[role] = {"base": bp, "color": cp}

    if strategy == "moco_v2":
        base_color("I1")
        base_color("I_plus")
    elif strategy == "cld_color":
        base_color("I1")
        base_color("I2")
        base_color("I_plus")
    elif strategy == "geo":
        view, bp = base()
        angle = sample_rotation(rng, policy)
        views["I2"] = apply_rotation(view, angle)
        trace["I2"] = {"base": bp, "rotation": angle}
        base_color("I_plus")
    elif strategy in ("cld", "geocld"):
        color = sample_color_params(rng, policy)
        angle = sample_rotation(rng, policy)
        view, bp1 = base()
        views["I1"] = apply_color(view, color)
        trace["I1"] = {"base": bp1, "color": color}
        view, bp2 = base()
        views["I2"] = apply_rotation(view, angle)
        trace["I2"] = {"base": bp2, "rotation": angle}
        view, bp3 = base()
        views["I_plus"] = apply_rotation(apply_color(view, color), angle)
        trace["I_plus"] = {"base": bp3, "color": color, "rotation": angle}
    else:
        view, bp = base()
        color = sample_color_params(rng, policy)
        angle = sample_rotation(rng, policy)
        views["I"] = view
        views["I1"] = apply_color(view, color)
        views["I2"] = apply_rotation(view, angle)
        trace["I"] = {"base": bp}
        trace["I1"] = {"base": bp, "color": color}
        trace["I2"] = {"base": bp, "rotation": angle}
        base_color("I_plus")

    return ViewBundle(views=views, trace=trace, patch_id=patch_id, strategy=strategy)


def center_crop(img, size):
    img = to_image_tensor(img)
    if img.shape[-1] < size or img.shape[-2] < size:
        raise ValueError(f"input {img.shape[-1]}x{img.shape[-2]} is smaller than crop {size}")
    return TF.center_crop(img, [size, size])


def train_crop(img, rng, size):
    img = to_image_tensor(img)
    if img.shape[-1] < size or img.shape[-2] < size:
        raise ValueError(f"input {img.shape[-1]}x{img.shape[-2]} is smaller than crop {size}")
    x = int(rng.integers(0, img.shape[-1] - size + 1))
    y = int(rng.integers(0, img.shape[-2] - size + 1))
    out = img[..., y:y + size, x:x + size]
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[-1])
    return out


def channel_stats(images, limit=256):
    """Per-channel mean/std over up to ``limit`` uint8 HxWx3 images, scaled to [0, 1]."""
    stack = [to_image_tensor(img).reshape(3, -1) for img in list(images)[:limit]]
    if not stack:
        return torch.zeros(3), torch.ones(3)
    pixels = torch.cat(stack, dim=1).double()
    std = pixels.std(dim=1).clamp_min(1e-3)
    return pixels.mean(dim=1).float(), std.float()
