"""
Rotation-aware objectives.

geo loss:     gamma * L(q(I1), k+) + (1 - gamma) * L(q(I2), k+)
mixture loss: lam * L(q(M), k+) + (1 - lam) * L(q(M2), k+) with M = lam*I2 + (1-lam)*I and
              M2 = lam*I2 + (1-lam)*I1, used instead of the geo loss with probability p
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from wildmoco.contrastive import finish_step, info_nce
from wildmoco.run_config import MixConfig


@dataclass
class MixDraw:
    apply_mix: bool
    lam: Optional[float] = None


def draw_mix(rng, mix_config=MixConfig()):
    """Bernoulli(p) for this batch; lam ~ Beta(beta, beta) only when mixing."""
    if rng.random() < mix_config.p:
        return MixDraw(True, float(rng.beta(mix_config.beta, mix_config.beta)))
    return MixDraw(False, None)


def _check_unit(name, value):
    if not 0 <= value <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def geo_loss(q1, q2, k_plus, negatives, gamma, tau):
    _check_unit("gamma", gamma)
    return gamma * info_nce(q1, k_plus, negatives, tau) + (1 - gamma) * info_nce(q2, k_plus, negatives, tau)


def mix_images(a, b, lam):
    """lam * a + (1 - lam) * b; integer images are promoted to float."""
    _check_unit("lambda", lam)
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot mix images of shape {tuple(a.shape)} and {tuple(b.shape)}")
    return lam * a + (1 - lam) * b.to(a.dtype)


def _as_float(img):
    img = img if isinstance(img, torch.Tensor) else torch.as_tensor(np.asarray(img))
    return img if img.is_floating_point() else img.double()


def make_mixtures(img, img1, img2, lam):
    """(M, M2): the rotated view mixed with the base view and with the color view."""
    return mix_images(img2, img, lam), mix_images(img2, img1, lam)


def mixture_loss(q_mix, q_mix2, k_plus, negatives, lam, tau):
    _check_unit("lambda", lam)
    return lam * info_nce(q_mix, k_plus, negatives, tau) + (1 - lam) * info_nce(q_mix2, k_plus, negatives, tau)


def mixco_loss(views, state, negatives, draw, mix_config=MixConfig(), tau=0.2):
    """Mixture loss when ``draw.apply_mix``, geo loss otherwise; returns (loss, k_plus, terms)."""
    for role in ("I", "I1", "I2", "I_plus"):
        if role not in views:
            raise ValueError(f"mixco batch lacks the '{role}' view")
    k_plus = state.encode_key(views["I_plus"])
    if draw.apply_mix:
        mix, mix2 = make_mixtures(views["I"], views["I1"], views["I2"], draw.lam)
        q_mix, _ = state.encode_query(mix)
        q_mix2, _ = state.encode_query(mix2)
        loss = mixture_loss(q_mix, q_mix2, k_plus, negatives, draw.lam, tau)
        return loss, k_plus, {"instance": loss.item(), "mixed": 1, "mix_lambda": draw.lam}
    q1, _ = state.encode_query(views["I1"])
    q2, _ = state.encode_query(views["I2"])
    loss = geo_loss(q1, q2, k_plus, negatives, mix_config.gamma, tau)
    return loss, k_plus, {"instance": loss.item(), "mixed": 0, "mix_lambda": None}


def mixco_step(views, state, queue, optimizer, mix_config=MixConfig(), rng=None, tau=0.2, m=0.999, draw=None):
    """One MixCo step; a single mix decision and lambda covers the whole batch."""
    if draw is None:
        rng = np.random.default_rng(mix_config.seed) if rng is None else rng
        draw = draw_mix(rng, mix_config)
    loss, k_plus, terms = mixco_loss(views, state, queue.negatives(), draw, mix_config, tau)
    finish_step(loss, k_plus, state, queue, optimizer, m)
    terms["loss"] = loss.item()
    return terms, state, queue
