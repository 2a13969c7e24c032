"""
Synthetic aerial frames: correlated low-frequency "grass" texture, darker
tree canopy, and rare small high-contrast ellipses standing in for animals.
Each animal is annotated with the tight box around its painted pixels.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from wildmoco.tiling import BoundingBox, SourceFrame

REFERENCE_AREA = 512 * 512
GRASS_RGB = np.array([152.0, 138.0, 96.0])
CANOPY_GAIN = np.array([0.45, 0.58, 0.40])
ANIMAL_RGB = (np.array([236.0, 226.0, 208.0]), np.array([46.0, 38.0, 30.0]))


@dataclass
class SynthConfig:
    n_frames: int = 20
    width: int = 512
    height: int = 512
    density: float = 2.0           # expected animals per 512x512 area
    blob_min_axis: float = 3.0
    blob_max_axis: float = 8.0
    texture_sigma: float = 12.0
    texture_amplitude: float = 40.0
    grain_amplitude: float = 8.0
    tree_cover: float = 0.15
    tree_sigma: float = 24.0

    def validate(self):
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.density < 0:
            raise ValueError(f"density must be >= 0, got {self.density}")
        if not 0 < self.blob_min_axis <= self.blob_max_axis:
            raise ValueError(f"blob axis range must be positive and ordered, got "
                             f"[{self.blob_min_axis}, {self.blob_max_axis}]")
        if 2 * math.ceil(self.blob_max_axis) + 1 > min(self.width, self.height):
            raise ValueError(f"blob of semi-axis {self.blob_max_axis} does not fit a "
                             f"{self.width}x{self.height} frame")
        if not 0 <= self.tree_cover < 1:
            raise ValueError(f"tree_cover must lie in [0, 1), got {self.tree_cover}")
        return self


def _unit_field(rng, shape, sigma):
    noise = gaussian_filter(rng.standard_normal(shape), sigma)
    std = noise.std()
    return noise / std if std > 0 else noise


def expected_animals(config):
    return config.density * config.width * config.height / REFERENCE_AREA


def sample_animal_count(rng, config):
    return int(rng.poisson(expected_animals(config)))


def paint_ellipse(canvas, rng, config):
    """Paint one rotated ellipse fully inside ``canvas``; return its tight box."""
    height, width = canvas.shape[:2]
    a = rng.uniform(config.blob_min_axis, config.blob_max_axis)
    b = rng.uniform(config.blob_min_axis, a)
    theta = rng.uniform(0, math.pi)
    reach = int(math.ceil(a))
    cx = int(rng.integers(reach, width - reach))
    cy = int(rng.integers(reach, height - reach))

    ys, xs = np.mgrid[cy - reach:cy + reach + 1, cx - reach:cx + reach + 1]
    dx, dy = xs - cx, ys - cy
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    mask = u ** 2 + v ** 2 <= 1.0

    color = ANIMAL_RGB[int(rng.integers(2))]
    canvas[ys[mask], xs[mask]] = color
    x0, x1 = int(xs[mask].min()), int(xs[mask].max())
    y0, y1 = int(ys[mask].min()), int(ys[mask].max())
    return BoundingBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def synth_frame(rng, config, frame_id):
    shape = (config.height, config.width)
    texture = _unit_field(rng, shape, config.texture_sigma)
    grain = _unit_field(rng, shape, 1.0)
    canvas = (GRASS_RGB
              + config.texture_amplitude * texture[..., None] * np.array([1.0, 0.9, 0.7])
              + config.grain_amplitude * grain[..., None])

    if config.tree_cover > 0:
        canopy = _unit_field(rng, shape, config.tree_sigma)
        crowns = canopy > np.quantile(canopy, 1.0 - config.tree_cover)
        canvas[crowns] *= CANOPY_GAIN

    boxes = [paint_ellipse(canvas, rng, config) for _ in range(sample_animal_count(rng, config))]
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return SourceFrame(frame_id, pixels, boxes)


def synth_generate(config, seed=0):
    config.validate()
    return [synth_frame(np.random.default_rng([seed, i]), config, f"synth_{i:05d}")
            for i in range(config.n_frames)]
