"""Seeded synthetic scenes used as offline content fixtures and demo inputs."""

from __future__ import annotations

import numpy as np


def synthetic_scene(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """A smooth background with one elliptical "object".

    Returns ``(image, mask)``: an H x W x 3 uint8 image and an H x W uint8
    mask that is 255 on the object.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    top, bottom = rng.uniform(40, 215, 3), rng.uniform(40, 215, 3)
    bg = top[None, None, :] * (1 - yy[..., None]) + bottom[None, None, :] * yy[..., None]
    cx, cy = rng.uniform(0.35, 0.65, 2)
    rx, ry = rng.uniform(0.18, 0.3, 2)
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    obj = rng.uniform(30, 225, 3)
    shade = 0.85 + 0.15 * (1 - np.hypot(xx - cx, yy - cy) / max(rx, ry))
    img = np.where(inside[..., None], obj[None, None, :] * shade[..., None], bg)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, (inside * 255).astype(np.uint8)


def smooth_random_image(seed: int, size: int = 32, coarse: int = 8) -> "torch.Tensor":
    """Seeded uniform noise at ``coarse`` resolution, bilinearly upsampled to a 3 x size x size float32 tensor in [-1, 1]."""
    import torch
    import torch.nn.functional as F

    g = torch.Generator().manual_seed(seed)
    low = torch.rand(1, 3, coarse, coarse, generator=g) * 2 - 1
    return F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)[0]
