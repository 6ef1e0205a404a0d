"""Synthetic labelled volumes: non-overlapping ellipsoids on a noisy background."""
from __future__ import annotations

import numpy as np

from .volume import LabeledSample, Volume

MAX_PLACEMENT_TRIES = 100


def ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    """Voxels whose centres satisfy sum(((x - c) / a)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    acc = np.zeros(tuple(dims), dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def class_intensity(c: int, num_classes: int) -> float:
    """Centre of the intensity band for foreground class ``c``."""
    return 0.3 + 0.6 * c / (num_classes - 1)


def phantom_generate(seed: int, dims=(32, 32, 32), num_classes: int = 3, objects_per_class: int = 2,
                     radius_range=(4.0, 8.0), noise_std: float = 0.05, band_halfwidth: float = 0.04,
                     background: float = 0.1) -> LabeledSample:
    """Deterministic phantom; every random draw comes from ``default_rng(seed)``.

    Objects that cannot be placed without overlap after a bounded number of
    tries are dropped and the shortfall is recorded in the sample id.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background plus one foreground class)")
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    image = background + rng.normal(0.0, noise_std, size=dims)
    labels = np.zeros(dims, dtype=np.int64)
    lo, hi = radius_range
    wanted = placed = 0
    for c in range(1, num_classes):
        for _ in range(objects_per_class):
            wanted += 1
            for _attempt in range(MAX_PLACEMENT_TRIES):
                axes = rng.uniform(lo, hi, size=3)
                margin = np.ceil(axes).astype(int)
                if np.any(2 * margin + 1 > np.array(dims)):
                    continue
                center = [int(rng.integers(m, n - m)) for m, n in zip(margin, dims)]
                mask = ellipsoid_mask(dims, center, axes)
                if labels[mask].any():
                    continue
                labels[mask] = c
                level = class_intensity(c, num_classes) + rng.uniform(-band_halfwidth, band_halfwidth)
                image[mask] += level - background
                placed += 1
                break
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    sample_id = f"phantom-s{seed}"
    if placed < wanted:
        sample_id += f"-placed{placed}of{wanted}"
    return LabeledSample(Volume(image), Volume(labels), sample_id)
