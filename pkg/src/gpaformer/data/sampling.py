"""Sub-volume cropping, spatial/intensity augmentation and k-fold splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .volume import LabeledSample

log = logging.getLogger(__name__)


def _check_crop(dims, crop_dims) -> tuple[int, int, int]:
    crop = tuple(int(c) for c in crop_dims)
    if len(crop) != 3 or any(c < 1 or c > n for c, n in zip(crop, dims)):
        raise ValueError(f"crop {crop} does not fit inside volume {tuple(dims)}")
    return crop


def crop_at(sample: LabeledSample, start, crop_dims) -> LabeledSample:
    sl = tuple(slice(s, s + c) for s, c in zip(start, crop_dims))
    return sample.replace_arrays(sample.image.voxels[sl], sample.labels.voxels[sl])


def crop_subvolume(sample: LabeledSample, crop_dims, rng: np.random.Generator,
                   foreground: bool = False) -> LabeledSample:
    """One random crop; with ``foreground`` the crop is centred on a labelled voxel.

    Centres too close to the border are clamped so the crop stays inside.
    A sample without foreground falls back to an unconstrained crop.
    """
    dims = sample.dims
    crop = _check_crop(dims, crop_dims)
    if foreground:
        fg = np.flatnonzero(sample.labels.voxels)
        if fg.size == 0:
            log.info("%s has no foreground; using an unconstrained crop", sample.id)
            foreground = False
        else:
            center = np.unravel_index(fg[rng.integers(fg.size)], dims)
            start = [min(max(int(c) - k // 2, 0), n - k) for c, k, n in zip(center, crop, dims)]
            return crop_at(sample, start, crop)
    start = [int(rng.integers(0, n - k + 1)) for k, n in zip(crop, dims)]
    return crop_at(sample, start, crop)


@dataclass
class CropSampler:
    """Alternates foreground-centred and unconstrained crops strictly 1:1."""

    crop_dims: tuple[int, int, int]
    rng: np.random.Generator
    draws: int = 0

    def __call__(self, sample: LabeledSample) -> LabeledSample:
        fg = self.draws % 2 == 0
        self.draws += 1
        return crop_subvolume(sample, self.crop_dims, self.rng, foreground=fg)


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    rotate: bool = True
    intensity_shift: bool = True
    shift_range: float = 0.1


def flip(arr: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(arr, axis=axis)


def rotate90(arr: np.ndarray, k: int, plane: tuple[int, int]) -> np.ndarray:
    return np.rot90(arr, k=k, axes=plane)


PLANES = ((0, 1), (0, 2), (1, 2))


def augment(sample: LabeledSample, rng: np.random.Generator, flags: AugmentFlags = AugmentFlags()) -> LabeledSample:
    """Random flips (p=0.5 per axis), a random quarter-turn, and an image-only intensity offset.

    Rotation planes are restricted to those with equal extents so the crop
    shape never changes.
    """
    img, lab = sample.image.voxels, sample.labels.voxels
    if flags.flip:
        for axis in range(3):
            if rng.random() < 0.5:
                img, lab = flip(img, axis), flip(lab, axis)
    if flags.rotate:
        planes = [p for p in PLANES if img.shape[p[0]] == img.shape[p[1]]]
        k = int(rng.integers(4))
        if planes:
            plane = planes[int(rng.integers(len(planes)))]
            img, lab = rotate90(img, k, plane), rotate90(lab, k, plane)
    if flags.intensity_shift:
        offset = rng.uniform(-flags.shift_range, flags.shift_range)
        img = img + np.asarray(offset, dtype=img.dtype)
    return sample.replace_arrays(np.ascontiguousarray(img), np.ascontiguousarray(lab))


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]


def kfold_split(ids: list[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin fold assignment."""
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} ids into {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.empty(len(ids), dtype=int)
    folds[order] = np.arange(len(ids)) % k
    return FoldSplit(k, {i: int(f) for i, f in zip(ids, folds)})
