from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)


@dataclass
class LabeledSample:
    image: Volume
    labels: Volume
    id: str

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise ValueError(f"{self.id}: image {self.image.dims} and labels {self.labels.dims} differ")
        self.labels.voxels = self.labels.voxels.astype(np.int64, copy=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image.dims

    def replace_arrays(self, image: np.ndarray, labels: np.ndarray) -> "LabeledSample":
        return LabeledSample(Volume(image, self.image.spacing), Volume(labels, self.labels.spacing), self.id)
