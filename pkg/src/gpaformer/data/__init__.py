from .io import (
    BadMagicError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    VolumeFormatError,
    load_dataset,
    read_nifti,
    read_raw,
    read_volume,
    save_dataset,
    write_nifti,
    write_raw,
    write_volume,
)
from .phantom import ellipsoid_mask, phantom_generate
from .sampling import AugmentFlags, CropSampler, FoldSplit, augment, crop_subvolume, flip, kfold_split, rotate90
from .volume import LabeledSample, Volume

__all__ = [
    "AugmentFlags", "BadMagicError", "CropSampler", "FoldSplit", "LabeledSample", "TruncatedFileError",
    "UnsupportedDatatypeError", "Volume", "VolumeFormatError", "augment", "crop_subvolume",
    "ellipsoid_mask", "flip", "kfold_split", "load_dataset", "phantom_generate", "read_nifti", "read_raw",
    "read_volume", "rotate90", "save_dataset", "write_nifti", "write_raw", "write_volume",
]
