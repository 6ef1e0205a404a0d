"""Volume containers: single-file NIfTI-1 and raw float32 with a text sidecar."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..kvconfig import dump_kv, read_kv
from .volume import LabeledSample, Volume

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
NIFTI_BITPIX = {2: 8, 4: 16, 16: 32}


class VolumeFormatError(ValueError):
    """A volume file is malformed; ``field`` names the offending header entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TruncatedFileError(VolumeFormatError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


def read_nifti(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_VOX_OFFSET:
        raise TruncatedFileError("sizeof_hdr", f"file has {len(raw)} bytes, header needs {NIFTI_VOX_OFFSET}")
    if struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        end = ">"
    else:
        raise VolumeFormatError("sizeof_hdr", "is not 348 in either byte order")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagicError("magic", f"expected b'n+1\\x00', got {magic!r}")
    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise VolumeFormatError("dim", f"only 3-D volumes are supported, got {dim}")
    dims = tuple(int(dim[i]) if i <= ndim else 1 for i in (1, 2, 3))
    if any(d < 1 for d in dims):
        raise VolumeFormatError("dim", f"non-positive extent in {dim}")
    datatype = struct.unpack_from(end + "h", raw, 70)[0]
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError("datatype", f"code {datatype} not in {sorted(NIFTI_DTYPES)}")
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(end + "f", raw, 108)[0])
    if vox_offset < NIFTI_VOX_OFFSET - 4:
        raise VolumeFormatError("vox_offset", f"{vox_offset} overlaps the header")
    dtype = np.dtype(end + NIFTI_DTYPES[datatype])
    count = int(np.prod(dims))
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise TruncatedFileError("vox_offset", f"voxel data ends after {len(raw) - vox_offset} bytes, "
                                               f"expected {count * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(dims, order="F")
    return Volume(arr, tuple(abs(float(p)) or 1.0 for p in pixdim[1:4]))


def write_nifti(volume: Volume, path: str | Path) -> None:
    """Little-endian float32, ``vox_offset`` 352, no extensions."""
    hdr = bytearray(NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[123] = 2  # xyzt_units: mm
    hdr[344:348] = b"n+1\x00"
    data = np.asarray(volume.voxels, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + data)


def meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta")


def write_raw(volume: Volume, path: str | Path) -> None:
    """Row-major little-endian float32 payload plus ``<path>.meta``."""
    Path(path).write_bytes(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())
    meta_path(path).write_text(dump_kv([("dims", volume.dims), ("spacing", volume.spacing),
                                        ("dtype", "float32")]))


def read_raw(path: str | Path) -> Volume:
    meta = read_kv(meta_path(path))
    for key in ("dims", "spacing", "dtype"):
        if key not in meta:
            raise VolumeFormatError(key, f"missing from {meta_path(path)}")
    if meta["dtype"] != "float32":
        raise UnsupportedDatatypeError("dtype", f"only float32 payloads are supported, got {meta['dtype']}")
    dims = tuple(int(x) for x in meta["dims"].split(","))
    spacing = tuple(float(x) for x in meta["spacing"].split(","))
    if len(dims) != 3 or len(spacing) != 3:
        raise VolumeFormatError("dims", "dims and spacing need three entries each")
    payload = Path(path).read_bytes()
    if len(payload) != 4 * int(np.prod(dims)):
        raise VolumeFormatError("dims", f"payload has {len(payload)} bytes, dims {dims} need "
                                        f"{4 * int(np.prod(dims))}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Volume(arr, spacing)


def read_volume(path: str | Path) -> Volume:
    return read_nifti(path) if str(path).endswith(".nii") else read_raw(path)


def write_volume(volume: Volume, path: str | Path) -> None:
    if str(path).endswith(".nii"):
        write_nifti(volume, path)
    else:
        write_raw(volume, path)


INDEX_FILE = "index.txt"


def sample_paths(directory: str | Path, sample_id: str, ext: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{sample_id}_image{ext}", d / f"{sample_id}_label{ext}"


def save_dataset(samples: list[LabeledSample], directory: str | Path, ext: str = ".vol") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        img_path, lab_path = sample_paths(d, s.id, ext)
        write_volume(s.image, img_path)
        write_volume(Volume(s.labels.voxels.astype(np.float32), s.labels.spacing), lab_path)
    (d / INDEX_FILE).write_text("".join(f"{s.id}\n" for s in samples))


def load_dataset(directory: str | Path) -> list[LabeledSample]:
    """Samples listed in ``index.txt``; each pair may be ``.vol`` or ``.nii``."""
    d = Path(directory)
    index = d / INDEX_FILE
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    samples = []
    for sid in (line.strip() for line in index.read_text().splitlines()):
        if not sid:
            continue
        for ext in (".vol", ".nii"):
            img_path, lab_path = sample_paths(d, sid, ext)
            if img_path.exists():
                break
        else:
            raise FileNotFoundError(f"no image file for sample {sid!r} in {d}")
        image = read_volume(img_path)
        labels = read_volume(lab_path)
        samples.append(LabeledSample(image, Volume(np.rint(labels.voxels).astype(np.int64), labels.spacing), sid))
    return samples
