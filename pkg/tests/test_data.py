import itertools
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpaformer.data import (
    AugmentFlags,
    BadMagicError,
    CropSampler,
    LabeledSample,
    TruncatedFileError,
    UnsupportedDatatypeError,
    Volume,
    VolumeFormatError,
    augment,
    crop_subvolume,
    ellipsoid_mask,
    flip,
    kfold_split,
    load_dataset,
    phantom_generate,
    read_nifti,
    read_raw,
    rotate90,
    save_dataset,
    write_nifti,
    write_raw,
)


def hand_nifti(arr, end, datatype, spacing=(1.5, 2.0, 0.5), magic=b"n+1\x00", vox_offset=352.0):
    """Build a NIfTI-1 file from raw struct packing, independent of the writer."""
    code = {2: "u1", 4: "i2", 16: "f4"}[datatype]
    hdr = bytearray(352)
    struct.pack_into(end + "i", hdr, 0, 348)
    struct.pack_into(end + "8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into(end + "hh", hdr, 70, datatype, np.dtype(code).itemsize * 8)
    struct.pack_into(end + "8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(end + "f", hdr, 108, vox_offset)
    hdr[344:348] = magic
    payload = np.asarray(arr, dtype=np.dtype(code).newbyteorder(end)).tobytes(order="F")
    return bytes(hdr) + payload


def sample_from(labels, image=None, sid="x"):
    labels = np.asarray(labels)
    image = labels.astype(np.float32) if image is None else image
    return LabeledSample(Volume(image), Volume(labels), sid)


# -- phantoms -----------------------------------------------------------------------------

def test_phantom_deterministic():
    a, b = phantom_generate(7), phantom_generate(7)
    assert a.id == b.id
    np.testing.assert_array_equal(a.image.voxels, b.image.voxels)
    np.testing.assert_array_equal(a.labels.voxels, b.labels.voxels)
    assert not np.array_equal(a.image.voxels, phantom_generate(8).image.voxels)


def test_phantom_no_objects():
    s = phantom_generate(3, objects_per_class=0)
    assert not s.labels.voxels.any()
    assert s.id == "phantom-s3"


def test_phantom_rejects_single_class():
    with pytest.raises(ValueError):
        phantom_generate(0, num_classes=1)


def test_phantom_labels_and_classes():
    s = phantom_generate(11, (32, 32, 32), 3, 2)
    assert s.image.voxels.dtype == np.float32
    assert set(np.unique(s.labels.voxels)) <= {0, 1, 2}
    assert s.image.voxels.min() >= 0 and s.image.voxels.max() <= 1


def test_phantom_records_placement_failure():
    s = phantom_generate(0, (16, 16, 16), 3, 6, radius_range=(6.0, 7.0))
    assert "-placed" in s.id and s.id.endswith("of12")


def test_sphere_voxel_count():
    mask = ellipsoid_mask((32, 32, 32), (16, 16, 16), (4.0, 4.0, 4.0))
    count = sum(1 for x, y, z in itertools.product(range(32), repeat=3)
                if (x - 16) ** 2 + (y - 16) ** 2 + (z - 16) ** 2 <= 16)
    assert int(mask.sum()) == count
    assert 240 <= count <= 280


# -- cropping ---------------------------------------------------------------------------------

def test_full_crop_is_identity():
    s = phantom_generate(1)
    c = crop_subvolume(s, s.dims, np.random.default_rng(0), foreground=True)
    np.testing.assert_array_equal(c.image.voxels, s.image.voxels)


def test_crop_too_large_rejected():
    with pytest.raises(ValueError):
        crop_subvolume(phantom_generate(1, (16, 16, 16)), (17, 8, 8), np.random.default_rng(0))


def test_foreground_crop_centre_is_labelled():
    labels = np.zeros((20, 20, 20), int)
    labels[2, 17, 9] = 1
    s = sample_from(labels)
    c = crop_subvolume(s, (5, 5, 5), np.random.default_rng(0), foreground=True)
    assert c.labels.voxels.sum() == 1  # clamped at the border but still inside


def test_background_sample_falls_back(caplog):
    s = sample_from(np.zeros((8, 8, 8), int), sid="empty")
    with caplog.at_level(logging.INFO):
        c = crop_subvolume(s, (4, 4, 4), np.random.default_rng(0), foreground=True)
    assert c.dims == (4, 4, 4)
    assert "no foreground" in caplog.text


def test_sampler_alternates_and_hits_foreground():
    labels = np.zeros((32, 32, 32), int)
    labels[:16] = 1  # half foreground
    sampler = CropSampler((8, 8, 8), np.random.default_rng(0))
    hits = sum(sampler(sample_from(labels)).labels.voxels.any() for _ in range(1000))
    assert hits >= 500
    assert sampler.draws == 1000


def test_sampler_fg_draws_always_contain_foreground():
    labels = np.zeros((32, 32, 32), int)
    labels[30, 30, 30] = 2
    sampler = CropSampler((6, 6, 6), np.random.default_rng(1))
    draws = [sampler(sample_from(labels)).labels.voxels.any() for _ in range(40)]
    assert all(draws[0::2])


# -- augmentation -------------------------------------------------------------------------------

def test_flip_involution():
    arr = np.random.default_rng(0).normal(size=(3, 4, 5))
    for axis in range(3):
        np.testing.assert_array_equal(flip(flip(arr, axis), axis), arr)


def test_four_rotations_identity():
    arr = np.random.default_rng(1).normal(size=(4, 4, 5))
    out = arr
    for _ in range(4):
        out = rotate90(out, 1, (0, 1))
    np.testing.assert_array_equal(out, arr)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, st.tuples(st.sampled_from([4, 6]), st.sampled_from([4, 6]), st.sampled_from([4, 5])),
              elements=st.integers(0, 3)), st.integers(0, 2 ** 32 - 1))
def test_augment_keeps_label_histogram(labels, seed):
    s = sample_from(labels)
    out = augment(s, np.random.default_rng(seed))
    assert out.dims == s.dims
    np.testing.assert_array_equal(np.bincount(out.labels.voxels.ravel(), minlength=4),
                                  np.bincount(labels.ravel(), minlength=4))


def test_augment_spatial_transforms_match():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 3, size=(6, 6, 6))
    s = sample_from(labels)
    out = augment(s, rng, AugmentFlags(intensity_shift=False))
    np.testing.assert_array_equal(out.image.voxels, out.labels.voxels.astype(np.float32))


def test_augment_shift_image_only():
    labels = np.zeros((4, 4, 4), int)
    labels[1, 1, 1] = 1
    img = np.full((4, 4, 4), 0.5, np.float32)
    out = augment(sample_from(labels, img), np.random.default_rng(3), AugmentFlags(False, False, True))
    shift = out.image.voxels - img
    assert np.all(shift == shift.flat[0]) and abs(shift.flat[0]) <= 0.1
    np.testing.assert_array_equal(out.labels.voxels, labels)


# -- folds ---------------------------------------------------------------------------------------

def test_fold_sizes_fifty():
    split = kfold_split([f"s{i}" for i in range(50)], 5, seed=0)
    assert split.sizes() == [10] * 5


def test_fold_sizes_seven():
    assert sorted(kfold_split([str(i) for i in range(7)], 5, 1).sizes(), reverse=True) == [2, 2, 1, 1, 1]


def test_fold_seed_determinism():
    ids = [str(i) for i in range(23)]
    assert kfold_split(ids, 5, 4).assignments == kfold_split(ids, 5, 4).assignments


def test_fold_rejects_too_many_folds():
    with pytest.raises(ValueError):
        kfold_split(["a", "b"], 3)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_fold_invariants_exhaustive(k):
    for n in range(k, 201):
        ids = [f"id{i}" for i in range(n)]
        split = kfold_split(ids, k, seed=n)
        folds = [set(split.fold_ids(f)) for f in range(k)]
        assert set().union(*folds) == set(ids)
        assert sum(len(f) for f in folds) == n
        assert max(map(len, folds)) - min(map(len, folds)) <= 1
        assert set(split.train_ids(0)) == set(ids) - folds[0]


# -- NIfTI ---------------------------------------------------------------------------------------

def test_nifti_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(5, 4, 3)).astype(np.float32)
    write_nifti(Volume(arr, (0.8, 0.9, 2.5)), tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    assert back.voxels.dtype == np.float32
    np.testing.assert_array_equal(back.voxels, arr)
    np.testing.assert_allclose(back.spacing, (0.8, 0.9, 2.5), rtol=1e-7)


def test_nifti_writer_layout(tmp_path):
    write_nifti(Volume(np.zeros((2, 3, 4), np.float32)), tmp_path / "v.nii")
    raw = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<h", raw, 70)[0] == 16
    assert len(raw) == 352 + 4 * 24


@pytest.mark.parametrize("end", ["<", ">"])
@pytest.mark.parametrize("datatype,values", [
    (2, np.arange(24, dtype=np.uint8)),
    (4, np.arange(-12, 12, dtype=np.int16) * 1000),
    (16, np.linspace(-3, 3, 24, dtype=np.float32)),
])
def test_nifti_hand_fixtures(tmp_path, end, datatype, values):
    arr = values.reshape(2, 3, 4)
    (tmp_path / "f.nii").write_bytes(hand_nifti(arr, end, datatype))
    vol = read_nifti(tmp_path / "f.nii")
    np.testing.assert_array_equal(vol.voxels, arr)
    assert vol.dims == (2, 3, 4)
    assert vol.spacing == (1.5, 2.0, 0.5)


def test_nifti_byte_swapped_float_bits(tmp_path):
    arr = np.random.default_rng(5).normal(size=(3, 3, 3)).astype(np.float32)
    (tmp_path / "be.nii").write_bytes(hand_nifti(arr, ">", 16))
    back = read_nifti(tmp_path / "be.nii").voxels
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_nifti_bad_magic(tmp_path):
    (tmp_path / "f.nii").write_bytes(hand_nifti(np.zeros((2, 2, 2), np.float32), "<", 16, magic=b"ni1\x00"))
    with pytest.raises(BadMagicError) as info:
        read_nifti(tmp_path / "f.nii")
    assert info.value.field == "magic"


def test_nifti_unsupported_datatype(tmp_path):
    raw = bytearray(hand_nifti(np.zeros((2, 2, 2), np.float32), "<", 16))
    struct.pack_into("<h", raw, 70, 64)
    (tmp_path / "f.nii").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDatatypeError) as info:
        read_nifti(tmp_path / "f.nii")
    assert info.value.field == "datatype"


def test_nifti_short_file(tmp_path):
    (tmp_path / "f.nii").write_bytes(b"\x5c\x01\x00\x00" + bytes(200))
    with pytest.raises(TruncatedFileError):
        read_nifti(tmp_path / "f.nii")


def test_nifti_truncated_payload(tmp_path):
    raw = hand_nifti(np.zeros((4, 4, 4), np.float32), "<", 16)
    (tmp_path / "f.nii").write_bytes(raw[:-8])
    with pytest.raises(TruncatedFileError) as info:
        read_nifti(tmp_path / "f.nii")
    assert info.value.field == "vox_offset"


def test_nifti_bad_header_size(tmp_path):
    raw = bytearray(hand_nifti(np.zeros((2, 2, 2), np.float32), "<", 16))
    struct.pack_into("<i", raw, 0, 123)
    (tmp_path / "f.nii").write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError) as info:
        read_nifti(tmp_path / "f.nii")
    assert info.value.field == "sizeof_hdr"


# -- raw --------------------------------------------------------------------------------------------

def test_raw_byte_layout(tmp_path):
    write_raw(Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2)), tmp_path / "v.vol")
    payload = (tmp_path / "v.vol").read_bytes()
    assert len(payload) == 32
    assert list(struct.unpack("<8f", payload)) == [float(i) for i in range(8)]
    meta = (tmp_path / "v.vol.meta").read_text()
    assert "dims=2,2,2" in meta and "dtype=float32" in meta


def test_raw_round_trip(tmp_path):
    arr = np.random.default_rng(6).normal(size=(3, 5, 2)).astype(np.float32)
    write_raw(Volume(arr, (1.0, 2.0, 3.0)), tmp_path / "v.vol")
    back = read_raw(tmp_path / "v.vol")
    assert back.voxels.tobytes() == arr.tobytes()
    assert back.spacing == (1.0, 2.0, 3.0)


def test_raw_size_mismatch(tmp_path):
    write_raw(Volume(np.zeros((2, 2, 2), np.float32)), tmp_path / "v.vol")
    meta = tmp_path / "v.vol.meta"
    meta.write_text(meta.read_text().replace("dims=2,2,2", "dims=2,2,3"))
    with pytest.raises(VolumeFormatError):
        read_raw(tmp_path / "v.vol")


# -- datasets ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("ext", [".vol", ".nii"])
def test_dataset_round_trip(tmp_path, ext):
    samples = [phantom_generate(s, (16, 16, 16)) for s in range(3)]
    save_dataset(samples, tmp_path / "d", ext)
    back = load_dataset(tmp_path / "d")
    assert [s.id for s in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image.voxels, b.image.voxels)
        np.testing.assert_array_equal(a.labels.voxels, b.labels.voxels)


def test_dataset_files_bit_identical_across_runs(tmp_path):
    for run in ("a", "b"):
        save_dataset([phantom_generate(42, (16, 16, 16))], tmp_path / run)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 5  # index, two payloads, two sidecars
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
