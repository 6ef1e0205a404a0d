import itertools

import numpy as np
import pytest

from gpaformer import masa
from gpaformer.numerics import Tensor, grad_check, reduce_sum
from gpaformer.numerics.ops import ShapeError


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def path_params(rng, c_in, d, k, scale=0.2):
    return {
        "conv1.weight": t64(rng.normal(size=(d, c_in, k, k, k)) * scale),
        "conv1.bias": t64(rng.normal(size=d) * 0.1),
        "norm.gamma": t64(1 + 0.1 * rng.normal(size=d)),
        "norm.beta": t64(0.1 * rng.normal(size=d)),
        "conv2.weight": t64(rng.normal(size=(d, d, k, k, k)) * scale / d),
        "conv2.bias": t64(rng.normal(size=d) * 0.1),
    }


def stem_params(rng, c_in=1, d=4):
    p = {}
    for name, k in zip(masa.PATH_NAMES, masa.KERNEL_SIZES):
        p.update({f"{name}.{key}": v for key, v in path_params(rng, c_in, d, k).items()})
    for n in "qkv":
        p[f"attn.w{n}"] = t64(rng.normal(size=(d, d)) / np.sqrt(d))
        p[f"attn.b{n}"] = t64(rng.normal(size=d) * 0.1)
    return p


def test_kernel_sizes_fixed():
    with pytest.raises(ValueError):
        masa.MasaConfig(kernel_sizes=(3, 3, 3))


@pytest.mark.parametrize("k", masa.KERNEL_SIZES)
def test_path_shape_32(k):
    rng = np.random.default_rng(k)
    vol = Tensor(rng.normal(size=(1, 32, 32, 32)).astype(np.float32))
    params = {n: Tensor(v.data.astype(np.float32)) for n, v in path_params(rng, 1, 8, k).items()}
    assert masa.path_extract(vol, k, params).shape == (512, 8)


def test_token_count_at_96():
    # only the shape rule is checked at 96^3 to keep the suite fast
    assert (96 // 4) ** 3 == 13824
    assert masa.tokens_to_volume(t64(np.zeros((13824, 2))), (24, 24, 24)).shape == (2, 24, 24, 24)


def test_indivisible_extent_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="divisible by 4"):
        masa.path_extract(t64(np.zeros((1, 8, 8, 10))), 3, path_params(rng, 1, 2, 3))


def test_zero_weight_path_gives_bias_rows():
    rng = np.random.default_rng(1)
    p = path_params(rng, 1, 3, 5)
    p["conv2.weight"] = t64(np.zeros_like(p["conv2.weight"].data))
    out = masa.path_extract(t64(rng.normal(size=(1, 8, 8, 8))), 5, p).data
    np.testing.assert_array_equal(out, np.tile(p["conv2.bias"].data, (8, 1)))


def test_paths_share_shape_over_sweep():
    rng = np.random.default_rng(2)
    shapes = {k: {n: Tensor(v.data.astype(np.float32)) for n, v in path_params(rng, 1, 2, k).items()}
              for k in masa.KERNEL_SIZES}
    for dims in itertools.product(range(8, 65, 8), repeat=3):
        if np.prod(dims) > 24 * 24 * 24:
            continue  # the shape rule is size independent; skip the slowest volumes
        vol = Tensor(np.zeros((1,) + dims, dtype=np.float32))
        outs = {masa.path_extract(vol, k, shapes[k]).shape for k in masa.KERNEL_SIZES}
        assert outs == {(int(np.prod(dims)) // 64, 2)}


def test_fuse_examples():
    rng = np.random.default_rng(3)
    z = t64(np.zeros((4, 3)))
    np.testing.assert_array_equal(masa.fuse(z, z, z).data, 0.0)
    f = t64(rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(masa.fuse(f, z, z).data, f.data)


def test_fuse_matches_scalar_loop():
    rng = np.random.default_rng(4)
    a, b, c = (rng.normal(size=(5, 3)) for _ in range(3))
    ref = np.empty((5, 3))
    for i, j in itertools.product(range(5), range(3)):
        ref[i, j] = a[i, j] + b[i, j] + c[i, j]
    np.testing.assert_array_equal(masa.fuse(t64(a), t64(b), t64(c)).data, ref)


def test_fuse_order_invariance():
    rng = np.random.default_rng(5)
    arrs = [rng.integers(-100, 100, size=(6, 2)).astype(np.float64) for _ in range(3)]
    base = masa.fuse(*map(t64, arrs)).data
    for perm in itertools.permutations(arrs):
        np.testing.assert_array_equal(masa.fuse(*map(t64, perm)).data, base)


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        masa.fuse(t64(np.zeros((2, 2))), t64(np.zeros((2, 2))), t64(np.zeros((3, 2))))


def test_forward_shape():
    rng = np.random.default_rng(6)
    params = {n: Tensor(v.data.astype(np.float32)) for n, v in stem_params(rng, d=32).items()}
    vol = Tensor(rng.normal(size=(1, 32, 32, 32)).astype(np.float32))
    assert masa.masa_forward(vol, masa.MasaConfig(embed_dim=32), params).shape == (512, 32)


def test_zero_attention_weights_add_value_bias():
    rng = np.random.default_rng(7)
    p = stem_params(rng)
    for n in "qkv":
        p[f"attn.w{n}"] = t64(np.zeros((4, 4)))
    feats = masa.masa_features(t64(rng.normal(size=(1, 8, 8, 8))), masa.MasaConfig(embed_dim=4), p)
    np.testing.assert_allclose(feats.output.data, feats.fused.data + p["attn.bv"].data, rtol=1e-14)


def test_residual_identity_when_attention_is_zero():
    rng = np.random.default_rng(8)
    p = stem_params(rng)
    p["attn.wv"] = t64(np.zeros((4, 4)))
    p["attn.bv"] = t64(np.zeros(4))
    feats = masa.masa_features(t64(rng.normal(size=(1, 8, 8, 8))), masa.MasaConfig(embed_dim=4), p)
    np.testing.assert_array_equal(feats.output.data, feats.fused.data)


def test_features_are_consistent():
    rng = np.random.default_rng(9)
    p = stem_params(rng)
    feats = masa.masa_features(t64(rng.normal(size=(1, 8, 8, 8))), masa.MasaConfig(embed_dim=4), p)
    assert feats.fine.shape == feats.medium.shape == feats.coarse.shape == (8, 4)
    np.testing.assert_array_equal(feats.fused.data, feats.fine.data + feats.medium.data + feats.coarse.data)


def test_full_module_gradient():
    rng = np.random.default_rng(10)
    p = stem_params(rng, d=3)
    names = list(p)
    vol = t64(rng.normal(size=(1, 8, 8, 8)))
    c = rng.normal(size=(8, 3))
    cfg = masa.MasaConfig(embed_dim=3)

    def f(v, *vals):
        return reduce_sum(masa.masa_forward(v, cfg, dict(zip(names, vals))) * c)

    assert grad_check(f, [vol] + [p[n] for n in names], max_coords=12) < 1e-4
