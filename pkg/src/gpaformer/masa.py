"""Multi-receptive-field convolutional stem.

Three parallel paths (kernels 3, 5, 7) each reduce the volume twice with
stride-2 convolutions, are flattened to token sequences, summed, and refined
by a residual self-attention layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops

KERNEL_SIZES = (3, 5, 7)
PATH_NAMES = ("fine", "medium", "coarse")


@dataclass(frozen=True)
class MasaConfig:
    in_channels: int = 1
    embed_dim: int = 32
    kernel_sizes: tuple[int, int, int] = KERNEL_SIZES
    heads: int = 1

    def __post_init__(self):
        if tuple(self.kernel_sizes) != KERNEL_SIZES:
            raise ValueError(f"kernel sizes are fixed at {KERNEL_SIZES}")


@dataclass
class PathFeatures:
    fine: Tensor
    medium: Tensor
    coarse: Tensor
    fused: Tensor
    output: Tensor


def volume_to_tokens(x: Tensor) -> Tensor:
    """``[C, D, H, W]`` -> ``[D*H*W, C]`` in row-major voxel order."""
    c = x.shape[0]
    return ops.transpose(ops.reshape(x, (c, -1)))


def tokens_to_volume(tokens: Tensor, grid_dims) -> Tensor:
    return ops.reshape(ops.transpose(tokens), (tokens.shape[1], *grid_dims))


def check_divisible(shape, factor: int) -> None:
    bad = [n for n in shape if n % factor]
    if bad:
        raise ValueError(f"spatial extents {tuple(shape)} must each be divisible by {factor}")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of ``[C, D, H, W]`` over its spatial extent."""
    c = x.shape[0]
    flat = ops.reshape(x, (c, -1))
    n = flat.shape[1]
    unit = ops.layer_norm(flat, Tensor(np.ones(n, dtype=x.dtype)), Tensor(np.zeros(n, dtype=x.dtype)), eps)
    out = ops.add(ops.mul(unit, ops.reshape(gamma, (c, 1))), ops.reshape(beta, (c, 1)))
    return ops.reshape(out, x.shape)


def path_extract(volume: Tensor, kernel: int, params: dict[str, Tensor]) -> Tensor:
    """conv(k, s2) -> channel norm -> GELU -> conv(k, s2), flattened to tokens."""
    check_divisible(volume.shape[1:], 4)
    pad = (kernel - 1) // 2
    h = ops.conv3d(volume, params["conv1.weight"], params["conv1.bias"], stride=2, padding=pad)
    h = ops.gelu(instance_norm(h, params["norm.gamma"], params["norm.beta"]))
    h = ops.conv3d(h, params["conv2.weight"], params["conv2.bias"], stride=2, padding=pad)
    return volume_to_tokens(h)


def fuse(fine: Tensor, medium: Tensor, coarse: Tensor) -> Tensor:
    if not fine.shape == medium.shape == coarse.shape:
        raise ops.ShapeError(f"path shapes differ: {fine.shape}, {medium.shape}, {coarse.shape}")
    return ops.add(ops.add(fine, medium), coarse)


def self_attention(x: Tensor, params: dict[str, Tensor], heads: int = 1) -> Tensor:
    q = ops.linear(x, params["wq"], params["bq"])
    k = ops.linear(x, params["wk"], params["bk"])
    v = ops.linear(x, params["wv"], params["bv"])
    return ops.multi_head_attention(q, k, v, heads)


def masa_features(volume: Tensor, config: MasaConfig, params: dict[str, Tensor]) -> PathFeatures:
    """All intermediate maps of the stem; ``params`` keys are prefixed by path name."""
    paths = []
    for name, k in zip(PATH_NAMES, config.kernel_sizes):
        sub = {key[len(name) + 1:]: v for key, v in params.items() if key.startswith(name + ".")}
        paths.append(path_extract(volume, k, sub))
    fused = fuse(*paths)
    attn = {key[5:]: v for key, v in params.items() if key.startswith("attn.")}
    out = ops.add(fused, self_attention(fused, attn, config.heads))
    return PathFeatures(*paths, fused=fused, output=out)


def masa_forward(volume: Tensor, config: MasaConfig, params: dict[str, Tensor]) -> Tensor:
    return masa_features(volume, config, params).output
