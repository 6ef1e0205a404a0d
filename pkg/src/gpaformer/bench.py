"""Wall-clock comparison of full self-attention and graph-reduced attention."""
from __future__ import annotations

import time

import numpy as np

from . import mpga
from .numerics import Tensor, no_grad


def attention_params(d: int, k: int, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    b = 1.0 / np.sqrt(d)
    p = {}
    for n in "qkvo":
        p[f"w{n}"] = Tensor(rng.uniform(-b, b, (d, d)).astype(dtype))
        p[f"b{n}"] = Tensor(np.zeros(d, dtype=dtype))
    p["ws"] = Tensor(rng.uniform(-b, b, (d, k)).astype(dtype))
    return p


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def compare_attention(grid_dims=(24, 24, 24), d: int = 32, k_ratio: float = 0.125, tau: float = 1.8,
                      repeats: int = 2, seed: int = 0) -> dict[str, float]:
    """Time full N^2 attention against graph-reduced attention on the same tokens.

    Both use identical projections; the adjacency for the grid is built once
    before timing (it depends only on the layout).
    """
    grid_dims = tuple(int(g) for g in grid_dims)
    n = int(np.prod(grid_dims))
    k = max(1, int(round(n * k_ratio)))
    params = attention_params(d, k, seed)
    x = Tensor(np.random.default_rng(seed + 1).normal(size=(n, d)).astype(np.float32))
    mpga.grid_adjacency(grid_dims, float(tau))
    with no_grad():
        full = _best_time(lambda: mpga.reduced_attention(x, x, params), repeats)
        reduced = _best_time(lambda: mpga.mpga_attention(x, grid_dims, tau, params), repeats)
    return {"tokens": n, "representatives": k, "full_s": full, "mpga_s": reduced, "speedup": full / reduced}
