"""Three-stage segmentation network: stem, graph-reduced transformer stages, MLP decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kvconfig, masa, mpga
from .numerics import Parameter, Tensor, no_grad, ops

CHECKPOINT_FORMAT = "gpaformer-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    stage_dims: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    patch_size: int = 4
    k_ratio: float = 0.125
    tau: float = 1.8
    enable_masa: bool = True
    enable_mpga: bool = True
    heads: int = 1
    mlp_ratio: float = 2.0
    decoder_dim: int = 64
    # Reference input extent; fixes the token count per stage and hence K.
    window: tuple[int, int, int] = (96, 96, 96)
    norm_eps: float = 1e-5

    def __post_init__(self):
        if tuple(self.blocks_per_stage) != (2, 2, 2):
            raise ValueError("blocks_per_stage is fixed at (2, 2, 2)")
        if self.patch_size != 4:
            raise ValueError("patch_size is fixed at 4")
        d = self.stage_dims
        if not (d[0] < d[1] < d[2]):
            raise ValueError(f"stage_dims must be strictly increasing, got {d}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(dim % self.heads for dim in d):
            raise ValueError("every stage dim must be divisible by heads")
        masa.check_divisible(self.window, 16)

    def stage_grid(self, stage: int, shape=None) -> tuple[int, int, int]:
        shape = self.window if shape is None else shape
        f = self.patch_size * 2 ** stage
        return tuple(int(n) // f for n in shape)

    def num_representatives(self, stage: int) -> int:
        n = int(np.prod(self.stage_grid(stage)))
        return max(1, int(round(n * self.k_ratio)))

    def mlp_hidden(self, stage: int) -> int:
        return int(round(self.stage_dims[stage] * self.mlp_ratio))


# -- parameter layout ------------------------------------------------------------------

def _linear(prefix: str, d_in: int, d_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.weight", (d_in, d_out)), (f"{prefix}.bias", (d_out,))]


def _attn(prefix: str, d: int, out_proj: bool, k: int | None) -> list[tuple[str, tuple[int, ...]]]:
    names = ["q", "k", "v"] + (["o"] if out_proj else [])
    shapes = []
    for n in names:
        shapes += [(f"{prefix}.w{n}", (d, d)), (f"{prefix}.b{n}", (d,))]
    if k is not None:
        shapes.append((f"{prefix}.ws", (d, k)))
    return shapes


def _norm(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gamma", (d,)), (f"{prefix}.beta", (d,))]


def stem_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, c = cfg.stage_dims[0], cfg.in_channels
    if not cfg.enable_masa:
        p = cfg.patch_size
        return [("patch_embed.weight", (d, c, p, p, p)), ("patch_embed.bias", (d,))]
    shapes = []
    for name, k in zip(masa.PATH_NAMES, masa.KERNEL_SIZES):
        pre = f"masa.{name}"
        shapes += [(f"{pre}.conv1.weight", (d, c, k, k, k)), (f"{pre}.conv1.bias", (d,))]
        shapes += _norm(f"{pre}.norm", d)
        shapes += [(f"{pre}.conv2.weight", (d, d, k, k, k)), (f"{pre}.conv2.bias", (d,))]
    return shapes + _attn("masa.attn", d, out_proj=False, k=None)


def block_shapes(cfg: ModelConfig, stage: int, block: int) -> list[tuple[str, tuple[int, ...]]]:
    d, hid = cfg.stage_dims[stage], cfg.mlp_hidden(stage)
    pre = f"stage{stage}.block{block}"
    k = cfg.num_representatives(stage) if cfg.enable_mpga else None
    return (_norm(f"{pre}.norm1", d) + _attn(f"{pre}.attn", d, out_proj=True, k=k)
            + _norm(f"{pre}.norm2", d) + _linear(f"{pre}.mlp.fc1", d, hid)
            + _linear(f"{pre}.mlp.fc2", hid, d))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = stem_shapes(cfg)
    for s in range(3):
        for b in range(cfg.blocks_per_stage[s]):
            shapes += block_shapes(cfg, s, b)
        if s < 2:
            d0, d1 = cfg.stage_dims[s], cfg.stage_dims[s + 1]
            shapes += [(f"down{s}.weight", (d1, d0, 3, 3, 3)), (f"down{s}.bias", (d1,))]
    e = cfg.decoder_dim
    for s in range(3):
        shapes += _linear(f"decoder.proj{s}", cfg.stage_dims[s], e)
    shapes += _linear("decoder.fuse1", 3 * e, e) + _linear("decoder.fuse2", e, e)
    shapes += _linear("decoder.head", e, cfg.num_classes)
    return dict(shapes)


def count_params(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def _fan_in(name: str, shape: tuple[int, ...], shapes: Mapping[str, tuple[int, ...]]) -> int:
    if len(shape) == 5:
        return int(np.prod(shape[1:]))
    if len(shape) == 2:
        return shape[0]
    # biases follow the fan-in of their weight
    stem = name.rsplit(".", 1)
    if stem[1] == "bias":
        return _fan_in(stem[0] + ".weight", shapes[stem[0] + ".weight"], shapes)
    if stem[1].startswith("b"):
        w = f"{stem[0]}.w{stem[1][1:]}"
        return _fan_in(w, shapes[w], shapes)
    return shape[0]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; norms start at identity."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, shapes))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(Tensor(arr.astype(dtype)))
    return params


def _values(params: Mapping[str, Parameter | Tensor]) -> dict[str, Tensor]:
    return {k: (v.value if isinstance(v, Parameter) else v) for k, v in params.items()}


def _sub(values: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


# -- forward pieces -----------------------------------------------------------------------

def embed(volume: Tensor, cfg: ModelConfig, params) -> tuple[Tensor, tuple[int, int, int]]:
    """Stage-1 tokens at 1/4 resolution and their grid."""
    values = _values(params)
    masa.check_divisible(volume.shape[1:], 16)
    if volume.shape[0] != cfg.in_channels:
        raise ops.ShapeError(f"expected {cfg.in_channels} input channels, got {volume.shape[0]}")
    grid = tuple(n // cfg.patch_size for n in volume.shape[1:])
    if cfg.enable_masa:
        mcfg = masa.MasaConfig(cfg.in_channels, cfg.stage_dims[0], heads=cfg.heads)
        return masa.masa_forward(volume, mcfg, _sub(values, "masa")), grid
    h = ops.conv3d(volume, values["patch_embed.weight"], values["patch_embed.bias"],
                   stride=cfg.patch_size, padding=0)
    return masa.volume_to_tokens(h), grid


def transformer_block(tokens: Tensor, grid, values: Mapping[str, Tensor], cfg: ModelConfig,
                      trace: dict | None = None) -> Tensor:
    eps = cfg.norm_eps
    attn = _sub(values, "attn")
    h = ops.layer_norm(tokens, values["norm1.gamma"], values["norm1.beta"], eps)
    if cfg.enable_mpga:
        a = mpga.mpga_attention(h, grid, cfg.tau, attn, cfg.heads, trace)
    else:
        a = mpga.reduced_attention(h, h, attn, cfg.heads)
    tokens = ops.add(tokens, a)
    h = ops.layer_norm(tokens, values["norm2.gamma"], values["norm2.beta"], eps)
    h = ops.gelu(ops.linear(h, values["mlp.fc1.weight"], values["mlp.fc1.bias"]))
    h = ops.linear(h, values["mlp.fc2.weight"], values["mlp.fc2.bias"])
    return ops.add(tokens, h)


def stage_forward(tokens: Tensor, grid, stage: int, params, cfg: ModelConfig,
                  trace: dict | None = None) -> Tensor:
    if tokens.shape[0] != int(np.prod(grid)):
        raise ops.ShapeError(f"{tokens.shape[0]} tokens do not fill grid {tuple(grid)}")
    values = _values(params)
    for b in range(cfg.blocks_per_stage[stage]):
        block_trace = {} if trace is not None else None
        tokens = transformer_block(tokens, grid, _sub(values, f"stage{stage}.block{b}"), cfg, block_trace)
        if trace is not None and "S" in block_trace:
            trace.setdefault("assignments", {})[(stage, b)] = block_trace["S"]
    return tokens


def downsample(tokens: Tensor, grid, stage: int, params) -> tuple[Tensor, tuple[int, int, int]]:
    if any(g % 2 for g in grid):
        raise ValueError(f"cannot halve odd grid {tuple(grid)}")
    values = _values(params)
    vol = masa.tokens_to_volume(tokens, grid)
    h = ops.conv3d(vol, values[f"down{stage}.weight"], values[f"down{stage}.bias"], stride=2, padding=1)
    return masa.volume_to_tokens(h), tuple(h.shape[1:])


def decode(stages: list[Tensor], grids: list[tuple[int, int, int]], params, cfg: ModelConfig) -> Tensor:
    values = _values(params)
    maps = []
    for s, (tok, grid) in enumerate(zip(stages, grids)):
        t = ops.linear(tok, values[f"decoder.proj{s}.weight"], values[f"decoder.proj{s}.bias"])
        maps.append(ops.trilinear_upsample(masa.tokens_to_volume(t, grid), 2 ** s))
    h = masa.volume_to_tokens(ops.concat(maps, axis=0))
    h = ops.gelu(ops.linear(h, values["decoder.fuse1.weight"], values["decoder.fuse1.bias"]))
    h = ops.linear(h, values["decoder.fuse2.weight"], values["decoder.fuse2.bias"])
    h = ops.linear(h, values["decoder.head.weight"], values["decoder.head.bias"])
    return ops.trilinear_upsample(masa.tokens_to_volume(h, grids[0]), cfg.patch_size)


def forward(volume: Tensor, cfg: ModelConfig, params, trace: dict | None = None) -> Tensor:
    """Volume ``[C, D, H, W]`` to logits ``[num_classes, D, H, W]``."""
    values = _values(params)
    tokens, grid = embed(volume, cfg, values)
    stages, grids = [], []
    for s in range(3):
        if s:
            tokens, grid = downsample(tokens, grid, s - 1, values)
        tokens = stage_forward(tokens, grid, s, values, cfg, trace)
        stages.append(tokens)
        grids.append(grid)
    return decode(stages, grids, values, cfg)


# -- analytic cost ---------------------------------------------------------------------------

def conv_flops(c_out: int, c_in: int, k: int, out_voxels: int) -> int:
    return 2 * c_out * c_in * k ** 3 * out_voxels


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def attention_flops(n_q: int, n_k: int, d: int) -> int:
    return 2 * (2 * n_q * n_k * d) + 5 * n_q * n_k


def estimate_flops(cfg: ModelConfig, input_shape) -> int:
    """Multiply-add and softmax work; norms, activations and interpolation are not counted."""
    shape = tuple(int(n) for n in input_shape)
    masa.check_divisible(shape, 16)
    d0 = cfg.stage_dims[0]
    total = 0
    g1 = int(np.prod(cfg.stage_grid(0, shape)))
    if cfg.enable_masa:
        half = int(np.prod([n // 2 for n in shape]))
        for k in masa.KERNEL_SIZES:
            total += conv_flops(d0, cfg.in_channels, k, half) + conv_flops(d0, d0, k, g1)
        total += 3 * matmul_flops(g1, d0, d0) + attention_flops(g1, g1, d0)
    else:
        total += conv_flops(d0, cfg.in_channels, cfg.patch_size, g1)
    for s in range(3):
        grid = cfg.stage_grid(s, shape)
        n = int(np.prod(grid))
        d, hid = cfg.stage_dims[s], cfg.mlp_hidden(s)
        for _ in range(cfg.blocks_per_stage[s]):
            if cfg.enable_mpga:
                k = cfg.num_representatives(s)
                nnz = mpga.grid_adjacency(grid, float(cfg.tau)).nnz
                total += 2 * nnz * d            # cosine on edges
                total += 2 * nnz * d            # message passing
                total += matmul_flops(n, d, k) + 5 * n * k + matmul_flops(k, n, d)
                total += matmul_flops(n, d, d) + 2 * matmul_flops(k, d, d) + matmul_flops(n, d, d)
                total += attention_flops(n, k, d)
            else:
                total += 4 * matmul_flops(n, d, d) + attention_flops(n, n, d)
            total += matmul_flops(n, d, hid) + matmul_flops(n, hid, d)
        if s < 2:
            nxt = int(np.prod(cfg.stage_grid(s + 1, shape)))
            total += conv_flops(cfg.stage_dims[s + 1], d, 3, nxt)
    e = cfg.decoder_dim
    for s in range(3):
        total += matmul_flops(int(np.prod(cfg.stage_grid(s, shape))), cfg.stage_dims[s], e)
    total += matmul_flops(g1, 3 * e, e) + matmul_flops(g1, e, e) + matmul_flops(g1, e, cfg.num_classes)
    return int(total)


# -- model object and checkpoints ------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, init_params(config, seed, dtype))

    def logits(self, volume, trace: dict | None = None) -> Tensor:
        if not isinstance(volume, Tensor):
            volume = Tensor(np.asarray(volume, dtype=self.dtype))
        return forward(volume, self.config, self.params, trace)

    def __call__(self, volume) -> np.ndarray:
        with no_grad():
            return self.logits(volume).data

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.data.copy() for k, p in self.params.items()}

    def load_snapshot(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].value.data[...] = arr

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.config, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        cfg, params = load_checkpoint(path)
        return cls(cfg, params)


class CheckpointError(ValueError):
    pass


def blob_path(path: str | Path) -> Path:
    return Path(str(path) + ".bin")


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, Parameter | Tensor]) -> None:
    """Text manifest at ``path`` plus little-endian float32 parameters at ``path.bin``."""
    path = Path(path)
    values = _values(params)
    items: list[tuple[str, object]] = [("format", CHECKPOINT_FORMAT), ("blob", blob_path(path).name)]
    items += [(f"config.{k}", v) for k, v in kvconfig.to_items(cfg)]
    items += [(f"param.{k}", v.shape) for k, v in values.items()]
    path.write_text(kvconfig.dump_kv(items))
    with open(blob_path(path), "wb") as fh:
        for v in values.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[ModelConfig, dict[str, Parameter]]:
    path = Path(path)
    manifest = kvconfig.read_kv(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    try:
        cfg = kvconfig.from_kv(ModelConfig, {k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config entry ({exc})") from None
    shapes = {k[6:]: tuple(int(x) for x in v.split(",") if x) for k, v in manifest.items()
              if k.startswith("param.")}
    expected = param_shapes(cfg)
    if shapes != expected:
        missing = set(expected) ^ set(shapes)
        bad = [k for k in expected if k in shapes and shapes[k] != expected[k]]
        raise CheckpointError(f"{path}: parameter layout does not match config "
                              f"(name mismatch {sorted(missing)[:5]}, shape mismatch {bad[:5]})")
    raw = np.fromfile(path.parent / manifest.get("blob", blob_path(path).name), dtype="<f4")
    need = sum(math.prod(s) for s in shapes.values())
    if raw.size != need:
        raise CheckpointError(f"{path}: blob holds {raw.size} floats, manifest needs {need}")
    params, pos = {}, 0
    for name, shape in shapes.items():
        n = math.prod(shape)
        params[name] = Parameter(Tensor(raw[pos:pos + n].reshape(shape).astype(dtype)))
        pos += n
    return cfg, params


def with_toggles(cfg: ModelConfig, masa_on: bool, mpga_on: bool) -> ModelConfig:
    return replace(cfg, enable_masa=masa_on, enable_mpga=mpga_on)
