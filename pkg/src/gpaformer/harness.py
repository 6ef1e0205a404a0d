"""Training loop with periodic validation and early stopping, tiled inference, evaluation."""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import AugmentFlags, CropSampler, LabeledSample, augment
from .losses import dice_ce, per_class_dsc
from .network import Model
from .numerics import adamw_step, backward

log = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    validate_every: int = 500
    patience: int = 10
    max_iterations: int = 20000
    alpha: float = 1.0
    beta: float = 1.0
    weight_decay: float = 1e-5
    seed: int = 0
    crop_dims: tuple[int, int, int] = (96, 96, 96)
    overlap: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.patience < 1 or self.validate_every < 1:
            raise ValueError("patience and validate_every must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainState:
    iteration: int = 0
    best_val_dsc: float = -math.inf
    best_iteration: int = 0
    validations_since_best: int = 0
    loss_history: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False
    best_params: dict[str, np.ndarray] | None = None


# -- inference -------------------------------------------------------------------------------

def tile_starts(extent: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def sliding_window_infer(model: Predictor, volume: np.ndarray, window_dims, overlap: float = 0.5) -> np.ndarray:
    """Average the logits of overlapping ``window_dims`` tiles over ``volume`` ``[C, D, H, W]``.

    Extents smaller than the window are reflection-padded and the padding is
    cropped off the result.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    volume = np.asarray(volume)
    spatial = volume.shape[1:]
    window = tuple(int(w) for w in window_dims)
    pads = []
    for n, w in zip(spatial, window):
        extra = max(w - n, 0)
        if extra and (n < 2 or extra > n - 1):
            raise ValueError(f"window {window} too large for volume {spatial} even after reflection padding")
        pads.append((extra // 2, extra - extra // 2))
    padded = np.pad(volume, [(0, 0)] + pads, mode="reflect") if any(p != (0, 0) for p in pads) else volume
    strides = [max(1, int(w * (1.0 - overlap))) for w in window]
    acc = None
    counts = np.zeros(padded.shape[1:], dtype=np.float64)
    grids = [tile_starts(n, w, s) for n, w, s in zip(padded.shape[1:], window, strides)]
    for start in itertools.product(*grids):
        sl = tuple(slice(s, s + w) for s, w in zip(start, window))
        out = np.asarray(model(padded[(slice(None),) + sl]), dtype=np.float64)
        if acc is None:
            acc = np.zeros((out.shape[0],) + padded.shape[1:], dtype=np.float64)
        acc[(slice(None),) + sl] += out
        counts[sl] += 1.0
    acc /= counts
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, spatial))
    return acc[(slice(None),) + crop]


def predict_labels(model: Predictor, image: np.ndarray, window_dims, overlap: float = 0.5) -> np.ndarray:
    vol = image[None] if image.ndim == 3 else image
    return np.argmax(sliding_window_infer(model, vol, window_dims, overlap), axis=0)


# -- evaluation -----------------------------------------------------------------------------

@dataclass
class EvalResult:
    num_classes: int
    records: list[tuple[str, int, float]]

    @property
    def per_class(self) -> dict[int, float]:
        out = {}
        for c in range(1, self.num_classes):
            vals = [d for _, cls, d in self.records if cls == c]
            out[c] = float(np.mean(vals)) if vals else float("nan")
        return out

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_class.values())))

    def table(self) -> str:
        pc = self.per_class
        head = "\t".join([f"class{c}" for c in pc] + ["mean"])
        row = "\t".join([f"{v:.4f}" for v in pc.values()] + [f"{self.mean:.4f}"])
        return f"{head}\n{row}\n"

    def record_lines(self) -> str:
        return "".join(f"{sid}\t{c}\t{d!r}\n" for sid, c, d in self.records)


def evaluate(model: Predictor, samples: Sequence[LabeledSample], num_classes: int, window_dims=None,
             overlap: float = 0.5) -> EvalResult:
    """Per-sample, per-foreground-class DSC of argmax predictions."""
    records = []
    for s in samples:
        window = s.dims if window_dims is None else window_dims
        pred = predict_labels(model, s.image.voxels, window, overlap)
        for c, d in enumerate(per_class_dsc(s.labels.voxels, pred, num_classes), start=1):
            records.append((s.id, c, d))
    return EvalResult(num_classes, records)


# -- training -------------------------------------------------------------------------------

def train(model: Model, train_samples: Sequence[LabeledSample], val_samples: Sequence[LabeledSample],
          cfg: TrainConfig, checkpoint: str | Path | None = None,
          val_metric: Callable[[Model], float] | None = None,
          on_validation: Callable[[int, float], None] | None = None) -> TrainState:
    """Crop -> augment -> DiceCE -> backward -> AdamW, validating every ``validate_every`` steps.

    Stops once ``patience`` consecutive validations fail to strictly beat the
    best mean DSC, or at ``max_iterations``. The best parameters are kept in
    the returned state and written to ``checkpoint`` when given.
    """
    if not train_samples or not val_samples:
        raise ValueError("training needs at least one training and one validation sample")
    rng = np.random.default_rng(cfg.seed)
    sampler = CropSampler(tuple(cfg.crop_dims), rng)
    flags = AugmentFlags() if cfg.augment else AugmentFlags(False, False, False)
    num_classes = model.config.num_classes
    if val_metric is None:
        def val_metric(m: Model) -> float:
            return evaluate(m, val_samples, num_classes, cfg.crop_dims, cfg.overlap).mean

    state = TrainState()
    order: list[int] = []
    dtype = model.dtype
    while state.iteration < cfg.max_iterations:
        if not order:
            order = list(rng.permutation(len(train_samples)))
        sample = sampler(train_samples[order.pop()])
        if cfg.augment:
            sample = augment(sample, rng, flags)
        image = sample.image.voxels.astype(dtype)[None]
        loss = dice_ce(model.logits(image), sample.labels.voxels, cfg.alpha, cfg.beta)
        value = float(loss.data)
        state.iteration += 1
        if not math.isfinite(value):
            raise NumericalError(state.iteration, value)
        backward(loss)
        for p in model.params.values():
            adamw_step(p, p.value.grad, cfg.lr, weight_decay=cfg.weight_decay)
            p.zero_grad()
        state.loss_history.append(value)

        if state.iteration % cfg.validate_every == 0:
            t0 = time.perf_counter()
            metric = float(val_metric(model))
            state.val_history.append((state.iteration, metric))
            log.info("iter %d loss %.4f val_dsc %.4f (%.1fs)", state.iteration, value, metric,
                     time.perf_counter() - t0)
            if on_validation is not None:
                on_validation(state.iteration, metric)
            if metric > state.best_val_dsc:
                state.best_val_dsc = metric
                state.best_iteration = state.iteration
                state.validations_since_best = 0
                state.best_params = model.snapshot()
                if checkpoint is not None:
                    model.save(checkpoint)
            else:
                state.validations_since_best += 1
                if state.validations_since_best >= cfg.patience:
                    state.stopped_early = True
                    break
    if state.best_params is None and checkpoint is not None:
        model.save(checkpoint)
    return state
