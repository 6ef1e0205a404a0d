"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import kvconfig
from .bench import compare_attention
from .data import (
    LabeledSample,
    Volume,
    VolumeFormatError,
    kfold_split,
    load_dataset,
    phantom_generate,
    read_volume,
    save_dataset,
    write_volume,
)
from .harness import NumericalError, TrainConfig, evaluate, sliding_window_infer, train
from .network import CheckpointError, Model, ModelConfig, count_params, estimate_flops
from .numerics import no_grad

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gpaformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return vals


def load_configs(path: str | None, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Split one key=value file between the model and training configs."""
    values = kvconfig.read_kv(path) if path else {}
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mvals = {k: v for k, v in values.items() if k in model_keys}
    tvals = {k: v for k, v in values.items() if k in train_keys}
    if "window" in mvals and "crop_dims" not in tvals:
        tvals["crop_dims"] = mvals["window"]
    if "crop_dims" in tvals and "window" not in mvals:
        mvals["window"] = tvals["crop_dims"]
    try:
        mcfg = kvconfig.from_kv(ModelConfig, mvals)
        tcfg = kvconfig.from_kv(TrainConfig, tvals)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    if overrides:
        m_over = {k: v for k, v in overrides.items() if k in model_keys and v is not None}
        t_over = {k: v for k, v in overrides.items() if k in train_keys and v is not None}
        mcfg = dataclasses.replace(mcfg, **m_over)
        tcfg = dataclasses.replace(tcfg, **t_over)
    return mcfg, tcfg


def _fold_samples(data: str, fold: int, k: int, seed: int) -> tuple[list[LabeledSample], list[LabeledSample]]:
    if not 0 <= fold < k:
        raise UsageError(f"--fold must be in 0..{k - 1}, got {fold}")
    samples = load_dataset(data)
    if len(samples) < k:
        raise UsageError(f"{len(samples)} samples cannot form {k} folds")
    split = kfold_split([s.id for s in samples], k, seed)
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in split.train_ids(fold)], [by_id[i] for i in split.fold_ids(fold)]


# -- commands ----------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be >= 2 (background plus at least one foreground class)")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = [phantom_generate(args.seed + i, args.dims, args.classes, args.objects_per_class)
               for i in range(args.count)]
    save_dataset(samples, args.out, ".nii" if args.format == "nii" else ".vol")
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"max_iterations": args.max_iterations, "validate_every": args.validate_every,
                 "patience": args.patience, "seed": args.seed}
    mcfg, tcfg = load_configs(args.config, overrides)
    if args.no_masa or args.no_mpga:
        mcfg = dataclasses.replace(mcfg, enable_masa=mcfg.enable_masa and not args.no_masa,
                                   enable_mpga=mcfg.enable_mpga and not args.no_mpga)
    train_set, val_set = _fold_samples(args.data, args.fold, args.k, args.seed)
    needed = 1 + max(int(s.labels.voxels.max()) for s in train_set + val_set)
    if needed > mcfg.num_classes:
        explicit = args.config and "num_classes" in kvconfig.read_kv(args.config)
        if explicit:
            raise UsageError(f"labels reach class {needed - 1} but num_classes={mcfg.num_classes}")
        mcfg = dataclasses.replace(mcfg, num_classes=needed)
    model = Model.create(mcfg, seed=args.seed)
    log_path = Path(str(args.out) + ".log")
    with open(log_path, "w") as fh:
        fh.write(kvconfig.dump_kv([("fold", args.fold), ("k", args.k), ("enable_masa", mcfg.enable_masa),
                                   ("enable_mpga", mcfg.enable_mpga)]))

        def record(iteration: int, metric: float) -> None:
            fh.write(f"validation\t{iteration}\t{metric!r}\n")
            fh.flush()

        state = train(model, train_set, val_set, tcfg, checkpoint=args.out, on_validation=record)
        fh.write(f"final\titerations={state.iteration}\tbest_val_dsc={state.best_val_dsc!r}\t"
                 f"best_iteration={state.best_iteration}\tstopped_early={state.stopped_early}\n")
    print(f"iterations={state.iteration} best_val_dsc={state.best_val_dsc:.4f} checkpoint={args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = Model.load(args.ckpt)
    volume = read_volume(args.input)
    window = args.window or model.config.window
    image = volume.voxels.astype(np.float32)[None]
    t0 = time.perf_counter()
    logits = sliding_window_infer(model, image, window, args.overlap)
    elapsed = time.perf_counter() - t0
    labels = np.argmax(logits, axis=0).astype(np.float32)
    out_path = args.out
    if str(args.input).endswith(".nii") and not str(out_path).endswith(".nii"):
        out_path = str(out_path) + ".nii"
    elif not str(args.input).endswith(".nii") and str(out_path).endswith(".nii"):
        out_path = str(out_path)[:-4] + ".vol"
    write_volume(Volume(labels, volume.spacing), out_path)
    print(f"inference_time_s={elapsed:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(args.ckpt)
    _, val_set = _fold_samples(args.data, args.fold, args.k, args.seed)
    result = evaluate(model, val_set, model.config.num_classes, model.config.window, args.overlap)
    print(result.table(), end="")
    records = Path(args.records or str(args.ckpt) + ".eval.tsv")
    records.write_text(result.record_lines())
    return EXIT_OK


def cmd_bench(args) -> int:
    mcfg, _ = load_configs(args.config)
    shape = tuple(args.input_shape)
    mcfg = dataclasses.replace(mcfg, window=shape)
    print(f"params_m={count_params(mcfg) / 1e6:.2f}")
    print(f"gflops={estimate_flops(mcfg, shape) / 1e9:.2f}")
    if not args.skip_forward:
        model = Model.create(mcfg, seed=args.seed)
        x = np.random.default_rng(args.seed).random((mcfg.in_channels, *shape), dtype=np.float32)
        t0 = time.perf_counter()
        model(x)
        print(f"forward_s={time.perf_counter() - t0:.4f}")
    if args.compare_full_attention:
        res = compare_attention(mcfg.stage_grid(0, shape), mcfg.stage_dims[0], mcfg.k_ratio, mcfg.tau,
                                repeats=args.repeats, seed=args.seed)
        print(f"tokens={res['tokens']} representatives={res['representatives']}")
        print(f"full_attention_s={res['full_s']:.4f}")
        print(f"mpga_attention_s={res['mpga_s']:.4f}")
        print(f"speedup={res['speedup']:.2f}")
    return EXIT_OK


def cmd_dump_assignments(args) -> int:
    model = Model.load(args.ckpt)
    cfg = model.config
    if not cfg.enable_mpga:
        raise UsageError("checkpoint was trained without graph aggregation; no assignments to dump")
    if not 0 <= args.stage < 3 or not 0 <= args.block < cfg.blocks_per_stage[args.stage]:
        raise UsageError(f"stage must be 0..2 and block 0..{cfg.blocks_per_stage[0] - 1}")
    volume = read_volume(args.input)
    trace: dict = {}
    with no_grad():
        model.logits(volume.voxels.astype(np.float32)[None], trace=trace)
    s = trace["assignments"][(args.stage, args.block)].data
    clusters = np.argmax(s, axis=1)  # ties resolve to the lowest index
    grid = cfg.stage_grid(args.stage, volume.dims)
    patch = cfg.patch_size * 2 ** args.stage
    painted = clusters.reshape(grid)
    for axis in range(3):
        painted = np.repeat(painted, patch, axis=axis)
    out_path = args.out
    if str(args.input).endswith(".nii") and not str(out_path).endswith(".nii"):
        out_path = str(out_path) + ".nii"
    write_volume(Volume(painted.astype(np.float32), volume.spacing), out_path)
    print(f"clusters={len(np.unique(clusters))} of K={s.shape[1]}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpaformer", description="Graph-guided patch aggregation segmentation toolkit.")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", type=_triple, default=(32, 32, 32))
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--objects-per-class", type=int, default=2)
    p.add_argument("--format", choices=("vol", "nii"), default="vol")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint manifest path")
    p.add_argument("--no-masa", action="store_true", help="plain patch-embedding stem")
    p.add_argument("--no-mpga", action="store_true", help="full self-attention in every block")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=_triple)
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-class DSC on a validation fold")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--records", help="tab-separated id/class/dsc output (default: <ckpt>.eval.tsv)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="parameter count, FLOPs and timing")
    p.add_argument("--config")
    p.add_argument("--input-shape", type=_triple, default=(96, 96, 96))
    p.add_argument("--compare-full-attention", action="store_true")
    p.add_argument("--skip-forward", action="store_true")
    p.add_argument("--repeats", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-assignments", help="paint each patch with its argmax cluster")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--stage", type=int, default=0, help="0-based stage index")
    p.add_argument("--block", type=int, default=0, help="0-based block index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_assignments)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gpaformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gpaformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFormatError, CheckpointError) as exc:
        print(f"gpaformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
