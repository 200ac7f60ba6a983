"""Command-line entry point: synth, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
Every command checks its inputs before it writes anything.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import config as config_mod
from . import data, layers, metrics, model as model_mod, training
from .fusion import FUSION_KINDS

log = logging.getLogger("mldrnet")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class UsageError(ValueError):
    """Invalid command-line input; maps to exit code 1."""


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ------------------------------------------------------------------ synth

def cmd_synth(args):
    spec = data.SynthSpec(count=args.count, image_size=args.size, cue_mix=_floats(args.cue_mix),
                          noise_sigma=args.noise_sigma, seed=args.seed, n_classes=args.n_classes,
                          blank_cues=args.blank_cues)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = data.synth(spec)
    data.store(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ train

def run_config(args) -> config_mod.RunConfig:
    """Config file first, then explicit flags on top."""
    cfg = config_mod.RunConfig(model=model_mod.desk_config())
    try:
        from_file = config_mod.load_file(args.config) if args.config else {}
        config_mod.apply(cfg, from_file)
        flags = {k: v for k, v in vars(args).items() if k in _OVERRIDES and v is not None}
        config_mod.apply(cfg, flags)
        if "epochs" not in flags and "epochs" not in from_file:
            raise UsageError("epochs is required (no default)")
        return cfg.validate()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_data(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    try:
        return data.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read {what}: {exc}") from None
    except data.DatasetError as exc:
        raise UsageError(f"{what}: {exc}") from None


def _datasets(cfg):
    """(train, val, test) for a run; val and test may be None."""
    train = _load_data(cfg.train_data, "train_data")
    val = _load_data(cfg.val_data, "val_data") if cfg.val_data else None
    test = _load_data(cfg.test_data, "test_data") if cfg.test_data else None
    if cfg.split:
        train, split_test, split_val = data.split(train, cfg.split, seed=cfg.seed)
        val = val if val is not None else split_val
        test = test if test is not None else split_test
    for name, ds in (("train", train), ("val", val), ("test", test)):
        if ds is not None and ds.n_classes != cfg.model.n_classes:
            raise UsageError(f"{name} data has {ds.n_classes} classes, model expects {cfg.model.n_classes}")
        if ds is not None and len(ds) and ds.image_size < cfg.model.input_size:
            raise UsageError(f"{name} images are {ds.image_size}px, model input is {cfg.model.input_size}px")
    if len(train) == 0:
        raise UsageError("training set is empty")
    return train, val, test


def _results(cfg_hash, seed, history, cm):
    return {"config_hash": cfg_hash, "seed": seed, "epochs": history.epochs if history else [],
            "confusion": cm.tolist(), "accuracy": cm.accuracy(), "tpr": metrics.tpr_per_class(cm)}


def cmd_train(args):
    cfg = run_config(args)
    train, val, test = _datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    if args.resume:
        net, history = training.resume(ckpt, train, cfg.train, val)
    else:
        net = model_mod.build(cfg.model)
        history = training.fit(net, train, cfg.train, val, checkpoint_path=ckpt)
    scored = test if test is not None else (val if val is not None else train)
    acc, cm = metrics.evaluate(net, scored)
    path = os.path.join(cfg.out_dir, f"report.{args.format}")
    metrics.report(_results(cfg.config_hash(), cfg.seed, history, cm), path, args.format)
    print(f"accuracy {acc:.4f}  checkpoint {ckpt}  report {path}")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def cmd_eval(args):
    try:
        ckpt = model_mod.load(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    except model_mod.CheckpointError as exc:
        raise UsageError(f"checkpoint: {exc}") from None
    ds = _load_data(args.data, "data")
    net = ckpt.model
    if ds.n_classes != net.config.n_classes:
        raise UsageError(f"data has {ds.n_classes} classes, checkpoint model has {net.config.n_classes}")
    if len(ds) and ds.image_size < net.config.input_size:
        raise UsageError(f"images are {ds.image_size}px, model input is {net.config.input_size}px")
    acc, cm = metrics.evaluate(net, ds, use_crops=args.crops)
    tpr = metrics.tpr_per_class(cm)
    print(f"accuracy {acc:.4f}")
    print("tpr " + " ".join(f"{ds.class_names[i]}={v:.4f}" for i, v in enumerate(tpr)))
    if args.report:
        seed = net.config.seed
        metrics.report(_results(net.config.config_hash(), seed, None, cm), args.report, args.format)
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck

def _layer_cases(rng):
    """One small instance of every layer kind with a kink-free input."""
    def spread(shape):
        # distinct values well away from zero: no ReLU or max-pool kinks
        x = rng.permutation(np.prod(shape)).reshape(shape).astype(float) / np.prod(shape)
        return (x + 0.1) * rng.choice([-1.0, 1.0], size=shape)

    return [
        ("conv", layers.Conv2d(2, 3, 3, stride=2, pad=1, rng=rng), rng.standard_normal((2, 2, 7, 7))),
        ("relu", layers.ReLU(), spread((2, 3, 4))),
        ("maxpool", layers.MaxPool2d(2, 2), spread((2, 2, 4, 4))),
        ("avgpool", layers.AvgPool2d(2), rng.standard_normal((2, 2, 4, 4))),
        ("global_avgpool", layers.AvgPool2d(None), rng.standard_normal((2, 3, 3, 3))),
        ("flatten", layers.Flatten(), rng.standard_normal((2, 2, 2, 3))),
        ("linear", layers.Linear(5, 4, rng=rng), rng.standard_normal((2, 5))),
        ("dropout", layers.Dropout(0.5, rng), rng.standard_normal((2, 6))),
    ]


def gradcheck_all(arch="mldrnet", depth=4, fusions=FUSION_KINDS, epsilon=1e-5, seed=0,
                  samples_per_tensor=4, input_size=64):
    """Return a list of (label, worst tensor, max relative error)."""
    rng = np.random.default_rng(seed)
    results = []
    for kind, layer, x in _layer_cases(rng):
        rep = layers.grad_check_report(layer, x, epsilon=epsilon, seed=seed)
        worst = max(rep, key=rep.get)
        results.append((f"layer {kind}", worst, rep[worst]))
    images = rng.uniform(0, 1, (2, 3, input_size, input_size))
    labels = np.array([1, 6])
    for kind in fusions if arch == "mldrnet" else ("-",):
        cfg = model_mod.desk_config(arch=arch, depth=depth, fusion=kind if arch == "mldrnet" else "mean",
                                    seed=seed, input_size=input_size)
        net = model_mod.build(cfg)
        rep = layers.grad_check_report(net, images, labels, epsilon=epsilon,
                                       max_per_tensor=samples_per_tensor, seed=seed)
        worst = max(rep, key=rep.get)
        results.append((f"model {arch} depth={depth} fusion={kind}", worst, rep[worst]))
    return results


def cmd_gradcheck(args):
    if not 1e-7 <= args.epsilon <= 1e-3:
        raise UsageError(f"epsilon must lie in [1e-7, 1e-3], got {args.epsilon}")
    fusions = tuple(args.fusions.split(","))
    for f in fusions:
        if f not in FUSION_KINDS:
            raise UsageError(f"unknown fusion {f!r}; choose from {', '.join(FUSION_KINDS)}")
    try:
        model_mod.mldrnet_trace(model_mod.desk_config(depth=args.depth, input_size=args.input_size))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    start = time.perf_counter()
    results = gradcheck_all(args.arch, args.depth, fusions, args.epsilon, args.seed,
                            args.samples_per_tensor, args.input_size)
    bad = []
    for label, tensor, err in results:
        ok = err < GRADCHECK_TOLERANCE
        print(f"{'ok  ' if ok else 'FAIL'} {label:45s} max_rel_err {err:.3e}  ({tensor})")
        if not ok:
            bad.append(f"{label}: {tensor}")
    print(f"{len(results) - len(bad)}/{len(results)} within {GRADCHECK_TOLERANCE:g} "
          f"in {time.perf_counter() - start:.1f}s")
    if bad:
        print("offending: " + "; ".join(bad))
        return EXIT_FAILED
    return EXIT_OK


# ------------------------------------------------------------------ ablate

ABLATE_COLUMNS = ["axis", "variant", "seed", "config_hash", "epochs", "final_train_loss",
                  "train_acc", "test_acc", "delta"]


def run_variant(model_cfg, train_cfg, train_set, test_set):
    """Train one configuration from scratch and score it on ``test_set``."""
    net = model_mod.build(model_cfg)
    history = training.fit(net, train_set, train_cfg)
    acc, _ = metrics.evaluate(net, test_set)
    return {"epochs": train_cfg.epochs, "final_train_loss": history.final_loss,
            "train_acc": history.epochs[-1]["train_acc"], "test_acc": acc}


def ablation_variants(axis, base: config_mod.RunConfig, depths, fusions, noise_rate):
    """(variant label, RunConfig, label-noise rate) for each point on ``axis``."""
    out = []
    if axis == "depth":
        for d in depths:
            cfg = dataclasses.replace(base, model=dataclasses.replace(
                base.model, depth=d, trunk_channels=model_mod.DEFAULT_TRUNK[:d]))
            out.append((f"depth={d}", cfg, 0.0))
    elif axis == "fusion":
        for f in fusions:
            cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, fusion=f))
            out.append((f"fusion={f}", cfg, noise_rate))
    elif axis == "noise":
        out = [("clean", base, 0.0), (f"noise={noise_rate:g}", base, noise_rate)]
    else:
        raise UsageError(f"unknown ablation axis {axis!r}")
    return out


def run_ablation(axis, base, train_set, test_set, depths=(2, 3, 4), fusions=FUSION_KINDS, noise_rate=0.25):
    """Rows of ABLATE_COLUMNS; ``delta`` is test accuracy relative to the first variant."""
    variants = ablation_variants(axis, base, depths, fusions, noise_rate)
    for _, cfg, _ in variants:
        cfg.validate()
    rows = []
    for label, cfg, rate in variants:
        noisy = data.inject_label_noise(train_set, rate, seed=cfg.seed) if rate else train_set
        res = run_variant(cfg.model, cfg.train, noisy, test_set)
        row = {"axis": axis, "variant": label, "seed": cfg.seed, "config_hash": cfg.config_hash(), **res}
        row["delta"] = row["test_acc"] - (rows[0]["test_acc"] if rows else row["test_acc"])
        rows.append(row)
        log.info("%s  test_acc %.4f", label, row["test_acc"])
    return rows


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_ablate(args):
    base = run_config(args)
    depths = tuple(int(d) for d in args.depths.split(","))
    fusions = tuple(args.fusions.split(","))
    if not 0.0 <= args.noise_rate < 1.0:
        raise UsageError(f"noise rate must be in [0, 1), got {args.noise_rate}")
    try:
        for _, cfg, _ in ablation_variants(args.axis, base, depths, fusions, args.noise_rate):
            cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not base.split and not base.test_data:
        base.split = (0.8, 0.15, 0.05)
    train, _, test = _datasets(base)
    if test is None or len(test) == 0:
        raise UsageError("ablation needs a non-empty test set")
    rows = run_ablation(args.axis, base, train, test, depths, fusions, args.noise_rate)
    os.makedirs(base.out_dir, exist_ok=True)
    path = os.path.join(base.out_dir, f"ablate_{args.axis}.csv")
    write_rows(rows, path)
    for row in rows:
        print(f"{row['variant']:14s} test_acc {row['test_acc']:.4f}  delta {row['delta']:+.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

_OVERRIDES = set(config_mod.MODEL_KEYS) | set(config_mod.TRAIN_KEYS) | {
    "seed", "train_data", "val_data", "test_data", "split", "out_dir"}


def _add_run_options(p):
    p.add_argument("--config", help="key=value file; explicit flags override it")
    for key in sorted(_OVERRIDES):
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="mldrnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cue-mix", default="0.3333333333333333,0.3333333333333333,0.3333333333333334")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blank-cues", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint and report")
    _add_run_options(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/model.ckpt")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--crops", action="store_true", help="average softmax over five crops")
    p.add_argument("--report")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and fusion")
    p.add_argument("--arch", choices=model_mod.ARCHS, default="mldrnet")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--fusions", default=",".join(FUSION_KINDS))
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--samples-per-tensor", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train variants along one axis and tabulate test accuracy")
    _add_run_options(p)
    p.add_argument("--axis", choices=("depth", "fusion", "noise"), required=True)
    p.add_argument("--depths", default="2,3,4")
    p.add_argument("--fusions", default=",".join(FUSION_KINDS))
    p.add_argument("--noise-rate", type=float, default=0.25)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
