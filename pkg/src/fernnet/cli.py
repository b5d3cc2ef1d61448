"""Command line entry point: ``fernnet {train,eval,report,gradcheck,synth}``.

Exit codes: 0 success, 1 verification failure (or diverged training),
2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from . import costmodel, kernels
from .config import load_config
from .errors import ConfigError, DataError, FernNetError, FormatError
from .io import load_checkpoint, load_dataset, load_idx_pair, save_checkpoint, save_dataset, \
    synthesize
from .train import DivergenceError, build_model, evaluate, run_gradcheck, tolerance_for, \
    train_epochs, gradcheck_kinds

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
WEIGHT_MODES = ("literal_l2", "normalized_proximity", "mean_l1")


class UsageError(FernNetError):
    pass


def _model_overrides(args) -> dict:
    out = {}
    if getattr(args, "backbone", None):
        out["backbone"] = args.backbone
    if getattr(args, "weight_mode", None):
        out["weight_mode"] = args.weight_mode
    if getattr(args, "dtype", None):
        out["dtype"] = args.dtype
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def _load_configs(args):
    model_cfg, train_cfg = load_config(args.config)
    model_cfg = model_cfg.replace(**_model_overrides(args))
    train_changes = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "optimizer")
                     if getattr(args, k, None) is not None}
    if args.seed is not None:
        train_changes["seed"] = args.seed
    return model_cfg, train_cfg.replace(**train_changes)


def _resolve_data(data: str, test_data: Optional[str]):
    path = Path(data)
    if not path.exists():
        raise UsageError(f"dataset path does not exist: {path}")
    if path.is_dir():
        train_path, default_test = path / "train.fds", path / "test.fds"
        if not train_path.exists():
            raise UsageError(f"dataset directory has no train.fds: {path}")
    else:
        train_path, default_test = path, None
    test_path = Path(test_data) if test_data else default_test
    if test_path is not None and not test_path.exists():
        if test_data:
            raise UsageError(f"test dataset path does not exist: {test_path}")
        test_path = None
    return load_dataset(train_path), (load_dataset(test_path) if test_path else None)


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    train_ds, test_ds = _resolve_data(args.data, args.test_data)
    model = build_model(model_cfg)

    def emit(rec):
        print(f"epoch={rec.epoch} train_loss={rec.train_loss:.6f} "
              f"test_acc={rec.test_accuracy:.4f} wall_seconds={rec.wall_seconds:.2f}", flush=True)

    try:
        train_epochs(model, train_ds, train_cfg, test_ds, on_epoch=emit)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(args.out, model, train_cfg)
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    test_ds, other = _resolve_data(args.data, None)
    ds = other if other is not None else test_ds
    print(f"accuracy={evaluate(model, ds):.4f} samples={len(ds)}")
    return EXIT_OK


def _report_entry(label: str, model, table, input_shape) -> dict:
    ops = costmodel.count_ops(model, input_shape)
    entry = {
        "name": label,
        "backbone": model.config.backbone,
        "params": costmodel.count_params(model),
        "input_shape": list(input_shape),
        "layers": [{"name": n, "output_shape": list(s), **c.as_dict()}
                   for n, c, s in ops.per_layer],
        "total_ops": ops.total.as_dict(),
        "energy_joules": costmodel.estimate_energy(ops.total, table),
    }
    if model.config.backbone == "fern":
        frozen = build_model(model.config.replace(thresholds_trainable=False))
        trainable = build_model(model.config.replace(thresholds_trainable=True))
        entry["params_thresholds_trainable"] = costmodel.count_params(trainable)
        entry["params_thresholds_frozen"] = costmodel.count_params(frozen)
    return entry


def _format_report(entries: list, table_name: str) -> str:
    lines = []
    kinds = costmodel.OP_KINDS
    for e in entries:
        lines.append(f"model: {e['name']} (backbone {e['backbone']}, input "
                     f"{'x'.join(map(str, e['input_shape']))})")
        lines.append(f"  params: {e['params']}")
        if "params_thresholds_frozen" in e:
            lines.append(f"  params (thresholds trainable): {e['params_thresholds_trainable']}")
            lines.append(f"  params (thresholds frozen): {e['params_thresholds_frozen']}")
        lines.append("  " + "layer".ljust(12) + "".join(k.rjust(16) for k in kinds))
        for layer in e["layers"]:
            lines.append("  " + layer["name"].ljust(12)
                         + "".join(str(layer[k]).rjust(16) for k in kinds))
        lines.append("  " + "total".ljust(12)
                     + "".join(str(e["total_ops"][k]).rjust(16) for k in kinds))
        lines.append(f"  energy ({table_name}): {e['energy_joules'] * 1e6:.4f} uJ")
    if len(entries) > 1:
        ordered = sorted(entries, key=lambda e: e["energy_joules"])
        lines.append("energy ordering: " + " < ".join(
            f"{e['name']} ({e['energy_joules'] * 1e6:.3f} uJ)" for e in ordered))
    return "\n".join(lines)


def cmd_report(args) -> int:
    if not args.config and not args.checkpoint:
        raise UsageError("report needs at least one --config or --checkpoint")
    table = costmodel.load_energy_table(args.energy_table)
    entries = []
    for source in args.config or []:
        model_cfg, _ = load_config(source)
        model_cfg = model_cfg.replace(**_model_overrides(args))
        shape = tuple(args.input_shape) if args.input_shape else model_cfg.input_shape
        entries.append(_report_entry(Path(source).stem, build_model(model_cfg), table, shape))
    for source in args.checkpoint or []:
        model, _ = load_checkpoint(source)
        shape = tuple(args.input_shape) if args.input_shape else model.config.input_shape
        entries.append(_report_entry(Path(source).stem, model, table, shape))
    if args.json:
        payload = {"energy_table": table.name, "models": entries}
        if len(entries) > 1:
            payload["energy_ordering"] = [e["name"] for e in
                                          sorted(entries, key=lambda e: e["energy_joules"])]
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(_format_report(entries, table.name))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be at least 1 (got {args.trials})")
    if args.dtype == "f32":
        raise UsageError("gradient checking runs in f64 only")
    modes, depth = list(WEIGHT_MODES), 3
    if args.config:
        model_cfg, _ = load_config(args.config)
        modes, depth = [model_cfg.fern.weight_mode.value], model_cfg.fern.depth
    if args.weight_mode:
        modes = [args.weight_mode]
    results = run_gradcheck(args.trials, args.margin, args.epsilon, args.seed or 0,
                            gradcheck_kinds(modes, depth))
    failed = False
    for kind, err in results.items():
        tol = tolerance_for(kind)
        ok = err < tol
        failed |= not ok
        print(f"{kind:28s} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if ok else 'FAIL'}")
    if args.margin <= 0 and failed:
        print("note: margin 0 lets samples sit on index boundaries, where the layer is "
              "discontinuous; failures there are expected")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise UsageError("--idx-images and --idx-labels go together")
        ds = load_idx_pair(args.idx_images, args.idx_labels, tuple(args.classes))
        save_dataset(out / "train.fds", ds)
        print(f"wrote {out / 'train.fds'} ({len(ds)} samples)")
        return EXIT_OK
    if args.n_train < 2 or args.n_test < 2:
        raise UsageError("--n-train and --n-test must be at least 2")
    seed = args.seed or 0
    for name, n, s in (("train", args.n_train, seed), ("test", args.n_test, seed + 1)):
        save_dataset(out / f"{name}.fds", synthesize(n, s, size=args.size))
        print(f"wrote {out / f'{name}.fds'} ({n} samples)")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fernnet", description=__doc__.splitlines()[0])
    parser.add_argument("--backend", choices=kernels.available(),
                        help="fern kernel backend (default: compiled if available)")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p, dtype=True):
        p.add_argument("--seed", type=int)
        if dtype:
            p.add_argument("--dtype", choices=("f32", "f64"))
        p.add_argument("--weight-mode", choices=WEIGHT_MODES)
        p.add_argument("--backbone", choices=("fern", "conv", "binconv"))

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", default="fern", help="config file or fern/conv/binconv")
    p.add_argument("--data", required=True, help="directory with train.fds/test.fds, or a file")
    p.add_argument("--test-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter, op-count and energy report")
    p.add_argument("--config", action="append", help="repeatable")
    p.add_argument("--checkpoint", action="append", help="repeatable")
    p.add_argument("--energy-table", default="default")
    p.add_argument("--input-shape", type=int, nargs=3, metavar=("C", "H", "W"))
    p.add_argument("--json", action="store_true", help="machine-readable output")
    model_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--margin", type=float, default=1e-3)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--config", help="take fern depth and weight mode from this config "
                                    "(default: depth 3, all three weight modes)")
    model_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write synthetic (or IDX-derived) datasets")
    p.add_argument("--n-train", type=int, default=4096)
    p.add_argument("--n-test", type=int, default=1024)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--classes", type=int, nargs=2, default=(0, 1))
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend:
        kernels.set_backend(args.backend)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FernNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
