"""Command-line entry point: ``scse {gradcheck,paramcount,generate-data,train,eval,ablate}``.

Exit codes: 0 success, 1 check/cell/eval failure, 2 usage or config error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .ablation import run_grid
from .config import RunConfig, load_run_config, override, parse_run_config
from .data import (
    TensorFileError,
    atomic_write_bytes,
    generate_synthetic_dataset,
    load_dataset,
    read_tensor_file,
    save_dataset,
    write_tensor_file,
)
from .gradcheck import CLI_BLOCKS, gradcheck_block, gradcheck_network, group_errors
from .metrics import DiceReport
from .se import SEVariant, network_se_overhead, se_param_count
from .tensor import ShapeError
from .training import NonFiniteLossError, evaluate, log_to_csv, train_loop
from .zoo import ARCH_KINDS, PRESETS, ConfigError, build_network, count_parameters

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("scse")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else parse_run_config({})
    updates = {
        "arch.kind": getattr(args, "arch", None),
        "arch.preset": getattr(args, "preset", None),
        "arch.se_variant": getattr(args, "se", None),
        "arch.se_reduction": getattr(args, "reduction", None),
        "train.seed": getattr(args, "seed", None),
        "train.max_epochs": getattr(args, "max_epochs", None),
        "output.dir": getattr(args, "output", None),
        "data.dataset_dir": getattr(args, "dataset_dir", None),
    }
    return override(cfg, updates)


def get_dataset(cfg: RunConfig):
    """Load the dataset from ``data.dataset_dir`` or generate it (saving it there if set)."""
    cfg.check_consistency()
    d = cfg.data.dataset_dir
    if d and all((Path(d) / f"{s}.setf").exists() for s in ("train", "val", "test")):
        return load_dataset(d)
    ds = generate_synthetic_dataset(cfg.data.to_spec())
    if d:
        save_dataset(d, ds)
    return ds


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.block == "net":
        eps = args.eps if args.eps is not None else 1e-4
        result = gradcheck_network(args.arch, args.variant, seed=args.seed, eps=eps, fraction=args.fraction)
        groups = group_errors(result)
    else:
        eps = args.eps if args.eps is not None else 1e-5
        result = gradcheck_block(args.block, seed=args.seed, eps=eps)
        groups = result.errors
    width = max(len(k) for k in groups)
    for name, err in groups.items():
        print(f"{name.ljust(width)}  max rel err {err:.3e}")
    verdict = "PASS" if result.passed else "FAIL"
    print(f"{verdict} {result.name}: max relative error {result.max_error:.3e} (tolerance {result.tolerance:.0e})")
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_paramcount(args) -> int:
    cfg = _load_config(args)
    spec = cfg.arch.to_spec()
    vanilla = count_parameters(build_network(spec.with_variant("none"), 0))
    per_block = [
        (site, c, se_param_count(spec.se_variant, c, spec.se_reduction))
        for site, c in zip(_site_names(), spec.se_block_channels())
    ]
    overhead = network_se_overhead(spec.se_block_channels(), spec.se_variant, spec.se_reduction)
    total = count_parameters(build_network(spec, 0))
    if total - vanilla != overhead:
        print(f"internal inconsistency: network difference {total - vanilla} != formula {overhead}", file=sys.stderr)
        return EXIT_FAIL
    pct = 100.0 * overhead / vanilla
    print(f"architecture     {spec.arch_kind} (preset {spec.preset}), SE variant {spec.se_variant.value}, r={spec.se_reduction}")
    print(f"vanilla params   {vanilla}")
    print("site,channels,se_params")
    for site, c, n in per_block:
        print(f"{site},{c},{n}")
    print(f"se overhead      {overhead}")
    print(f"total params     {total}")
    print(f"overhead pct     {pct:.3f}%")
    return EXIT_OK


def _site_names() -> List[str]:
    return [f"enc{i}" for i in range(4)] + [f"dec{i}" for i in reversed(range(4))]


def cmd_generate_data(args) -> int:
    cfg = _load_config(args)
    target = args.dataset_dir or cfg.data.dataset_dir
    if not target:
        print("generate-data needs --dataset-dir or data.dataset_dir in the config", file=sys.stderr)
        return EXIT_USAGE
    save_dataset(target, generate_synthetic_dataset(cfg.data.to_spec()))
    print(f"wrote train/val/test splits to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output.dir)
    spec = cfg.arch.to_spec()
    ds = get_dataset(cfg)
    result = train_loop(spec, ds, cfg.train.to_config(), cfg.output.exclude_background)
    write_tensor_file(out / "checkpoint.setf", result.network.state_dict())
    _write_text(out / "log.csv", log_to_csv(result.log))
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.train.seed,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.log),
        "arch": spec.to_dict(),
        "class_weights": [float(w) for w in result.class_weights],
        "config": cfg.model_dump(mode="json"),
        "scse_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    best = result.log[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val loss {best.val_loss:.4f}, val dice {best.val_dice:.4f}")
    print(f"wrote {out / 'checkpoint.setf'}, {out / 'log.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    spec = cfg.arch.to_spec()
    net = build_network(spec, cfg.train.seed)
    try:
        net.load_state_dict(read_tensor_file(args.checkpoint))
    except (ShapeError, TensorFileError) as exc:
        print(f"incompatible checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ds = get_dataset(cfg)
    report = evaluate(net, ds.split(args.split), cfg.output.exclude_background)
    out = Path(args.output or cfg.output.dir)
    _write_text(
        out / f"eval_{args.split}_summary.csv",
        f"split,mean,std,cell\n{args.split},{report.mean!r},{report.std!r},{report.cell()}\n",
    )
    _write_text(out / f"eval_{args.split}_per_class.csv", report.to_long_csv())
    _write_text(out / f"eval_{args.split}_by_sample.csv", report.to_csv())
    print(f"{args.split} dice {report.cell()}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    archs = [a.strip() for a in args.archs.split(",") if a.strip()]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [a for a in archs if a not in ARCH_KINDS]
    if bad:
        raise ConfigError(f"unknown architecture {bad[0]!r}; expected one of {ARCH_KINDS}")
    for v in variants:
        try:
            SEVariant.parse(v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    ds = get_dataset(cfg)
    report = run_grid(cfg, ds, archs, variants)
    out = Path(cfg.output.dir)
    _write_text(out / "grid.csv", report.to_csv())
    _write_text(out / "table.txt", report.render_table())
    for (arch, variant), cell in report.cells.items():
        cell_dir = out / "cells" / f"{arch}_{variant}"
        if cell.ok:
            _write_text(cell_dir / "log.csv", cell.log_csv)
            _write_text(cell_dir / "per_class.csv", DiceReport(cell.per_sample, cfg.output.exclude_background).to_csv())
        else:
            _write_text(cell_dir / "error.txt", cell.error + "\n")
    print(report.render_table(), end="")
    print(f"wrote {out / 'grid.csv'} and {out / 'table.txt'}")
    return EXIT_FAIL if report.failed else EXIT_OK


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scse", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"scse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check of one block")
    g.add_argument("--block", required=True, choices=CLI_BLOCKS)
    g.add_argument("--eps", type=float, default=None, help="initial step (default 1e-5 blocks, 1e-4 net)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--arch", default="unet", choices=ARCH_KINDS, help="architecture for --block net")
    g.add_argument("--variant", default="scse", choices=[v.value for v in SEVariant], help="SE variant for --block net")
    g.add_argument("--fraction", type=float, default=0.01, help="parameter fraction sampled for --block net")
    g.set_defaults(func=cmd_gradcheck)

    def add_config_flags(p, arch=True):
        p.add_argument("--config", help="run config (YAML or JSON)")
        if arch:
            p.add_argument("--arch", choices=ARCH_KINDS)
            p.add_argument("--preset", choices=sorted(PRESETS))
            p.add_argument("--se", choices=[v.value for v in SEVariant])
            p.add_argument("--reduction", type=int)

    pc = sub.add_parser("paramcount", help="parameter and SE-overhead accounting")
    add_config_flags(pc)
    pc.set_defaults(func=cmd_paramcount)

    gd = sub.add_parser("generate-data", help="write the synthetic dataset splits")
    add_config_flags(gd, arch=False)
    gd.add_argument("--dataset-dir")
    gd.set_defaults(func=cmd_generate_data)

    tr = sub.add_parser("train", help="train one network")
    add_config_flags(tr)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--output")
    tr.add_argument("--dataset-dir")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Dice evaluation of a checkpoint")
    add_config_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--seed", type=int)
    ev.add_argument("--output")
    ev.add_argument("--dataset-dir")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train and evaluate the architecture x variant grid")
    add_config_flags(ab, arch=False)
    ab.add_argument("--archs", default="unet,sdnet,densenet")
    ab.add_argument("--variants", default="none,cse,sse,scse")
    ab.add_argument("--seed", type=int, help="master seed for per-cell seeds")
    ab.add_argument("--max-epochs", type=int)
    ab.add_argument("--output")
    ab.add_argument("--dataset-dir")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
