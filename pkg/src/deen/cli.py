"""Command-line entry point: ``deen generate | train | eval | analyze``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .backbone import DeenNet, load_checkpoint
from .config import ABLATIONS, DIRECTION_CHOICES, RunConfig, inputs_hash, load_config, parse_assignment, write_run_record
from .errors import ConfigError, DataError, DeenError
from .evalproto import (
    TrialConfig,
    distance_stats,
    extract_features,
    llcm_trial_eval,
    write_distance_stats,
    write_results,
)
from .synthdata import MANIFEST, dataset_stats, generate_dataset, read_dataset, write_dataset
from .training import fit

log = logging.getLogger("deen")


def _overrides(args: argparse.Namespace) -> List[tuple]:
    """Translate dedicated flags into config keys; ``--set`` pairs come last and win."""
    out: List[tuple] = []
    if getattr(args, "ablate", None):
        out.append(("ablation", args.ablate))
    if getattr(args, "seed", None) is not None:
        out.append(("seed", args.seed))
    if getattr(args, "epochs", None) is not None:
        out.append(("train.epochs", args.epochs))
    if getattr(args, "dee_stage", None) is not None:
        out.append(("model.dee_stage", args.dee_stage))
    if getattr(args, "branches", None) is not None:
        out.append(("model.dee_branches", args.branches))
    if getattr(args, "drop_stage4", False):
        out.append(("model.drop_stage4", True))
    if getattr(args, "no_dee", False):
        out.append(("model.dee_stage", None))
    if getattr(args, "no_cpm", False):
        out.append(("loss.lambda1", 0.0))
    if getattr(args, "no_ort", False):
        out.append(("loss.lambda2", 0.0))
    if getattr(args, "no_mfa", False):
        out.append(("model.mfa_stages", []))
    if getattr(args, "trials", None) is not None:
        out.append(("eval.trials", args.trials))
    if getattr(args, "direction", None) is not None:
        out.append(("eval.direction", args.direction))
    for item in getattr(args, "set", None) or []:
        out.append(parse_assignment(item))
    return out


def _config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _dataset_files(root: Path) -> List[Path]:
    if not (root / MANIFEST).exists():
        raise DataError(f"{root} holds no dataset (missing {MANIFEST}); run 'deen generate' first")
    return [root / MANIFEST] + sorted(p for p in root.rglob("*.ndts"))


# ------------------------------------------------------------------ commands


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cfg.data.seed = cfg.seed if args.seed is not None else cfg.data.seed
    cfg.data.validate()
    ds = generate_dataset(cfg.data)
    out = Path(args.out)
    write_dataset(ds, out)
    stats = {"train": dataset_stats(ds.train)["total"], "test": dataset_stats(ds.test)["total"]}
    print(json.dumps({"out": str(out), "records": stats, "train_ids": len(ds.train_ids), "test_ids": len(ds.test_ids)}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    data_root = Path(args.data)
    files = _dataset_files(data_root)
    ds = read_dataset(data_root)
    # geometry and identity count follow the dataset on disk
    cfg.data = ds.config
    cfg.model.input_hw = tuple(ds.config.image_hw)
    cfg.model.in_channels = ds.config.channels
    cfg.model.num_identities = len(ds.train_ids)
    cfg.resolve()
    run_dir = Path(args.run_dir)
    text = cfg.dumps()
    write_run_record(run_dir, cfg, "train", {"dataset": inputs_hash(text, files, data_root)})
    model = DeenNet(cfg.model, seed=cfg.seed)
    result = fit(model, ds.train_index, cfg.train, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "steps": result.steps, "checkpoint": str(result.checkpoints[-1])}))
    return 0


def _load_model(path: str) -> DeenNet:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint {p} not found")
    return load_checkpoint(p)


def _pool(args: argparse.Namespace):
    ds = read_dataset(Path(args.data))
    pool = ds.test if args.split == "test" else ds.train
    if not pool:
        raise DataError(f"the {args.split} pool of {args.data} is empty")
    return pool


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cfg.eval.seed = cfg.seed if cfg.eval.seed is None else cfg.eval.seed
    cfg.eval.validate()
    model = _load_model(args.checkpoint)
    files = _dataset_files(Path(args.data))
    pool = _pool(args)
    table = extract_features(model, pool)
    reports = [
        llcm_trial_eval(table, TrialConfig(d, cfg.eval.trials, cfg.eval.seed)) for d in cfg.eval.directions
    ]
    out = Path(args.out)
    write_run_record(
        out, cfg, "eval",
        {"dataset": inputs_hash(cfg.dumps(), files, Path(args.data)), "checkpoint": inputs_hash("", [Path(args.checkpoint)], Path(args.checkpoint).parent)},
    )
    write_results(reports, out)
    print(json.dumps({r.direction: r.mean.summary() for r in reports}, sort_keys=True))
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    model = _load_model(args.checkpoint)
    pool = _pool(args)
    table = extract_features(model, pool)
    stats = distance_stats(table.features, table.identity, table.modality)
    write_distance_stats(stats, Path(args.out))
    print(json.dumps(stats.summary(), sort_keys=True))
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")

    g = sub.add_parser("generate", help="write a synthetic two-modality dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--run-dir", required=True, help="where config, loss CSV and checkpoints go")
    t.add_argument("--ablate", choices=ABLATIONS, help="component preset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--dee-stage", type=int)
    t.add_argument("--branches", type=int, help="number of DEE branches")
    t.add_argument("--drop-stage4", action="store_true", help="four-stage backbone")
    t.add_argument("--no-dee", action="store_true")
    t.add_argument("--no-cpm", action="store_true")
    t.add_argument("--no-ort", action="store_true")
    t.add_argument("--no-mfa", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics with repeated gallery sampling")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--trials", type=int)
    e.add_argument("--direction", choices=DIRECTION_CHOICES)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="cross-modality intra/inter distance samples")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", choices=("test", "train"), default="test")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DeenError as exc:
        print(f"deen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"deen {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
