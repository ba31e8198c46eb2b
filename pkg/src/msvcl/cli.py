"""Command-line entry point.

Run directory layout (``$MSVCL_RUN_ROOT/<run_id>``, root defaults to ``./runs``)::

    configs/<hash>.yaml      config snapshot, written before any compute
    data/                    rendered dataset + manifest.json
    checkpoints/             warm-start and pretrained encoders (+ loss curves)
    models/                  fine-tuned heads
    cells/                   one JSON result per experiment cell
    predictions/             per-sample prediction JSON
    reports/                 Markdown/JSON tables, curves and plots
    logs/                    one log file per command

Exit codes: 0 success, 2 configuration error, 3 missing input artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import PRETRAIN_SOURCES, STRATEGIES, TASKS, ConfigError, config_hash, dump_config, load_config

log = logging.getLogger("msvcl")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


class MissingArtifact(RuntimeError):
    pass


def run_dir_for(cfg: dict[str, Any]) -> Path:
    root = Path(os.environ.get("MSVCL_RUN_ROOT", "runs"))
    return root / str(cfg["run_id"])


def _prepare_run(cfg: dict[str, Any], command: str) -> Path:
    run_dir = run_dir_for(cfg)
    snap = run_dir / "configs" / f"{config_hash(cfg)}.yaml"
    if not snap.exists():
        snap.parent.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, snap)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "logs" / f"{command}.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return run_dir


def _manifest(run_dir: Path):
    from .data.manifest import DatasetManifest

    path = run_dir / "data" / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no dataset at {path}; run `msvcl gen-data` first")
    return DatasetManifest.load_file(path)


def _experiment(cfg, run_dir):
    from .evaluation.runner import Experiment

    return Experiment(cfg, run_dir, _manifest(run_dir))


def _seeds(args, cfg) -> list[int]:
    return [int(s) for s in args.seeds] if args.seeds else [int(s) for s in cfg["eval"]["seeds"]]


def cmd_gen_data(args, cfg) -> int:
    from .config import config_hash as chash
    from .data.manifest import DatasetManifest, build_dataset, expected_counts
    from .styles.parametric import style_table

    run_dir = _prepare_run(cfg, "gen-data")
    path = run_dir / "data" / "manifest.json"
    want = chash({"data": cfg["data"], "seed": cfg["seed"]})
    if path.exists():
        existing = DatasetManifest.load_file(path)
        if existing.config_hash == want:
            print(f"dataset up to date: {path}")
            return EXIT_OK
        raise ConfigError(f"{run_dir} already holds a dataset built from a different data config "
                          f"({existing.config_hash} != {want}); use a new run_id")
    manifest = build_dataset(cfg["data"], style_table(cfg["styles"]["table"]), int(cfg["seed"]), run_dir / "data")
    manifest.validate(expected_counts(cfg["data"]))
    print(f"wrote {len(manifest)} samples to {run_dir / 'data'}")
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    strategy = args.strategy or cfg["pairing"]["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    run_dir = _prepare_run(cfg, "pretrain")
    exp = _experiment(cfg, run_dir)
    for seed in _seeds(args, cfg) if args.seeds else [int(cfg["seed"])]:
        path = exp.pretrained(strategy, seed, resume=args.resume)
        print(path)
    return EXIT_OK


def cmd_finetune(args, cfg) -> int:
    from .data.io import atomic_write_json
    from .evaluation.metrics import accuracy, average_precision
    from .learning.checkpoint import save_checkpoint
    from .tasks.classify import MissingLabelsError, classification_inputs, train_classifier
    from .tasks.detection import detect, finetune_detector
    from .tasks.matching import breast_pairs, build_candidates, train_matcher

    run_dir = _prepare_run(cfg, "finetune")
    exp = _experiment(cfg, run_dir)
    seed = int(args.seed if args.seed is not None else cfg["seed"])
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise MissingArtifact(f"checkpoint not found: {args.checkpoint}")
        backbone, tag = args.checkpoint, Path(args.checkpoint).stem
    else:
        source = args.source or "random"
        if source not in PRETRAIN_SOURCES:
            raise ConfigError(f"unknown pretrain source {source!r}; valid: {', '.join(PRETRAIN_SOURCES)}")
        backbone, tag = exp.backbone_source(source, seed), source
    domains = args.domains or list(exp.seen)
    unlabeled = sorted(set(domains) & set(cfg["data"].get("birads_unavailable", ())))
    if args.task == "birads" and unlabeled:
        raise MissingLabelsError(f"domains {unlabeled} carry no BI-RADS labels")
    train = exp.samples("train", domains, 1.0, seed)
    val = exp.samples("val", [d for d in domains if d in exp.seen]) or exp.samples("test", domains)
    if not train:
        raise MissingArtifact(f"no labeled train samples for domains {domains}")
    task = args.task
    key = config_hash({"cfg": cfg["tasks"], "task": task, "tag": tag, "seed": seed, "domains": domains})
    model_path = run_dir / "models" / f"finetune_{task}_{tag}_s{seed}_{key}.pt"
    metrics_path = run_dir / "reports" / f"finetune_{task}_{tag}_s{seed}.json"
    if model_path.exists() and metrics_path.exists():
        print(model_path)
        return EXIT_OK
    if task == "detection":
        model = finetune_detector(backbone, train, cfg["tasks"]["detection"], exp.enc_cfg, seed=seed)
        metric = average_precision([detect(model, s) for s in val], [s.annotations for s in val],
                                   float(cfg["eval"]["iou"]), cfg["eval"]["interpolation"])
        name = "val_map"
    elif task == "matching":
        import numpy as np

        mcfg = cfg["tasks"]["matching"]
        rng = np.random.default_rng([seed, 811])
        cands = [c for cc, mlo in breast_pairs(train) for c in build_candidates(cc, mlo, mcfg, rng)]
        model = train_matcher(cands, backbone, mcfg, exp.enc_cfg, seed=seed)
        vc = [c for cc, mlo in breast_pairs(val) for c in build_candidates(cc, mlo, mcfg, rng)]
        d = model.distances([(c.roi_cc, c.roi_mlo) for c in vc])
        thr = float(mcfg["accept_fraction"]) * model.margin
        metric = accuracy([bool(x < thr) for x in d], [bool(c.y) for c in vc]) if vc else float("nan")
        name = "val_pair_acc"
    else:
        model = train_classifier(backbone, task, train, cfg["tasks"]["classify"], exp.enc_cfg, seed=seed)
        x, labels = classification_inputs(task, val, cfg["tasks"]["classify"])
        keep = [i for i, lab in enumerate(labels) if lab is not None]
        metric = accuracy([model.predict(x[keep])[k] for k in range(len(keep))], [labels[i] for i in keep]) \
            if keep else float("nan")
        name = "val_acc"
    save_checkpoint(model_path, task, {"state": model.state_dict(), "settings": model.settings,
                                       "history": model.history, "source": tag}, key)
    atomic_write_json({"task": task, "source": tag, "seed": seed, "domains": domains, name: metric,
                       "model": str(model_path), "history": model.history}, metrics_path)
    print(f"{model_path}\n{name} = {metric:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    from .evaluation.runner import ExperimentGrid, write_grid_report

    run_dir = _prepare_run(cfg, "evaluate")
    exp = _experiment(cfg, run_dir)
    source = args.source or cfg["pairing"]["strategy"]
    tasks = args.tasks or list(TASKS)
    seeds = _seeds(args, cfg)
    grid = ExperimentGrid({"source": [source], "task": tasks, "fraction": [1.0]}, seeds)
    for task in tasks:
        for seed in seeds:
            grid.cells.append(exp.cell(task, source, seed, predictions_dir=run_dir / "predictions"))
    paths = write_grid_report(grid, run_dir / "reports", f"evaluate_{source}")
    print("\n".join(map(str, paths)))
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .evaluation.runner import run_ablation, write_grid_report

    run_dir = _prepare_run(cfg, "ablate")
    exp = _experiment(cfg, run_dir)
    grid = run_ablation(exp, args.sources or None, _seeds(args, cfg), args.tasks or None)
    paths = write_grid_report(grid, run_dir / "reports", "ablation")
    print("\n".join(map(str, paths)))
    return EXIT_OK


def cmd_hungry(args, cfg) -> int:
    from .data.io import atomic_write_json
    from .evaluation.runner import plot_curves, run_data_hungry

    run_dir = _prepare_run(cfg, "hungry")
    exp = _experiment(cfg, run_dir)
    fractions = [float(f) for f in args.fractions] if args.fractions else None
    curves = run_data_hungry(exp, fractions, args.methods or None, _seeds(args, cfg))
    out = run_dir / "reports" / "data_hungry.json"
    atomic_write_json(curves, out)
    png = plot_curves(curves, run_dir / "reports" / "data_hungry.png")
    print(f"{out}\n{png}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    from .evaluation.runner import ExperimentGrid, write_grid_report

    run_dir = _prepare_run(cfg, "report")
    cells = []
    for path in sorted((run_dir / "cells").glob("*.json")):
        with open(path) as fh:
            cells.append(json.load(fh))
    if not cells:
        raise MissingArtifact(f"no finished cells under {run_dir / 'cells'}")
    cells.sort(key=lambda c: (c["task"], c["source"], c["fraction"], c["seed"]))
    grid = ExperimentGrid({"source": sorted({c["source"] for c in cells}),
                           "task": sorted({c["task"] for c in cells}),
                           "fraction": sorted({c["fraction"] for c in cells})},
                          sorted({c["seed"] for c in cells}), cells)
    paths = write_grid_report(grid, run_dir / "reports", "summary")
    print("\n".join(map(str, paths)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvcl", description="Multi-style / multi-view contrastive pretraining pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file (defaults to the desk preset)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set learning.epochs=2 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    seeds = argparse.ArgumentParser(add_help=False)
    seeds.add_argument("--seeds", nargs="+", type=int, help="seeds (default: eval.seeds)")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    sp = sub.add_parser("pretrain", parents=[common, seeds], help="contrastive pretraining")
    sp.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)} (default: pairing.strategy)")
    sp.add_argument("--resume", action="store_true", help="continue a partial run from its last epoch")
    sp = sub.add_parser("finetune", parents=[common], help="fine-tune one downstream head")
    sp.add_argument("--task", required=True, choices=TASKS)
    sp.add_argument("--source", help=f"pretraining source, one of {', '.join(PRETRAIN_SOURCES)}")
    sp.add_argument("--checkpoint", help="explicit pretraining checkpoint file (overrides --source)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--domains", nargs="+", help="train domains (default: the seen domains)")
    sp = sub.add_parser("evaluate", parents=[common, seeds], help="all tasks on every style for one source")
    sp.add_argument("--source", help="pretraining source (default: pairing.strategy)")
    sp.add_argument("--tasks", nargs="+", choices=TASKS)
    sp = sub.add_parser("ablate", parents=[common, seeds], help="grid over pretraining sources")
    sp.add_argument("--sources", nargs="+")
    sp.add_argument("--tasks", nargs="+", choices=TASKS)
    sp = sub.add_parser("hungry", parents=[common, seeds], help="labeled-data fraction sweep")
    sp.add_argument("--methods", nargs="+")
    sp.add_argument("--fractions", nargs="+", type=float)
    sub.add_parser("report", parents=[common], help="summary tables from every finished cell")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "hungry": cmd_hungry, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .evaluation.runner import GridError
    from .learning.checkpoint import CheckpointError
    from .tasks.classify import MissingLabelsError

    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, GridError, MissingLabelsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    finally:
        root = logging.getLogger()
        for h in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
