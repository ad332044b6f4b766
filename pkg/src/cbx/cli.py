"""Command-line interface.

Subcommands: gen-data, annotate, train, evaluate, grid, pareto, plot.
Every command accepts --config and --seed; on success the last line of
stdout is a single machine-readable JSON summary object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import experiment, metrics, model, synthgen, training, weak_labels
from .config import ConfigError


def _summary(command: str, **fields) -> None:
    print(json.dumps({"status": "ok", "command": command, **fields}))


def _load_config(path) -> dict:
    return cfgmod.parse_config_file(path) if path else {}


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    gen = cfgmod.build_gen_config(cfg, args.seed)
    dataset = synthgen.generate(gen)
    paths = synthgen.write_dataset(dataset, args.out)
    stats = dataset.provenance["realized"]
    _summary(
        "gen-data",
        records=len(dataset.records),
        out=str(paths["dataset"]),
        train_prevalence=stats["splits"]["train"]["prevalence"],
        mean_jaccard=stats["jaccard"]["mean"],
        probe_auc=stats["probe_auc"],
    )
    return 0


def cmd_annotate(args) -> int:
    dataset = synthgen.load_dataset(args.data)
    weak_labels.annotate_dataset(dataset.records, dataset.rule_map, dataset.taxonomy)
    paths = synthgen.write_dataset(dataset, args.out)
    noisy = sum(1 for r in dataset.records if r.label_source == "noisy")
    _summary("annotate", records=len(dataset.records), noisy=noisy, out=str(paths["dataset"]))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    strategy_cfg = cfgmod.build_strategy_config(cfg, args.strategy)
    dataset = synthgen.load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = training.run_strategy(
        strategy_cfg,
        train_records=dataset.split("train"),
        val_records=dataset.split("validation"),
        input_dim=len(dataset.records[0].features),
        concept_names=list(dataset.taxonomy.names),
        seed=args.seed if args.seed is not None else 0,
    )
    for trace in result.traces:
        trace.write_csv(out_dir / f"trace.{trace.stage}.csv")
    checkpoints = {}
    if result.pretrained is not None:
        model.save_model(result.pretrained, out_dir / "model.pretrain.ckpt")
        checkpoints["pretrain"] = str(out_dir / "model.pretrain.ckpt")
    model.save_model(result.model, out_dir / "model.final.ckpt")
    checkpoints["final"] = str(out_dir / "model.final.ckpt")
    last = result.traces[-1]
    _summary(
        "train",
        strategy=strategy_cfg.variant,
        epochs=sum(len(t.epochs) for t in result.traces),
        final_train_loss=last.epochs[-1].train[0] if last.epochs else None,
        checkpoints=checkpoints,
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    fpr_target = args.fpr if args.fpr is not None else float(cfg.get("fpr_target", 0.05))
    trained = model.load_model(args.checkpoint)
    dataset = synthgen.load_dataset(args.data)
    report = metrics.evaluate_model(
        trained, dataset.split("validation"), dataset.split("test"), fpr_target
    )
    if args.out:
        rec = experiment.RunRecord(
            run_id=args.model_id or Path(args.checkpoint).stem,
            seed=args.seed if args.seed is not None else 0,
            strategy=args.strategy or "-",
            alpha=float("nan"),
            learning_rate=float("nan"),
            hidden_dims=tuple(l.out_dim for l in trained.trunk),
            report=report,
        )
        experiment.write_results_csv([rec], args.out)
    _summary(
        "evaluate",
        recall_at_fpr=report.recall_at_fpr,
        realized_fpr=report.realized_fpr,
        threshold=report.threshold,
        map=report.mean_ap,
        excluded_concepts=report.concepts_excluded,
    )
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args.config)
    grid = cfgmod.build_grid_spec(cfg)
    if args.seed is not None:
        grid.seeds = [args.seed]
    dataset = synthgen.load_dataset(args.data)
    records = experiment.run_grid(
        dataset, grid, args.out, workers=args.workers, resume=not args.no_resume
    )
    done = sum(1 for r in records if r.report is not None)
    failed = sum(1 for r in records if r.error is not None)
    _summary(
        "grid",
        runs=len(records),
        completed=done,
        failed=failed,
        results=str(Path(args.out) / "results.csv"),
    )
    return 0


def cmd_pareto(args) -> int:
    rows = experiment.load_results_csv(args.results)
    experiment.annotate_results_rows(rows)
    out = args.out or args.results
    experiment.write_results_rows(rows, out)
    front = [row["model_id"] for row in rows if row["pareto"]]
    _summary("pareto", runs=len(rows), front=front, out=str(out))
    return 0


def cmd_plot(args) -> int:
    rows = experiment.load_results_csv(args.results)
    if rows and not any(row["pareto"] for row in rows):
        experiment.annotate_results_rows(rows)
    out = experiment.emit_tradeoff_plot(rows, args.out)
    _summary("plot", runs=len(rows), out=str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbx",
        description="Concept-bottleneck fraud models with golden, noisy, and mixed labels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output directory")

    p = add("annotate", cmd_annotate, help="fill noisy concept labels from triggered rules")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, help="train one strategy on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--strategy", choices=["supervised", "two-stage", "hybrid"])
    p.add_argument("--out", required=True, help="run output directory")

    p = add("evaluate", cmd_evaluate, help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fpr", type=float, default=None, help="FPR target (default 0.05)")
    p.add_argument("--out", help="write a one-row results CSV here")
    p.add_argument("--model-id", dest="model_id")
    p.add_argument("--strategy")

    p = add("grid", cmd_grid, help="run a hyperparameter grid")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="grid output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-resume", action="store_true")

    p = add("pareto", cmd_pareto, help="annotate a results CSV with front membership")
    p.add_argument("--results", required=True)
    p.add_argument("--out")

    p = add("plot", cmd_plot, help="render the recall/mAP trade-off scatter")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default="tradeoff.svg")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
