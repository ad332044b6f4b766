"""Hyperparameter-grid orchestration, result persistence, and plotting.

Every grid cell derives its own RNG stream from (master seed, cell index),
so results are identical whether cells run serially or on a thread pool.
Completed cells leave a report file behind and are skipped on rerun.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import EvalReport, evaluate_model, pareto_front
from .model import save_model
from .synthgen import GenConfig, SyntheticDataset
from .training import BatchPlan, FinetuneConfig, StrategyConfig, run_strategy

log = logging.getLogger(__name__)

RESULTS_HEADER = [
    "model_id", "seed", "strategy", "alpha", "lr", "layers",
    "recall_at_fpr", "realized_fpr", "threshold", "map",
    "excluded_concepts", "pareto",
]


@dataclass
class GridSpec:
    """Cartesian grid over architecture, learning rate, and alpha, per seed.

    For two-stage strategies an optional fine-tuning grid multiplies each
    base cell; the base model for a cell is shared across its fine-tune
    variants.
    """

    hidden_layer_options: list[tuple[int, ...]]
    learning_rates: list[float]
    alphas: list[float]
    seeds: list[int]
    strategy: StrategyConfig
    finetune_epochs: list[int] | None = None
    finetune_batch_sizes: list[int] | None = None
    finetune_learning_rates: list[float] | None = None

    def base_cells(self):
        cells = []
        for dims in self.hidden_layer_options:
            for lr in self.learning_rates:
                for alpha in self.alphas:
                    cells.append((tuple(int(d) for d in dims), float(lr), float(alpha)))
        return cells

    def finetune_cells(self):
        if self.strategy.variant != "two_stage":
            return [None]
        base_ft = self.strategy.finetune or FinetuneConfig()
        epochs = self.finetune_epochs or [base_ft.epochs]
        sizes = self.finetune_batch_sizes or [base_ft.batch_size]
        lrs = self.finetune_learning_rates or [base_ft.learning_rate]
        return [(int(e), int(b), float(lr)) for e in epochs for b in sizes for lr in lrs]


def default_grid(strategy: StrategyConfig, seeds=(0, 1)) -> GridSpec:
    """3 x 3 x 3 grid (27 models per seed) with conventional value ranges."""
    return GridSpec(
        hidden_layer_options=[(32,), (64, 32), (128, 64, 32)],
        learning_rates=[0.1, 0.01, 0.001],
        alphas=[0.3, 0.5, 0.7],
        seeds=list(seeds),
        strategy=strategy,
    )


@dataclass
class RunRecord:
    run_id: str
    seed: int
    strategy: str
    alpha: float
    learning_rate: float
    hidden_dims: tuple[int, ...]
    config_snapshot: dict | None = None
    report: EvalReport | None = None
    error: str | None = None
    trace_path: str | None = None
    checkpoint_path: str | None = None
    wall_time: float = 0.0
    pareto_within_strategy: bool | None = None


def _dims_label(dims) -> str:
    return "x".join(str(d) for d in dims)


def _cell_run_id(seed, dims, lr, alpha, ft) -> str:
    rid = f"s{seed}_h{_dims_label(dims)}_lr{lr:g}_a{alpha:g}"
    if ft is not None:
        rid += f"_ft{ft[0]}x{ft[1]}x{ft[2]:g}"
    return rid


def cell_seed(master_seed: int, cell_index: int) -> np.random.SeedSequence:
    """Counter-based stream derivation: pure function of (seed, index)."""
    return np.random.SeedSequence(master_seed, spawn_key=(cell_index,))


def _cell_config(template: StrategyConfig, dims, lr, alpha, ft) -> StrategyConfig:
    plan = template.batch_plan
    finetune = template.finetune
    if ft is not None:
        base_ft = finetune or FinetuneConfig()
        finetune = FinetuneConfig(
            epochs=ft[0], batch_size=ft[1], learning_rate=ft[2],
            freeze_trunk=base_ft.freeze_trunk, batch_mode=base_ft.batch_mode,
            golden_fraction=base_ft.golden_fraction,
        )
    return StrategyConfig(
        variant=template.variant,
        hidden_dims=dims,
        alpha=alpha,
        learning_rate=lr,
        epochs=template.epochs,
        batch_plan=BatchPlan(plan.batch_size, plan.fraud_prevalence, plan.golden_fraction),
        finetune=finetune,
    )


def _report_csv_fields(rec: RunRecord) -> list[str]:
    rep = rec.report
    return [
        rec.run_id,
        str(rec.seed),
        rec.strategy,
        f"{rec.alpha:g}",
        f"{rec.learning_rate:g}",
        _dims_label(rec.hidden_dims),
        f"{rep.recall_at_fpr:.10g}",
        f"{rep.realized_fpr:.10g}",
        f"{rep.threshold:.10g}",
        f"{rep.mean_ap:.10g}",
        str(rep.concepts_excluded),
        "true" if rep.pareto_member else "false",
    ]


def write_results_csv(records, path):
    """One row per successful run, in run order; pareto column is the overall front."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for rec in records:
            if rec.report is not None:
                w.writerow(_report_csv_fields(rec))


def load_results_csv(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("recall_at_fpr", "realized_fpr", "threshold", "map", "alpha", "lr"):
            if row.get(key):
                row[key] = float(row[key])
        row["pareto"] = row.get("pareto") == "true"
    return rows


def _write_run_report(rec: RunRecord, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        w.writerow(_report_csv_fields(rec))


def _load_run_report(rec: RunRecord, path) -> bool:
    try:
        rows = load_results_csv(path)
    except (OSError, ValueError):
        return False
    if len(rows) != 1 or rows[0]["model_id"] != rec.run_id:
        return False
    row = rows[0]
    rec.report = EvalReport(
        fpr_target=float("nan"),
        threshold=row["threshold"],
        recall_at_fpr=row["recall_at_fpr"],
        realized_fpr=row["realized_fpr"],
        mean_ap=row["map"],
        concepts_excluded=int(row["excluded_concepts"]),
    )
    return True


def run_grid(
    dataset: SyntheticDataset,
    grid: GridSpec,
    out_dir,
    fpr_target: float = 0.05,
    workers: int = 1,
    resume: bool = True,
) -> list[RunRecord]:
    """Train and evaluate every (seed, cell) combination.

    Cell failures are recorded (failures.csv) without stopping the grid.
    The aggregated results.csv is written by the collector after all cells
    finish, in deterministic cell order.
    """
    out_dir = Path(out_dir)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    train = dataset.split("train")
    val = dataset.split("validation")
    test = dataset.split("test")
    if not train or not val or not test:
        raise ValueError("dataset is missing one of the train/validation/test splits")
    input_dim = len(train[0].features)

    jobs = []
    for seed in grid.seeds:
        for base_idx, (dims, lr, alpha) in enumerate(grid.base_cells()):
            for ft in grid.finetune_cells():
                rec = RunRecord(
                    run_id=_cell_run_id(seed, dims, lr, alpha, ft),
                    seed=seed,
                    strategy=grid.strategy.variant,
                    alpha=alpha,
                    learning_rate=lr,
                    hidden_dims=dims,
                )
                jobs.append((rec, base_idx, dims, lr, alpha, ft, seed))

    def execute(job):
        rec, base_idx, dims, lr, alpha, ft, seed = job
        run_dir = runs_dir / rec.run_id
        report_path = run_dir / "report.csv"
        if resume and report_path.exists() and _load_run_report(rec, report_path):
            rec.trace_path = str(run_dir / "trace.csv")
            rec.checkpoint_path = str(run_dir / "model.final.ckpt")
            if (run_dir / "config").exists():
                from .config import parse_config_file

                rec.config_snapshot = parse_config_file(run_dir / "config")
            log.info("skipping completed run %s", rec.run_id)
            return rec
        t0 = time.perf_counter()
        try:
            cfg = _cell_config(grid.strategy, dims, lr, alpha, ft)
            result = run_strategy(
                cfg,
                train_records=train,
                val_records=val,
                input_dim=input_dim,
                concept_names=list(dataset.taxonomy.names),
                seed=cell_seed(seed, base_idx),
            )
            rec.report = evaluate_model(result.model, val, test, fpr_target)
        except Exception as exc:  # cell isolation: record and move on
            rec.error = f"{type(exc).__name__}: {exc}"
            log.warning("run %s failed: %s", rec.run_id, rec.error)
            return rec
        rec.wall_time = time.perf_counter() - t0
        rec.config_snapshot = _flat_config(cfg, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config", "w", encoding="utf-8") as fh:
            for key, value in rec.config_snapshot.items():
                fh.write(f"{key} = {value}\n")
        for trace in result.traces:
            trace.write_csv(run_dir / f"trace.{trace.stage}.csv")
        result.traces[-1].write_csv(run_dir / "trace.csv")
        if result.pretrained is not None:
            save_model(result.pretrained, run_dir / "model.pretrain.ckpt")
        save_model(result.model, run_dir / "model.final.ckpt")
        rec.trace_path = str(run_dir / "trace.csv")
        rec.checkpoint_path = str(run_dir / "model.final.ckpt")
        _write_run_report(rec, report_path)
        return rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(execute, jobs))
    else:
        records = [execute(job) for job in jobs]

    select_pareto(records)
    write_results_csv(records, out_dir / "results.csv")
    failures = [rec for rec in records if rec.error is not None]
    if failures:
        with open(out_dir / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "error"])
            for rec in failures:
                w.writerow([rec.run_id, rec.error])
    return records


def _flat_config(cfg: StrategyConfig, seed) -> dict:
    flat = {
        "strategy": cfg.variant,
        "hidden_layers": ",".join(str(d) for d in cfg.hidden_dims),
        "alpha": f"{cfg.alpha:g}",
        "learning_rate": f"{cfg.learning_rate:g}",
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_plan.batch_size,
        "seed": seed,
    }
    if cfg.batch_plan.fraud_prevalence is not None:
        flat["fraud_prevalence"] = f"{cfg.batch_plan.fraud_prevalence:g}"
    if cfg.batch_plan.golden_fraction is not None:
        flat["golden_fraction"] = f"{cfg.batch_plan.golden_fraction:g}"
    if cfg.finetune is not None:
        ft = cfg.finetune
        flat.update(
            finetune_epochs=ft.epochs,
            finetune_batch_size=ft.batch_size,
            finetune_learning_rate=f"{ft.learning_rate:g}",
            freeze_trunk=str(ft.freeze_trunk).lower(),
            finetune_batch_mode=ft.batch_mode,
            finetune_golden_fraction=f"{ft.golden_fraction:g}",
        )
    return flat


def select_pareto(records: list[RunRecord]) -> list[RunRecord]:
    """Annotate overall and per-strategy front membership in place."""
    done = [rec for rec in records if rec.report is not None]
    if done:
        flags = pareto_front([(r.report.recall_at_fpr, r.report.mean_ap) for r in done])
        for rec, flag in zip(done, flags):
            rec.report.pareto_member = flag
        for strategy in {rec.strategy for rec in done}:
            group = [rec for rec in done if rec.strategy == strategy]
            group_flags = pareto_front(
                [(r.report.recall_at_fpr, r.report.mean_ap) for r in group]
            )
            for rec, flag in zip(group, group_flags):
                rec.pareto_within_strategy = flag
    return records


def annotate_results_rows(rows: list[dict]) -> list[dict]:
    """Same front annotation for rows loaded from a results CSV."""
    if rows:
        flags = pareto_front([(row["recall_at_fpr"], row["map"]) for row in rows])
        for row, flag in zip(rows, flags):
            row["pareto"] = flag
    return rows


def write_results_rows(rows: list[dict], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for row in rows:
            w.writerow(
                [
                    row["model_id"],
                    row["seed"],
                    row["strategy"],
                    f"{row['alpha']:g}" if row.get("alpha") != "" else "",
                    f"{row['lr']:g}" if row.get("lr") != "" else "",
                    row["layers"],
                    f"{row['recall_at_fpr']:.10g}",
                    f"{row['realized_fpr']:.10g}",
                    f"{row['threshold']:.10g}",
                    f"{row['map']:.10g}",
                    row["excluded_concepts"],
                    "true" if row["pareto"] else "false",
                ]
            )


STRATEGY_COLORS = {
    "supervised": "tab:blue",
    "two_stage": "tab:orange",
    "hybrid": "tab:green",
}


def emit_tradeoff_plot(rows: list[dict], out_path):
    """Recall/mAP scatter, colored by strategy, front points enlarged.

    Each strategy contributes point groups tagged with an SVG gid of the
    form points:<strategy>:<front|rest>, one marker per run.
    """
    if not rows:
        raise ValueError("no runs to plot")
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cbx"
    fig, ax = plt.subplots(figsize=(7, 5))
    strategies = []
    for row in rows:
        if row["strategy"] not in strategies:
            strategies.append(row["strategy"])
    for strategy in strategies:
        group = [r for r in rows if r["strategy"] == strategy]
        color = STRATEGY_COLORS.get(strategy, "tab:gray")
        labeled = False
        for front, size, tag in ((False, 30, "rest"), (True, 140, "front")):
            pts = [r for r in group if bool(r.get("pareto")) == front]
            if not pts:
                continue
            coll = ax.scatter(
                [r["recall_at_fpr"] for r in pts],
                [r["map"] for r in pts],
                s=size,
                color=color,
                alpha=0.85 if front else 0.45,
                edgecolors="black" if front else "none",
                label=None if labeled else strategy,
            )
            labeled = True
            coll.set_gid(f"points:{strategy}:{tag}")
    ax.set_xlabel("decision recall @ FPR target")
    ax.set_ylabel("concept mAP")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left", title="strategy")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format=out_path.suffix.lstrip(".") or "svg",
                metadata={"Date": None} if (out_path.suffix or ".svg") == ".svg" else None)
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# Default desk-scale benchmark used by the comparison experiments.

def benchmark_gen_config(seed: int = 0) -> GenConfig:
    """50k/2k/2k splits, 14 concepts, 842 golden training rows at 37% fraud."""
    return GenConfig(golden_size=842, feature_dim=100, seed=seed)


def run_benchmark_comparison(seeds=range(5), hidden_dims=(32,)) -> list[dict]:
    """Per-seed strategy comparison on the default benchmark.

    For each master seed this regenerates the dataset, trains the three
    strategies, evaluates the two-stage base model before fine-tuning, and
    fine-tunes that base with hybrid batches at golden fractions 0.1 and
    0.5. Returns one dict per seed mapping run name to (recall, mAP).
    """
    from .metrics import evaluate_model as _eval
    from .training import fine_tune, run_strategy as _run

    results = []
    for seed in seeds:
        dataset = generate_benchmark(seed)
        train = dataset.split("train")
        val = dataset.split("validation")
        test = dataset.split("test")
        input_dim = len(train[0].features)
        names = list(dataset.taxonomy.names)
        golden = [r for r in train if r.label_source == "golden"]
        noisy = [r for r in train if r.label_source != "golden"]

        out = {}
        pretrained = None
        for name, cfg in benchmark_strategies(hidden_dims).items():
            res = _run(
                cfg, train_records=train, val_records=val,
                input_dim=input_dim, concept_names=names, seed=1000 + seed,
            )
            rep = _eval(res.model, val, test)
            out[name] = (rep.recall_at_fpr, rep.mean_ap)
            if res.pretrained is not None:
                pretrained = res.pretrained
                rep_base = _eval(pretrained, val, test)
                out["pretrained_base"] = (rep_base.recall_at_fpr, rep_base.mean_ap)

        for gf in (0.1, 0.5):
            tuned = pretrained.copy()
            ft = FinetuneConfig(
                epochs=16, batch_size=100, learning_rate=0.1,
                freeze_trunk=True, batch_mode="hybrid", golden_fraction=gf,
            )
            fine_tune(tuned, golden, ft, 0.5, noisy_records=noisy, seed=2000 + seed)
            rep = _eval(tuned, val, test)
            out[f"finetune_hybrid_{gf:g}"] = (rep.recall_at_fpr, rep.mean_ap)
        out["seed"] = seed
        results.append(out)
        log.info("benchmark seed %d: %s", seed, out)
    return results


def generate_benchmark(seed: int) -> SyntheticDataset:
    from .synthgen import generate

    return generate(benchmark_gen_config(seed))


def benchmark_strategies(hidden_dims=(32,)) -> dict[str, StrategyConfig]:
    """Tuned desk-scale configurations for the three-way comparison."""
    hidden_dims = tuple(hidden_dims)
    return {
        "supervised": StrategyConfig(
            variant="supervised",
            hidden_dims=hidden_dims,
            alpha=0.5,
            learning_rate=0.1,
            epochs=80,
            batch_plan=BatchPlan(64, fraud_prevalence=0.37),
        ),
        "two_stage": StrategyConfig(
            variant="two_stage",
            hidden_dims=hidden_dims,
            alpha=0.5,
            learning_rate=0.1,
            epochs=64,
            batch_plan=BatchPlan(100, fraud_prevalence=0.1),
            finetune=FinetuneConfig(
                epochs=32, batch_size=64, learning_rate=0.1,
                freeze_trunk=True, batch_mode="pure_golden",
            ),
        ),
        "hybrid": StrategyConfig(
            variant="hybrid",
            hidden_dims=hidden_dims,
            alpha=0.5,
            learning_rate=0.1,
            epochs=32,
            batch_plan=BatchPlan(100, golden_fraction=0.1),
        ),
    }
