"""Training strategies: fully supervised, two-stage, and hybrid batches.

All three share one epoch engine; they differ in which record pool they
consume, which concept-label source they train against, and how batches
are composed. Batch composition supports stratifying on the fraud label
or on the golden/noisy label source, with exact per-batch counts.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import ConceptBottleneckModel, build_model, meta_loss, predict, train_step
from .synthgen import concept_targets, decision_onehot, features_matrix


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class BatchPlan:
    """Batch size plus at most one stratification rule.

    fraud_prevalence fixes the number of fraud rows per batch; a
    golden_fraction fixes the number of golden-source rows per batch.
    """

    batch_size: int
    fraud_prevalence: float | None = None
    golden_fraction: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.fraud_prevalence is not None and self.golden_fraction is not None:
            raise ValueError("set at most one of fraud_prevalence and golden_fraction")
        if self.fraud_prevalence is not None and not 0.0 < self.fraud_prevalence < 1.0:
            raise ValueError("fraud_prevalence must be in (0, 1)")
        if self.golden_fraction is not None and not 0.0 <= self.golden_fraction <= 1.0:
            raise ValueError("golden_fraction must be in [0, 1]")


@dataclass
class FinetuneConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 0.01
    freeze_trunk: bool = True
    batch_mode: str = "pure_golden"  # or "hybrid"
    golden_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("finetune epochs/batch_size/learning_rate must be positive")
        if self.batch_mode not in ("pure_golden", "hybrid"):
            raise ValueError(f"unknown finetune batch_mode {self.batch_mode!r}")


VARIANTS = ("supervised", "two_stage", "hybrid")


@dataclass
class StrategyConfig:
    variant: str = "supervised"
    hidden_dims: tuple[int, ...] = (32,)
    alpha: float = 0.5
    learning_rate: float = 0.05
    epochs: int = 20
    batch_plan: BatchPlan = field(default_factory=lambda: BatchPlan(64))
    finetune: FinetuneConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown strategy variant {self.variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.variant == "two_stage" and self.finetune is None:
            self.finetune = FinetuneConfig()
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train: tuple[float, float, float]
    validation: tuple[float, float, float] | None = None


@dataclass
class TrainingTrace:
    stage: str
    epochs: list[EpochStats]
    wall_time: float
    model: ConceptBottleneckModel

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "total_loss", "decision_loss", "explain_loss"])
            for ep in self.epochs:
                w.writerow([ep.epoch, "train", *(f"{v:.10g}" for v in ep.train)])
                if ep.validation is not None:
                    w.writerow(
                        [ep.epoch, "validation", *(f"{v:.10g}" for v in ep.validation)]
                    )


def _plain_batches(positions: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    perm = positions[rng.permutation(len(positions))]
    n_batches = len(perm) // batch_size
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


class _CyclingStratum:
    """Deals a stratum without replacement, reshuffling whenever exhausted."""

    def __init__(self, positions: np.ndarray, rng):
        self.positions = positions
        self.rng = rng
        self._deck = positions[rng.permutation(len(positions))]
        self._next = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self._next == len(self._deck):
                self._deck = self.positions[self.rng.permutation(len(self.positions))]
                self._next = 0
            grab = min(count, len(self._deck) - self._next)
            out.append(self._deck[self._next : self._next + grab])
            self._next += grab
            count -= grab
        return np.concatenate(out)


def make_batches(records, plan: BatchPlan, rng) -> list[np.ndarray]:
    """One epoch of batch index arrays into `records`, per the plan.

    Stratified sampling is without replacement within the epoch; the small
    golden stratum cycles with reshuffles when it runs out. The final
    partial batch is dropped so composition counts stay exact.
    """
    n = len(records)
    all_pos = np.arange(n)

    if plan.fraud_prevalence is not None:
        per_fraud = _round_half_up(plan.batch_size * plan.fraud_prevalence)
        per_legit = plan.batch_size - per_fraud
        fraud = np.array([i for i in all_pos if records[i].y_d == 1])
        legit = np.array([i for i in all_pos if records[i].y_d == 0])
        for name, need, have in (("fraud", per_fraud, fraud), ("legit", per_legit, legit)):
            if need > len(have):
                raise ValueError(
                    f"{name} stratum exhausted: batch needs {need} rows, "
                    f"only {len(have)} available"
                )
        n_batches = min(
            len(fraud) // per_fraud if per_fraud else n,
            len(legit) // per_legit if per_legit else n,
        )
        fraud_perm = fraud[rng.permutation(len(fraud))]
        legit_perm = legit[rng.permutation(len(legit))]
        return [
            np.concatenate(
                [
                    fraud_perm[b * per_fraud : (b + 1) * per_fraud],
                    legit_perm[b * per_legit : (b + 1) * per_legit],
                ]
            )
            for b in range(n_batches)
        ]

    if plan.golden_fraction is not None:
        golden = np.array([i for i in all_pos if records[i].label_source == "golden"])
        noisy = np.array([i for i in all_pos if records[i].label_source != "golden"])
        if plan.golden_fraction == 1.0:
            return _plain_batches(golden, plan.batch_size, rng)
        if plan.golden_fraction == 0.0:
            return _plain_batches(noisy, plan.batch_size, rng)
        per_golden = _round_half_up(plan.batch_size * plan.golden_fraction)
        per_noisy = plan.batch_size - per_golden
        if per_golden > len(golden):
            raise ValueError(
                f"golden stratum exhausted: batch needs {per_golden} rows, "
                f"only {len(golden)} available"
            )
        if per_noisy > len(noisy):
            raise ValueError(
                f"noisy stratum exhausted: batch needs {per_noisy} rows, "
                f"only {len(noisy)} available"
            )
        n_batches = len(noisy) // per_noisy if per_noisy else len(golden) // per_golden
        golden_stream = _CyclingStratum(golden, rng)
        noisy_perm = noisy[rng.permutation(len(noisy))]
        return [
            np.concatenate(
                [
                    golden_stream.take(per_golden),
                    noisy_perm[b * per_noisy : (b + 1) * per_noisy],
                ]
            )
            for b in range(n_batches)
        ]

    return _plain_batches(all_pos, plan.batch_size, rng)


def _train_epochs(
    model: ConceptBottleneckModel,
    records,
    *,
    plan: BatchPlan,
    epochs: int,
    alpha: float,
    learning_rate: float,
    source: str,
    rng,
    freeze_trunk: bool = False,
    val_records=None,
    stage: str,
) -> TrainingTrace:
    """Shared mini-batch loop; label `source` picks the concept targets."""
    if not records:
        raise ValueError("training pool is empty")
    t0 = time.perf_counter()
    k = model.concept_count
    x = features_matrix(records)
    y_d = decision_onehot(records, model.class_count)
    y_e, mask = concept_targets(records, k, source)

    if val_records:
        xv = features_matrix(val_records)
        yv_d = decision_onehot(val_records, model.class_count)
        yv_e, v_mask = concept_targets(val_records, k, "prefer_golden")

    stats = []
    for epoch in range(epochs):
        batch_losses = []
        for idx in make_batches(records, plan, rng):
            losses = train_step(
                model, x[idx], y_d[idx], y_e[idx], mask[idx],
                alpha, learning_rate, freeze_trunk,
            )
            batch_losses.append(losses)
        train_means = tuple(float(np.mean([b[i] for b in batch_losses])) for i in range(3))
        val_means = None
        if val_records:
            val_means = meta_loss(predict(model, xv), yv_d, yv_e, v_mask, alpha)
        if not all(np.isfinite(train_means)) or (
            val_means is not None and not all(np.isfinite(val_means))
        ):
            raise FloatingPointError(f"{stage}: non-finite loss at epoch {epoch}")
        stats.append(EpochStats(epoch, train_means, val_means))
    return TrainingTrace(stage, stats, time.perf_counter() - t0, model)


def _rng_for(seed):
    return np.random.default_rng(seed)


def train_supervised(model, records, cfg: StrategyConfig, val_records=None, seed=0):
    """Golden-label training: every record must carry golden concepts."""
    missing = sum(1 for r in records if r.golden_concepts is None)
    if missing:
        raise ValueError(f"{missing} records lack golden concept labels")
    return _train_epochs(
        model, records,
        plan=cfg.batch_plan, epochs=cfg.epochs, alpha=cfg.alpha,
        learning_rate=cfg.learning_rate, source="golden",
        rng=_rng_for(seed), val_records=val_records, stage="supervised",
    )


def pretrain(model, records, cfg: StrategyConfig, val_records=None, seed=0):
    """Stage one of two-stage learning: train on the noisy concept labels."""
    missing = sum(1 for r in records if r.noisy_concepts is None)
    if missing:
        raise ValueError(f"{missing} records lack noisy concept labels")
    return _train_epochs(
        model, records,
        plan=cfg.batch_plan, epochs=cfg.epochs, alpha=cfg.alpha,
        learning_rate=cfg.learning_rate, source="noisy",
        rng=_rng_for(seed), val_records=val_records, stage="pretrain",
    )


def fine_tune(
    model,
    golden_records,
    finetune_cfg: FinetuneConfig,
    alpha: float,
    noisy_records=None,
    val_records=None,
    seed=0,
):
    """Stage two: continue from the base parameters on golden labels.

    With freeze_trunk only the two task heads move. pure_golden batches use
    the golden pool alone; hybrid batches mix in noisy-source rows at the
    configured golden fraction.
    """
    if finetune_cfg.batch_mode == "pure_golden":
        pool = list(golden_records)
        plan = BatchPlan(finetune_cfg.batch_size)
        source = "golden"
    else:
        if not noisy_records:
            raise ValueError("hybrid fine-tuning needs a noisy record pool")
        pool = list(golden_records) + list(noisy_records)
        plan = BatchPlan(finetune_cfg.batch_size, golden_fraction=finetune_cfg.golden_fraction)
        source = "tag"
    return _train_epochs(
        model, pool,
        plan=plan, epochs=finetune_cfg.epochs, alpha=alpha,
        learning_rate=finetune_cfg.learning_rate, source=source,
        rng=_rng_for(seed), freeze_trunk=finetune_cfg.freeze_trunk,
        val_records=val_records, stage="finetune",
    )


def train_hybrid(model, golden_records, noisy_records, cfg: StrategyConfig,
                 val_records=None, seed=0):
    """From-scratch training on batches mixing golden and noisy labels."""
    if cfg.batch_plan.golden_fraction is None:
        raise ValueError("hybrid training requires a batch plan with golden_fraction")
    gf = cfg.batch_plan.golden_fraction
    if 0.0 < gf < 1.0 and (not golden_records or not noisy_records):
        raise ValueError("hybrid training with 0 < golden_fraction < 1 needs both pools")
    pool = list(golden_records) + list(noisy_records)
    return _train_epochs(
        model, pool,
        plan=cfg.batch_plan, epochs=cfg.epochs, alpha=cfg.alpha,
        learning_rate=cfg.learning_rate, source="tag",
        rng=_rng_for(seed), val_records=val_records, stage="hybrid",
    )


@dataclass
class StrategyResult:
    traces: list[TrainingTrace]
    model: ConceptBottleneckModel
    pretrained: ConceptBottleneckModel | None = None


def run_strategy(
    cfg: StrategyConfig,
    *,
    train_records,
    val_records=None,
    input_dim: int,
    concept_names,
    class_count: int = 2,
    seed=0,
) -> StrategyResult:
    """Initialize a model and run the configured strategy end to end.

    The master seed deterministically derives the init seed and one shuffle
    seed per stage, so (records, config, seed) fixes the final parameters.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, stage1_ss, stage2_ss = ss.spawn(3)
    model = build_model(
        input_dim, cfg.hidden_dims, concept_names, class_count, seed=init_ss
    )
    golden_pool = [r for r in train_records if r.label_source == "golden"]
    noisy_pool = [r for r in train_records if r.label_source != "golden"]

    if cfg.variant == "supervised":
        trace = train_supervised(model, golden_pool, cfg, val_records, seed=stage1_ss)
        return StrategyResult([trace], model)
    if cfg.variant == "hybrid":
        trace = train_hybrid(model, golden_pool, noisy_pool, cfg, val_records, seed=stage1_ss)
        return StrategyResult([trace], model)
    # two_stage
    pre_trace = pretrain(model, noisy_pool, cfg, val_records, seed=stage1_ss)
    pretrained = model.copy()
    ft_trace = fine_tune(
        model, golden_pool, cfg.finetune, cfg.alpha,
        noisy_records=noisy_pool, val_records=val_records, seed=stage2_ss,
    )
    return StrategyResult([pre_trace, ft_trace], model, pretrained)
