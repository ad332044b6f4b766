"""Synthetic fraud-transaction data with planted concepts and noisy rules.

The generative chain is features -> golden concepts -> decision label, so
the concept layer really does carry the decision signal. Rule firings are
derived from the golden concepts with per-rule miss and false-fire noise,
tuned so the noisy/golden agreement hits a requested Jaccard level. The
fraud threshold is set per split by quantile so realized prevalence matches
the configured targets.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from . import weak_labels
from .weak_labels import ConceptTaxonomy, RuleConceptMap, RuleEntry

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")

DEFAULT_CONCEPT_NAMES = (
    "Suspicious Items",
    "Suspicious Customer",
    "Suspicious Payment",
    "Suspicious Shipping",
    "Suspicious Device",
    "Suspicious Location",
    "High Velocity",
    "High Amount",
    "Odd Hours",
    "New Account",
    "Mismatched Identity",
    "Risky Merchant",
    "Proxy Network",
    "Account Takeover",
)

DATASET_FILE = "dataset.jsonl"
TAXONOMY_FILE = "taxonomy.txt"
RULES_FILE = "rules.txt"
PROVENANCE_FILE = "provenance.json"


class CalibrationError(RuntimeError):
    """A generation target could not be met; the message carries the realized value."""


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class GenConfig:
    n_train: int = 50_000
    n_validation: int = 2_000
    n_test: int = 2_000
    feature_dim: int = 20
    concept_count: int = 14
    rule_count: int = 30
    train_prevalence: float = 0.02
    validation_prevalence: float = 0.04
    test_prevalence: float = 0.04
    golden_size: int = 1300
    golden_fraud_fraction: float = 0.37
    noise_target_jaccard: float = 0.4
    decision_noise: float = 0.25
    seed: int = 0
    concept_names: tuple[str, ...] | None = None

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_validation + self.n_test

    def prevalence(self, split: str) -> float:
        return {
            "train": self.train_prevalence,
            "validation": self.validation_prevalence,
            "test": self.test_prevalence,
        }[split]

    def validate(self):
        for split in SPLITS:
            p = self.prevalence(split)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{split} prevalence must be in (0, 1), got {p}")
        if min(self.n_train, self.n_validation, self.n_test) < 1:
            raise ValueError("every split needs at least one record")
        if self.golden_size > self.n_train:
            raise ValueError("golden_size cannot exceed the training split size")
        if not 0.0 < self.golden_fraud_fraction < 1.0:
            raise ValueError("golden_fraud_fraction must be in (0, 1)")
        if not 0.0 < self.noise_target_jaccard <= 1.0:
            raise ValueError("noise_target_jaccard must be in (0, 1]")
        if self.rule_count < self.concept_count:
            raise ValueError(
                "rule_count must be >= concept_count so every concept has a "
                "covering rule"
            )
        if self.concept_names is not None and len(self.concept_names) != self.concept_count:
            raise ValueError("concept_names length must equal concept_count")

    def resolved_concept_names(self) -> tuple[str, ...]:
        if self.concept_names is not None:
            return tuple(self.concept_names)
        if self.concept_count <= len(DEFAULT_CONCEPT_NAMES):
            return DEFAULT_CONCEPT_NAMES[: self.concept_count]
        extra = tuple(
            f"Fraud Pattern {i + 1}"
            for i in range(self.concept_count - len(DEFAULT_CONCEPT_NAMES))
        )
        return DEFAULT_CONCEPT_NAMES + extra


@dataclass
class TransactionRecord:
    id: int
    features: np.ndarray
    y_d: int
    triggered_rules: tuple[str, ...]
    golden_concepts: np.ndarray | None
    noisy_concepts: np.ndarray | None
    split: str
    label_source: str


@dataclass
class SyntheticDataset:
    records: list[TransactionRecord]
    taxonomy: ConceptTaxonomy
    rule_map: RuleConceptMap
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list[TransactionRecord]:
        return [r for r in self.records if r.split == name]

    def pool(self, label_source: str, split: str = "train") -> list[TransactionRecord]:
        return [r for r in self.records if r.split == split and r.label_source == label_source]


def _plant_concepts(rng, x: np.ndarray, k: int):
    """Per-concept sparse logits over features; returns golden 0/1 matrix.

    The logit scale is deliberately sharp so concepts are close to
    deterministic functions of the features; softer concepts would cap the
    decision signal any model can recover from x.
    """
    n, d = x.shape
    active = min(6, d)
    logits = np.empty((n, k))
    for j in range(k):
        idx = rng.choice(d, size=active, replace=False)
        w = rng.normal(0.0, 1.0, size=active)
        w *= 5.0 / max(np.linalg.norm(w), 1e-9)
        bias = rng.uniform(-7.0, -3.5)
        logits[:, j] = x[:, idx] @ w + bias
    probs = nn.sigmoid_elementwise(logits)
    return (rng.random((n, k)) < probs).astype(np.int8)


def _build_rules(rng, taxonomy: ConceptTaxonomy, rule_count: int) -> RuleConceptMap:
    """First k rules cover one concept each; the rest map to random pairs."""
    names = taxonomy.names
    entries: dict[str, RuleEntry] = {}
    for i in range(rule_count):
        if i < len(names):
            concepts = (names[i],)
        else:
            pair = rng.choice(len(names), size=min(2, len(names)), replace=False)
            concepts = tuple(names[j] for j in sorted(pair))
        entries[f"R{i:03d}"] = RuleEntry(
            f"Expert heuristic {i:03d} targeting {', '.join(concepts)}", concepts
        )
    return RuleConceptMap(entries)


def _rule_concept_matrix(rule_map: RuleConceptMap, taxonomy: ConceptTaxonomy) -> np.ndarray:
    m = np.zeros((len(rule_map), taxonomy.k))
    for r, entry in enumerate(rule_map.entries.values()):
        for c in entry.concepts:
            m[r, taxonomy.index[c]] = 1.0
    return m


def _mean_jaccard_rows(noisy: np.ndarray, golden: np.ndarray) -> np.ndarray:
    inter = np.logical_and(noisy, golden).sum(axis=1)
    union = np.logical_or(noisy, golden).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def _rank_uniform(values: np.ndarray) -> np.ndarray:
    """Column-wise normalized ranks in [0, 1); a feature-driven stand-in for
    uniforms, so the events they gate are systematic in feature space."""
    order = np.argsort(values, axis=0, kind="stable")
    ranks = np.empty_like(values)
    n = values.shape[0]
    np.put_along_axis(ranks, order, np.arange(n, dtype=np.float64)[:, None] / n, axis=0)
    return ranks


def _fires(u_miss, u_false, should_fire, miss_base, false_base, t: float) -> np.ndarray:
    return np.where(should_fire, u_miss >= t * miss_base, u_false < t * false_base)


def _calibrate_noise(u_miss, u_false, should_fire, miss_base, false_base, rule_concepts,
                     golden, target: float, tol: float = 0.05):
    """Bisect a global noise scale so mean Jaccard(noisy, golden) hits target.

    The per-cell gate values are fixed, so the objective is deterministic
    and monotone in the scale for practical purposes.
    """

    def mean_j(t: float) -> float:
        fires = _fires(u_miss, u_false, should_fire, miss_base, false_base, t)
        noisy = (fires.astype(np.float64) @ rule_concepts) > 0
        return float(_mean_jaccard_rows(noisy, golden).mean())

    if target >= 1.0:
        return 0.0, mean_j(0.0)
    lo, hi = 0.0, 1.0
    j_hi = mean_j(hi)
    if j_hi > target + tol:
        raise CalibrationError(
            f"noise_target_jaccard={target} unreachable: even at maximum noise "
            f"the mean Jaccard is {j_hi:.4f}"
        )
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if mean_j(mid) > target:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    realized = mean_j(t)
    if abs(realized - target) > tol:
        raise CalibrationError(
            f"noise calibration missed: target Jaccard {target}, realized {realized:.4f}"
        )
    return t, realized


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC from average ranks (ties shared), no external dependencies."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _probe_auc(golden_train, y_train, golden_eval, y_eval, seed) -> float:
    """Train a logistic probe concepts -> label and score it on held-out rows."""
    cap = 8000
    xt = golden_train[:cap].astype(np.float64)
    yt = y_train[:cap].astype(np.float64).reshape(-1, 1)
    probe = nn.init_layers([xt.shape[1], 1], ["sigmoid"], seed)
    for _ in range(400):
        acts = nn.forward(probe, xt)
        grad = nn.multilabel_bce_grad(acts[-1], yt)
        grads, _ = nn.backward(probe, xt, acts, grad)
        nn.sgd_step(probe, grads, 3.0)
    scores = nn.forward(probe, golden_eval.astype(np.float64))[-1][:, 0]
    return _rank_auc(scores, y_eval)


def generate(config: GenConfig) -> SyntheticDataset:
    """Draw a full dataset per the config; deterministic for a given seed."""
    config.validate()
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    names = config.resolved_concept_names()
    taxonomy = ConceptTaxonomy(names)
    k = taxonomy.k
    n = config.n_total

    x = rng.standard_normal((n, config.feature_dim))
    golden = _plant_concepts(rng, x, k)

    concept_weights = rng.uniform(0.5, 1.5, size=k)
    score = golden @ concept_weights + rng.normal(0.0, config.decision_noise, size=n)

    split_of = np.empty(n, dtype=object)
    bounds = {
        "train": (0, config.n_train),
        "validation": (config.n_train, config.n_train + config.n_validation),
        "test": (config.n_train + config.n_validation, n),
    }
    y = np.zeros(n, dtype=np.int64)
    for split, (lo, hi) in bounds.items():
        split_of[lo:hi] = split
        tau = np.quantile(score[lo:hi], 1.0 - config.prevalence(split))
        y[lo:hi] = score[lo:hi] > tau

    rule_map = _build_rules(rng, taxonomy, config.rule_count)
    rule_concepts = _rule_concept_matrix(rule_map, taxonomy)
    should_fire = (golden.astype(np.float64) @ rule_concepts.T) >= rule_concepts.sum(axis=1)
    miss_base = rng.uniform(0.5, 0.9, size=config.rule_count)
    false_base = rng.uniform(0.04, 0.12, size=config.rule_count)
    # Misses are systematic: each rule is blind in a region of feature space
    # (low normalized rank of a signed gate feature), sized by the tuned
    # per-rule miss rate. False fires stay an independent background.
    gate_feature = rng.integers(0, config.feature_dim, size=config.rule_count)
    gate_sign = rng.choice((-1.0, 1.0), size=config.rule_count)
    u_miss = _rank_uniform(gate_sign * x[:, gate_feature])
    u_false = rng.random((n, config.rule_count))

    cal_rows = slice(0, n, max(1, n // 20_000))
    t_noise, _ = _calibrate_noise(
        u_miss[cal_rows], u_false[cal_rows], should_fire[cal_rows], miss_base,
        false_base, rule_concepts, golden[cal_rows], config.noise_target_jaccard,
    )
    fires = _fires(u_miss, u_false, should_fire, miss_base, false_base, t_noise)
    noisy = ((fires.astype(np.float64) @ rule_concepts) > 0).astype(np.int8)
    realized_j = float(_mean_jaccard_rows(noisy, golden).mean())
    if abs(realized_j - config.noise_target_jaccard) > 0.05:
        raise CalibrationError(
            f"noise calibration missed on the full data: target "
            f"{config.noise_target_jaccard}, realized {realized_j:.4f}"
        )

    # Golden subset: stratified draw from the training period at the
    # configured fraud fraction.
    train_lo, train_hi = bounds["train"]
    train_ids = np.arange(train_lo, train_hi)
    fraud_ids = train_ids[y[train_ids] == 1]
    legit_ids = train_ids[y[train_ids] == 0]
    n_gold_fraud = _round_half_up(config.golden_size * config.golden_fraud_fraction)
    n_gold_legit = config.golden_size - n_gold_fraud
    if n_gold_fraud > len(fraud_ids) or n_gold_legit > len(legit_ids):
        raise CalibrationError(
            f"golden subset infeasible: need {n_gold_fraud} fraud / {n_gold_legit} "
            f"legit rows, train split has {len(fraud_ids)} / {len(legit_ids)}"
        )
    golden_ids = {int(v) for v in rng.choice(fraud_ids, size=n_gold_fraud, replace=False)}
    golden_ids |= {int(v) for v in rng.choice(legit_ids, size=n_gold_legit, replace=False)}

    rule_ids = list(rule_map.entries)
    records = []
    for i in range(n):
        triggered = tuple(rule_ids[r] for r in np.flatnonzero(fires[i]))
        records.append(
            TransactionRecord(
                id=i,
                features=x[i],
                y_d=int(y[i]),
                triggered_rules=triggered,
                golden_concepts=golden[i],
                noisy_concepts=noisy[i],
                split=str(split_of[i]),
                label_source="golden" if i in golden_ids else "noisy",
            )
        )

    val_lo, val_hi = bounds["validation"]
    auc = _probe_auc(
        golden[train_lo:train_hi], y[train_lo:train_hi],
        golden[val_lo:val_hi], y[val_lo:val_hi],
        seed=config.seed,
    )
    if auc <= 0.9:
        raise CalibrationError(
            f"planted signal too weak: concept probe AUC {auc:.4f} <= 0.9"
        )

    dataset = SyntheticDataset(records, taxonomy, rule_map)
    stats = report(dataset)
    stats["probe_auc"] = auc
    stats["noise_scale"] = t_noise
    cfg_dict = asdict(config)
    cfg_dict["concept_names"] = list(names)
    dataset.provenance = {"config": cfg_dict, "realized": stats}
    log.info(
        "generated %d records (jaccard %.3f, probe AUC %.3f, %.2fs)",
        n, realized_j, auc, time.perf_counter() - t0,
    )
    return dataset


def report(dataset: SyntheticDataset) -> dict:
    """Recompute dataset statistics from the records themselves."""
    splits = {}
    for name in SPLITS:
        rows = dataset.split(name)
        if rows:
            prevalence = sum(r.y_d for r in rows) / len(rows)
            golden_rows = sum(1 for r in rows if r.label_source == "golden")
            splits[name] = {
                "size": len(rows),
                "prevalence": prevalence,
                "golden_rows": golden_rows,
            }
        else:
            splits[name] = {"size": 0, "prevalence": None, "golden_rows": 0}

    jaccards = [
        weak_labels.jaccard(r.noisy_concepts, r.golden_concepts)
        for r in dataset.records
        if r.noisy_concepts is not None and r.golden_concepts is not None
    ]
    jaccard_stats = {
        "rows": len(jaccards),
        "mean": float(np.mean(jaccards)) if jaccards else None,
        "median": float(np.median(jaccards)) if jaccards else None,
    }

    with_golden = [r for r in dataset.records if r.golden_concepts is not None]
    concept_rates = {}
    if with_golden:
        rates = np.mean([r.golden_concepts for r in with_golden], axis=0)
        concept_rates = {
            name: float(rate) for name, rate in zip(dataset.taxonomy.names, rates)
        }

    n = len(dataset.records)
    fire_counts = {rule_id: 0 for rule_id in dataset.rule_map.entries}
    for r in dataset.records:
        for rule_id in r.triggered_rules:
            if rule_id in fire_counts:
                fire_counts[rule_id] += 1
    rule_rates = {rid: (c / n if n else None) for rid, c in fire_counts.items()}

    return {
        "splits": splits,
        "jaccard": jaccard_stats,
        "concept_positive_rates": concept_rates,
        "rule_firing_rates": rule_rates,
    }


# ---------------------------------------------------------------------------
# Record/array helpers shared by training and evaluation.

def features_matrix(records) -> np.ndarray:
    return np.stack([r.features for r in records]).astype(np.float64)


def decision_labels(records) -> np.ndarray:
    return np.array([r.y_d for r in records], dtype=np.int64)


def decision_onehot(records, class_count: int = 2) -> np.ndarray:
    y = decision_labels(records)
    out = np.zeros((len(records), class_count))
    out[np.arange(len(records)), y] = 1.0
    return out


def concept_targets(records, k: int, source: str):
    """Assemble (targets, mask) for the concept task.

    source selects which vector each record contributes: 'golden', 'noisy',
    'tag' (follow the record's label_source), or 'prefer_golden' (golden
    when present, else noisy). Rows whose chosen vector is missing are
    masked off.
    """
    targets = np.zeros((len(records), k))
    mask = np.zeros(len(records), dtype=bool)
    for i, rec in enumerate(records):
        if source == "golden":
            vec = rec.golden_concepts
        elif source == "noisy":
            vec = rec.noisy_concepts
        elif source == "tag":
            vec = rec.golden_concepts if rec.label_source == "golden" else rec.noisy_concepts
        elif source == "prefer_golden":
            vec = rec.golden_concepts if rec.golden_concepts is not None else rec.noisy_concepts
        else:
            raise ValueError(f"unknown concept source {source!r}")
        if vec is not None:
            targets[i] = vec
            mask[i] = True
    return targets, mask


# ---------------------------------------------------------------------------
# File round-trip.

def _record_to_json(rec: TransactionRecord, taxonomy: ConceptTaxonomy) -> str:
    obj = {
        "id": rec.id,
        "split": rec.split,
        "features": [float(v) for v in rec.features],
        "y_d": rec.y_d,
        "rules": list(rec.triggered_rules),
        "golden_concepts": (
            None if rec.golden_concepts is None else taxonomy.names_for(rec.golden_concepts)
        ),
        "noisy_concepts": (
            None if rec.noisy_concepts is None else taxonomy.names_for(rec.noisy_concepts)
        ),
        "label_source": rec.label_source,
    }
    return json.dumps(obj, separators=(",", ":"))


def _record_from_json(line: str, taxonomy: ConceptTaxonomy) -> TransactionRecord:
    obj = json.loads(line)
    golden = obj.get("golden_concepts")
    noisy = obj.get("noisy_concepts")
    return TransactionRecord(
        id=int(obj["id"]),
        features=np.asarray(obj["features"], dtype=np.float64),
        y_d=int(obj["y_d"]),
        triggered_rules=tuple(obj.get("rules", ())),
        golden_concepts=None if golden is None else taxonomy.vector(golden),
        noisy_concepts=None if noisy is None else taxonomy.vector(noisy),
        split=obj["split"],
        label_source=obj.get("label_source", "noisy"),
    )


def write_dataset(dataset: SyntheticDataset, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out_dir / DATASET_FILE,
        "taxonomy": out_dir / TAXONOMY_FILE,
        "rules": out_dir / RULES_FILE,
        "provenance": out_dir / PROVENANCE_FILE,
    }
    with open(paths["dataset"], "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(_record_to_json(rec, dataset.taxonomy) + "\n")
    weak_labels.write_taxonomy(dataset.taxonomy, paths["taxonomy"])
    weak_labels.write_rule_map(dataset.rule_map, paths["rules"])
    with open(paths["provenance"], "w", encoding="utf-8") as fh:
        json.dump(dataset.provenance, fh, indent=2)
        fh.write("\n")
    return paths


def load_dataset(in_dir) -> SyntheticDataset:
    in_dir = Path(in_dir)
    taxonomy = weak_labels.load_taxonomy(in_dir / TAXONOMY_FILE)
    rule_map = weak_labels.load_rule_map(in_dir / RULES_FILE, taxonomy)
    records = []
    with open(in_dir / DATASET_FILE, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(_record_from_json(line, taxonomy))
    provenance = {}
    prov_path = in_dir / PROVENANCE_FILE
    if prov_path.exists():
        with open(prov_path, "r", encoding="utf-8") as fh:
            provenance = json.load(fh)
    return SyntheticDataset(records, taxonomy, rule_map, provenance)
