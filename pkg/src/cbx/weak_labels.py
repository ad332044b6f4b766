"""Distant supervision: map triggered expert rules to noisy concept labels.

A rule-to-concept map is a validated one-to-many mapping from rule IDs to
concept names. Annotating a record takes the union of the concept sets of
its triggered rules; rules are positive evidence only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConceptTaxonomy:
    """Ordered concept names; the order fixes the index of every label vector."""

    names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("taxonomy must contain at least one concept")
        if any(not n.strip() for n in names):
            raise ValueError("taxonomy contains an empty concept name")
        if len(set(names)) != len(names):
            raise ValueError("taxonomy concept names must be unique")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    @property
    def k(self) -> int:
        return len(self.names)

    def vector(self, concept_names) -> np.ndarray:
        """0/1 vector with the given concepts set, in taxonomy order."""
        v = np.zeros(self.k, dtype=np.int8)
        for name in concept_names:
            v[self.index[name]] = 1
        return v

    def names_for(self, vector) -> list[str]:
        return [self.names[i] for i in np.flatnonzero(np.asarray(vector))]


@dataclass
class RuleEntry:
    description: str
    concepts: tuple[str, ...]


@dataclass
class RuleConceptMap:
    """rule_id -> (description, mapped concept names), insertion ordered."""

    entries: dict[str, RuleEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, rule_id) -> bool:
        return rule_id in self.entries


def load_taxonomy(path) -> ConceptTaxonomy:
    """One concept name per line, order significant; blank lines ignored."""
    with open(path, "r", encoding="utf-8") as fh:
        names = [line.rstrip("\n") for line in fh]
    return ConceptTaxonomy(tuple(n for n in names if n.strip()))


def write_taxonomy(taxonomy: ConceptTaxonomy, path):
    with open(path, "w", encoding="utf-8") as fh:
        for name in taxonomy.names:
            fh.write(name + "\n")


def parse_rule_map(lines, taxonomy: ConceptTaxonomy) -> RuleConceptMap:
    """Parse `rule_id | description | Concept A; Concept B` lines.

    Lines starting with '#' and blank lines are skipped. Every concept is
    resolved against the taxonomy.
    """
    entries: dict[str, RuleEntry] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise ValueError(
                f"line {lineno}: expected 'rule_id | description | concepts', got {raw!r}"
            )
        rule_id, description, concept_field = parts
        if not rule_id:
            raise ValueError(f"line {lineno}: empty rule_id")
        if rule_id in entries:
            raise ValueError(f"line {lineno}: duplicate rule_id {rule_id!r}")
        concepts = tuple(c.strip() for c in concept_field.split(";") if c.strip())
        if not concepts:
            raise ValueError(f"line {lineno}: rule {rule_id!r} maps to no concepts")
        for c in concepts:
            if c not in taxonomy.index:
                raise ValueError(
                    f"line {lineno}: rule {rule_id!r} maps to unknown concept {c!r}"
                )
        entries[rule_id] = RuleEntry(description, concepts)
    return RuleConceptMap(entries)


def load_rule_map(path, taxonomy: ConceptTaxonomy) -> RuleConceptMap:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rule_map(fh, taxonomy)


def write_rule_map(rule_map: RuleConceptMap, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rule_id, entry in rule_map.entries.items():
            fh.write(f"{rule_id} | {entry.description} | {'; '.join(entry.concepts)}\n")


def annotate(triggered_rules, rule_map: RuleConceptMap, taxonomy: ConceptTaxonomy,
             strict: bool = False) -> np.ndarray:
    """Union of the concept sets of all triggered mapped rules, as a 0/1 vector.

    Unknown rule IDs (e.g. retired rules still present in logs) are skipped
    unless strict is set. The result does not depend on iteration order.
    """
    v = np.zeros(taxonomy.k, dtype=np.int8)
    for rule_id in triggered_rules:
        entry = rule_map.entries.get(rule_id)
        if entry is None:
            if strict:
                raise KeyError(f"unknown rule id {rule_id!r}")
            continue
        for c in entry.concepts:
            v[taxonomy.index[c]] = 1
    return v


def annotate_dataset(records, rule_map: RuleConceptMap, taxonomy: ConceptTaxonomy,
                     strict: bool = False):
    """Fill noisy concept vectors for every record that lacks golden ones.

    Records that already carry golden concepts are left untouched (golden
    labels are never overwritten). Everything else gets the rule-union
    vector and a 'noisy' label_source tag. Returns the same record list.
    """
    unknown = 0
    for rec in records:
        if rec.golden_concepts is not None and rec.label_source == "golden":
            continue
        if not strict:
            unknown += sum(1 for r in rec.triggered_rules if r not in rule_map)
        rec.noisy_concepts = annotate(rec.triggered_rules, rule_map, taxonomy, strict)
        rec.label_source = "noisy"
    if unknown:
        log.warning("annotate_dataset: skipped %d unknown triggered rule ids", unknown)
    return records


def jaccard(a, b) -> float:
    """|a & b| / |a | b| over set bits; 1.0 when both vectors are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
