"""Line-oriented `key = value` config files and typed builders.

The format is deliberately plain: one assignment per line, `#` comments,
lists comma-separated, layer options separated by `|`. Builders raise
ConfigError naming the offending field.
"""

from __future__ import annotations

from .synthgen import GenConfig
from .training import BatchPlan, FinetuneConfig, StrategyConfig


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    return values


def _get(cfg: dict, key: str, cast, default):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {key!r}: {exc}") from None


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _dims(text: str) -> tuple[int, ...]:
    dims = tuple(int(t) for t in text.split(",") if t.strip())
    if not dims:
        raise ValueError("empty layer list")
    return dims


def _layer_options(text: str) -> list[tuple[int, ...]]:
    return [_dims(part) for part in text.split("|") if part.strip()]


def _names(text: str) -> tuple[str, ...]:
    return tuple(n.strip() for n in text.split(";") if n.strip())


def build_gen_config(cfg: dict, seed: int | None = None) -> GenConfig:
    gen = GenConfig(
        n_train=_get(cfg, "n_train", int, 50_000),
        n_validation=_get(cfg, "n_validation", int, 2_000),
        n_test=_get(cfg, "n_test", int, 2_000),
        feature_dim=_get(cfg, "feature_dim", int, 20),
        concept_count=_get(cfg, "concept_count", int, 14),
        rule_count=_get(cfg, "rule_count", int, 30),
        train_prevalence=_get(cfg, "train_prevalence", float, 0.02),
        validation_prevalence=_get(cfg, "validation_prevalence", float, 0.04),
        test_prevalence=_get(cfg, "test_prevalence", float, 0.04),
        golden_size=_get(cfg, "golden_size", int, 1_300),
        golden_fraud_fraction=_get(cfg, "golden_fraud_fraction", float, 0.37),
        noise_target_jaccard=_get(cfg, "noise_target_jaccard", float, 0.4),
        decision_noise=_get(cfg, "decision_noise", float, 0.25),
        seed=seed if seed is not None else _get(cfg, "seed", int, 0),
        concept_names=_get(cfg, "concept_names", _names, None),
    )
    try:
        gen.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return gen


def build_strategy_config(cfg: dict, variant: str | None = None) -> StrategyConfig:
    variant = variant or _get(cfg, "strategy", str, "supervised")
    variant = variant.replace("-", "_")
    try:
        plan = BatchPlan(
            batch_size=_get(cfg, "batch_size", int, 64),
            fraud_prevalence=_get(cfg, "fraud_prevalence", float, None),
            golden_fraction=_get(cfg, "golden_fraction", float, None),
        )
        finetune = None
        if variant == "two_stage":
            finetune = FinetuneConfig(
                epochs=_get(cfg, "finetune_epochs", int, 8),
                batch_size=_get(cfg, "finetune_batch_size", int, 64),
                learning_rate=_get(cfg, "finetune_learning_rate", float, 0.01),
                freeze_trunk=_get(cfg, "freeze_trunk", _bool, True),
                batch_mode=_get(cfg, "finetune_batch_mode", str, "pure_golden"),
                golden_fraction=_get(cfg, "finetune_golden_fraction", float, 0.1),
            )
        return StrategyConfig(
            variant=variant,
            hidden_dims=_get(cfg, "hidden_layers", _dims, (32,)),
            alpha=_get(cfg, "alpha", float, 0.5),
            learning_rate=_get(cfg, "learning_rate", float, 0.05),
            epochs=_get(cfg, "epochs", int, 20),
            batch_plan=plan,
            finetune=finetune,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def build_grid_spec(cfg: dict):
    from .experiment import GridSpec

    strategy = build_strategy_config(cfg)
    try:
        return GridSpec(
            hidden_layer_options=_get(
                cfg, "hidden_layer_options", _layer_options,
                [(32,), (64, 32), (128, 64, 32)],
            ),
            learning_rates=_get(cfg, "learning_rates", _floats, [0.1, 0.01, 0.001]),
            alphas=_get(cfg, "alphas", _floats, [0.3, 0.5, 0.7]),
            seeds=_get(cfg, "seeds", _ints, [0, 1]),
            strategy=strategy,
            finetune_epochs=_get(cfg, "finetune_epochs_grid", _ints, None),
            finetune_batch_sizes=_get(cfg, "finetune_batch_sizes_grid", _ints, None),
            finetune_learning_rates=_get(cfg, "finetune_learning_rates_grid", _floats, None),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
