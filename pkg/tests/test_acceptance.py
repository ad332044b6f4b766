"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The directional
comparison (criterion 7) regenerates the benchmark dataset and trains all
strategies for five master seeds; everything is seeded, so its outcome is
reproducible run to run.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import make_records

from cbx.cli import main as cli_main
from cbx.experiment import run_benchmark_comparison
from cbx.metrics import (
    average_precision,
    mean_average_precision,
    pareto_front,
    recall_at_fpr,
    threshold_at_fpr,
)
from cbx.model import build_model, load_model, loss_gradients, meta_loss, predict
from cbx.training import (
    BatchPlan,
    FinetuneConfig,
    StrategyConfig,
    make_batches,
    pretrain,
    run_strategy,
    train_hybrid,
    train_supervised,
)
from cbx.weak_labels import ConceptTaxonomy, annotate, parse_rule_map

from test_metrics import ap_oracle, confusion_oracle, dominance_oracle, sweep_oracle


@contextmanager
def criterion(num, name):
    try:
        yield
    except BaseException:
        print(f"criterion {num} ({name}): FAIL")
        raise
    print(f"criterion {num} ({name}): PASS")


def model_bytes(m):
    return b"".join(l.weights.tobytes() + l.bias.tobytes() for l in m.layers())


# ---------------------------------------------------------------------------

def relu_kink_distance(model, x):
    """Smallest |pre-activation| over the relu trunk; central differences
    are invalid within the step size of a kink."""
    closest = np.inf
    a = x
    for layer in model.trunk:
        z = a @ layer.weights.T + layer.bias
        closest = min(closest, float(np.abs(z).min()))
        a = np.maximum(z, 0.0)
    return closest


def test_criterion_1_gradient_oracle():
    with criterion(1, "gradient oracle"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        h = 1e-5
        names = ["Concept A", "Concept B", "Concept C", "Concept D"]
        for trial in range(20):
            while True:
                depth = int(rng.integers(1, 3))
                dims = tuple(int(rng.integers(2, 9)) for _ in range(depth))
                m = build_model(6, dims, names, class_count=2, seed=int(rng.integers(2**31)))
                n = int(rng.integers(2, 6))
                x = rng.standard_normal((n, 6))
                if relu_kink_distance(m, x) > 1e-3:
                    break
            y_d = np.zeros((n, 2))
            y_d[np.arange(n), rng.integers(0, 2, n)] = 1.0
            y_e = rng.integers(0, 2, (n, 4)).astype(float)
            mask = np.ones(n, dtype=bool)
            for alpha in (0.0, 0.3, 1.0):
                grads, _ = loss_gradients(m, x, y_d, y_e, mask, alpha)

                def total():
                    return meta_loss(predict(m, x), y_d, y_e, mask, alpha)[0]

                for li, layer in enumerate(m.layers()):
                    for arr, g in ((layer.weights, grads.weight_grads[li]),
                                   (layer.bias, grads.bias_grads[li])):
                        it = np.nditer(arr, flags=["multi_index"])
                        for _ in it:
                            ix = it.multi_index
                            orig = arr[ix]
                            arr[ix] = orig + h
                            lp = total()
                            arr[ix] = orig - h
                            lm = total()
                            arr[ix] = orig
                            fd = (lp - lm) / (2 * h)
                            rel = abs(g[ix] - fd) / max(1.0, abs(fd))
                            assert rel < 1e-4, (
                                f"trial {trial} alpha {alpha} layer {li}: rel err {rel}"
                            )
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"gradient oracle took {elapsed:.1f}s"


def test_criterion_2_meta_loss_exactness_and_gradient_flow():
    with criterion(2, "meta-loss exactness and bottleneck backflow"):
        rng = np.random.default_rng(77)
        names = ["Concept A", "Concept B", "Concept C", "Concept D"]
        m = build_model(5, (6,), names, seed=5)
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            x = rng.standard_normal((n, 5))
            y_d = np.zeros((n, 2))
            y_d[np.arange(n), rng.integers(0, 2, n)] = 1.0
            y_e = rng.integers(0, 2, (n, 4)).astype(float)
            mask = np.ones(n, dtype=bool)
            alpha = float(rng.random())
            total, dec, exp = meta_loss(predict(m, x), y_d, y_e, mask, alpha)
            assert abs(total - (alpha * dec + (1 - alpha) * exp)) <= 1e-15

        x = rng.standard_normal((8, 5))
        y_d = np.zeros((8, 2))
        y_d[np.arange(8), rng.integers(0, 2, 8)] = 1.0
        y_e = rng.integers(0, 2, (8, 4)).astype(float)
        mask = np.ones(8, dtype=bool)
        grads0, _ = loss_gradients(m, x, y_d, y_e, mask, 0.0)
        assert np.all(grads0.weight_grads[-1] == 0.0)
        assert np.all(grads0.bias_grads[-1] == 0.0)
        grads1, _ = loss_gradients(m, x, y_d, y_e, mask, 1.0)
        assert np.any(np.abs(grads1.weight_grads[-2]) > 1e-12)


def test_criterion_3_metric_oracles():
    with criterion(3, "metric oracles"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(11)

        for _ in range(500):
            n = int(rng.integers(2, 51))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, n)
            if not (labels == 0).any():
                labels[0] = 0
            target = float(rng.choice([0.0, 0.05, 0.1, 0.25, 0.5]))
            t = threshold_at_fpr(scores, labels, target)
            t_star, best_recall = sweep_oracle(scores, labels, target)
            assert t == t_star
            if (labels == 1).any():
                recall, fpr = recall_at_fpr(scores, labels, t)
                assert recall == best_recall and fpr <= target

        for _ in range(500):
            n = int(rng.integers(1, 51))
            scores = rng.random(n)
            labels = rng.integers(0, 2, n)
            if not (labels == 1).any():
                labels[0] = 1
            thr = float(rng.random())
            assert recall_at_fpr(scores, labels, thr) == confusion_oracle(scores, labels, thr)

        for _ in range(500):
            n = int(rng.integers(1, 51))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, n)
            got = average_precision(scores, labels)
            want = ap_oracle(scores.tolist(), labels.tolist())
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-12)

        for _ in range(500):
            n = int(rng.integers(1, 51))
            k = int(rng.integers(1, 9))
            scores = np.round(rng.random((n, k)), 2)
            labels = rng.integers(0, 2, (n, k))
            labels[rng.integers(0, n)] = 1
            got_map, got_aps, excluded = mean_average_precision(scores, labels)
            want = [ap_oracle(scores[:, j].tolist(), labels[:, j].tolist()) for j in range(k)]
            included = [w for w in want if w is not None]
            assert excluded == sum(1 for w in want if w is None)
            assert got_map == pytest.approx(float(np.mean(included)), abs=1e-12)

        for _ in range(500):
            n = int(rng.integers(1, 51))
            pts = [
                (float(a), float(b))
                for a, b in zip(np.round(rng.random(n), 1), np.round(rng.random(n), 1))
            ]
            assert pareto_front(pts) == dominance_oracle(pts)

        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0, f"metric oracles took {elapsed:.1f}s"


def test_criterion_4_distant_supervision():
    with criterion(4, "distant supervision"):
        taxonomy = ConceptTaxonomy(
            ("Suspicious Items", "Suspicious Customer", "Suspicious Payment",
             "High Velocity", "Odd Hours")
        )
        rule_map = parse_rule_map(
            [
                "risky_product_styles | Order contains risky product styles. | Suspicious Items",
                "n_cards_last_week | User tried n different cards last week. | Suspicious Customer; Suspicious Payment",
                "night_burst | Burst of orders at night. | Odd Hours; High Velocity",
            ],
            taxonomy,
        )
        v = annotate({"risky_product_styles", "n_cards_last_week"}, rule_map, taxonomy)
        assert set(taxonomy.names_for(v)) == {
            "Suspicious Items", "Suspicious Customer", "Suspicious Payment",
        }
        v1 = annotate({"risky_product_styles"}, rule_map, taxonomy)
        assert taxonomy.names_for(v1) == ["Suspicious Items"]

        rng = np.random.default_rng(4)
        ids = list(rule_map.entries) + ["retired_a", "retired_b"]
        for _ in range(10_000):
            size1 = int(rng.integers(0, len(ids) + 1))
            s1 = set(rng.choice(ids, size=size1, replace=False).tolist())
            size2 = int(rng.integers(0, len(ids) + 1))
            s2 = set(rng.choice(ids, size=size2, replace=False).tolist())
            a1 = annotate(s1, rule_map, taxonomy)
            a12 = annotate(s1 | s2, rule_map, taxonomy)
            assert np.all(a12 >= a1)  # monotone under union
            assert np.array_equal(annotate(s1, rule_map, taxonomy), a1)  # idempotent


def test_criterion_5_batch_composition():
    with criterion(5, "batch composition"):
        records = make_records(4000, fraud_rate=0.45, golden_rate=0.2, seed=5)
        rng = np.random.default_rng(6)
        seen = 0
        while seen < 1000:
            for idx in make_batches(records, BatchPlan(100, fraud_prevalence=0.37), rng):
                assert len(idx) == 100
                assert sum(records[i].y_d for i in idx) == 37
                seen += 1
                if seen == 1000:
                    break
        seen = 0
        while seen < 1000:
            for idx in make_batches(records, BatchPlan(100, golden_fraction=0.10), rng):
                assert len(idx) == 100
                assert sum(records[i].label_source == "golden" for i in idx) == 10
                seen += 1
                if seen == 1000:
                    break


def test_criterion_6_freeze_contract(tmp_path):
    with criterion(6, "freeze contract"):
        records = make_records(400, fraud_rate=0.3, golden_rate=0.3, seed=6)
        cfg = StrategyConfig(
            variant="two_stage",
            hidden_dims=(6, 5),
            alpha=0.5,
            learning_rate=0.1,
            epochs=3,
            batch_plan=BatchPlan(32),
            finetune=FinetuneConfig(
                epochs=4, batch_size=16, learning_rate=0.1, freeze_trunk=True
            ),
        )
        res = run_strategy(
            cfg, train_records=records, input_dim=5,
            concept_names=["Concept A", "Concept B", "Concept C", "Concept D"], seed=7,
        )
        from cbx.model import save_model

        pre_path = tmp_path / "pre.ckpt"
        save_model(res.pretrained, pre_path)
        pre_loaded = load_model(pre_path)
        for tuned, base in zip(res.model.trunk, pre_loaded.trunk):
            assert tuned.weights.tobytes() == base.weights.tobytes()
            assert tuned.bias.tobytes() == base.bias.tobytes()
        assert res.model.explain_head.weights.tobytes() != pre_loaded.explain_head.weights.tobytes()


def test_criterion_8_determinism_cli(tmp_path):
    with criterion(8, "rerun determinism (gen-data, train, grid)"):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(
            "n_train = 2500\nn_validation = 500\nn_test = 500\n"
            "feature_dim = 12\nconcept_count = 6\nrule_count = 12\ngolden_size = 120\n"
        )
        for sub in ("d1", "d2"):
            assert cli_main([
                "gen-data", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / sub)
            ]) == 0
        for name in ("dataset.jsonl", "taxonomy.txt", "rules.txt", "provenance.json"):
            assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()

        tcfg = tmp_path / "train.cfg"
        tcfg.write_text(
            "hidden_layers = 6\nalpha = 0.5\nlearning_rate = 0.1\nepochs = 2\n"
            "batch_size = 32\nfinetune_epochs = 2\nfinetune_batch_size = 16\n"
            "finetune_learning_rate = 0.05\n"
        )
        for sub in ("t1", "t2"):
            assert cli_main([
                "train", "--data", str(tmp_path / "d1"), "--strategy", "two-stage",
                "--config", str(tcfg), "--seed", "4", "--out", str(tmp_path / sub),
            ]) == 0
        for name in ("model.pretrain.ckpt", "model.final.ckpt"):
            assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t2" / name).read_bytes()

        gcfg = tmp_path / "grid.cfg"
        gcfg.write_text(
            "hidden_layer_options = 4 | 5\nlearning_rates = 0.1\nalphas = 0.5\n"
            "seeds = 0\nepochs = 2\nbatch_size = 32\nfraud_prevalence = 0.37\n"
        )
        for sub in ("g1", "g2"):
            assert cli_main([
                "grid", "--data", str(tmp_path / "d1"), "--config", str(gcfg),
                "--out", str(tmp_path / sub),
            ]) == 0
        assert (tmp_path / "g1" / "results.csv").read_bytes() == (
            tmp_path / "g2" / "results.csv"
        ).read_bytes()


def test_criterion_9_endpoint_equivalences():
    with criterion(9, "endpoint equivalences"):
        golden = make_records(256, golden_rate=1.0, seed=9, noisy_equals_golden=True)
        cfg_sup = StrategyConfig(
            variant="supervised", hidden_dims=(6,), alpha=0.5,
            learning_rate=0.05, epochs=4, batch_plan=BatchPlan(16),
        )
        cfg_hyb = StrategyConfig(
            variant="hybrid", hidden_dims=(6,), alpha=0.5,
            learning_rate=0.05, epochs=4, batch_plan=BatchPlan(16, golden_fraction=1.0),
        )
        names = ["Concept A", "Concept B", "Concept C", "Concept D"]
        m_sup = build_model(5, (6,), names, seed=90)
        m_hyb = build_model(5, (6,), names, seed=90)
        m_pre = build_model(5, (6,), names, seed=90)
        train_supervised(m_sup, golden, cfg_sup, seed=91)
        train_hybrid(m_hyb, golden, [], cfg_hyb, seed=91)
        pretrain(m_pre, golden, cfg_sup, seed=91)
        assert model_bytes(m_hyb) == model_bytes(m_sup)
        assert model_bytes(m_pre) == model_bytes(m_sup)


def test_criterion_7_directional_reproduction():
    with criterion(7, "directional reproduction on the synthetic benchmark"):
        t0 = time.perf_counter()
        results = run_benchmark_comparison(seeds=range(5))
        assert len(results) == 5

        def wins(a, b, idx):
            return sum(1 for r in results if r[a][idx] > r[b][idx])

        two_stage_wins = wins("two_stage", "supervised", 0)
        hybrid_wins = wins("hybrid", "supervised", 0)
        finetune_map_wins = wins("two_stage", "pretrained_base", 1)
        map_01 = float(np.mean([r["finetune_hybrid_0.1"][1] for r in results]))
        map_05 = float(np.mean([r["finetune_hybrid_0.5"][1] for r in results]))
        elapsed = time.perf_counter() - t0

        print(f"  (a) two-stage recall wins vs supervised: {two_stage_wins}/5")
        print(f"  (a) hybrid recall wins vs supervised:    {hybrid_wins}/5")
        print(f"  (b) fine-tune mAP wins vs base:          {finetune_map_wins}/5")
        print(f"  (c) hybrid-ft mean mAP gf=0.1 {map_01:.4f} -> gf=0.5 {map_05:.4f}")
        print(f"  runtime: {elapsed:.0f}s")

        assert two_stage_wins >= 4, f"two-stage beat supervised in only {two_stage_wins}/5 seeds"
        assert hybrid_wins >= 4, f"hybrid beat supervised in only {hybrid_wins}/5 seeds"
        assert finetune_map_wins >= 4, f"fine-tuning improved mAP in only {finetune_map_wins}/5 seeds"
        assert map_05 >= map_01, "raising the golden fraction decreased mean mAP"
        assert elapsed < 600.0, f"benchmark comparison took {elapsed:.0f}s"
