import json
import os

import numpy as np
import pytest

from cbx import synthgen
from cbx.cli import main
from cbx.model import load_model
from cbx.synthgen import GenConfig, generate, write_dataset


GEN_CFG = """
n_train = 2500
n_validation = 500
n_test = 500
feature_dim = 12
concept_count = 6
rule_count = 12
golden_size = 120
"""

TRAIN_CFG = """
hidden_layers = 6
alpha = 0.5
learning_rate = 0.1
epochs = 2
batch_size = 32
"""

TWO_STAGE_CFG = TRAIN_CFG + """
finetune_epochs = 2
finetune_batch_size = 16
finetune_learning_rate = 0.05
freeze_trunk = true
"""

GRID_CFG = TRAIN_CFG + """
hidden_layer_options = 4 | 5
learning_rates = 0.1
alphas = 0.5
seeds = 0
fraud_prevalence = 0.37
"""


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    summary = None
    for line in out.out.strip().splitlines():
        try:
            summary = json.loads(line)
        except json.JSONDecodeError:
            continue
    return code, summary, out.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = GenConfig(
        n_train=2500, n_validation=500, n_test=500,
        feature_dim=12, concept_count=6, rule_count=12,
        golden_size=120, seed=9,
    )
    write_dataset(generate(cfg), out)
    return out


def write_cfg(tmp_path, text, name="c.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_gen_data_deterministic_reruns(tmp_path, capsys):
    cfg = write_cfg(tmp_path, GEN_CFG)
    code1, summary, _ = run_cli(
        capsys, "gen-data", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "a")
    )
    code2, _, _ = run_cli(
        capsys, "gen-data", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "b")
    )
    assert code1 == 0 and code2 == 0
    assert summary["status"] == "ok" and summary["records"] == 3500
    for name in ("dataset.jsonl", "taxonomy.txt", "rules.txt", "provenance.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_invalid_config_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "n_train = banana\n")
    code, _, err = run_cli(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "x"))
    assert code == 2
    assert "n_train" in err


def test_train_supervised_writes_checkpoint_and_trace(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, TRAIN_CFG)
    out = tmp_path / "run"
    code, summary, _ = run_cli(
        capsys, "train", "--data", str(data_dir), "--strategy", "supervised",
        "--config", cfg, "--seed", "3", "--out", str(out),
    )
    assert code == 0
    assert (out / "model.final.ckpt").exists()
    assert (out / "trace.supervised.csv").exists()
    assert summary["strategy"] == "supervised"


def test_train_two_stage_writes_both_checkpoints(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, TWO_STAGE_CFG)
    out = tmp_path / "two"
    code, summary, _ = run_cli(
        capsys, "train", "--data", str(data_dir), "--strategy", "two-stage",
        "--config", cfg, "--seed", "3", "--out", str(out),
    )
    assert code == 0
    assert (out / "model.pretrain.ckpt").exists()
    assert (out / "model.final.ckpt").exists()
    assert (out / "trace.pretrain.csv").exists()
    assert (out / "trace.finetune.csv").exists()
    assert summary["checkpoints"]["final"].endswith("model.final.ckpt")


def test_train_rerun_checkpoint_byte_identical(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, TRAIN_CFG)
    for sub in ("r1", "r2"):
        code, _, _ = run_cli(
            capsys, "train", "--data", str(data_dir), "--strategy", "hybrid",
            "--config", write_cfg(tmp_path, TRAIN_CFG + "golden_fraction = 0.1\n", "h.cfg"),
            "--seed", "5", "--out", str(tmp_path / sub),
        )
        assert code == 0
    assert (tmp_path / "r1" / "model.final.ckpt").read_bytes() == (
        tmp_path / "r2" / "model.final.ckpt"
    ).read_bytes()


def test_evaluate_degenerate_model_reports_finite_metrics(tmp_path, capsys, data_dir):
    # alpha = 1 with a vanishing learning rate: barely-trained model must
    # still evaluate to finite metrics
    cfg = write_cfg(tmp_path, TRAIN_CFG.replace("alpha = 0.5", "alpha = 1.0")
                    .replace("learning_rate = 0.1", "learning_rate = 1e-9"))
    out = tmp_path / "degen"
    code, _, _ = run_cli(
        capsys, "train", "--data", str(data_dir), "--strategy", "supervised",
        "--config", cfg, "--seed", "1", "--out", str(out),
    )
    assert code == 0
    code, summary, _ = run_cli(
        capsys, "evaluate", "--data", str(data_dir),
        "--checkpoint", str(out / "model.final.ckpt"),
        "--out", str(out / "report.csv"),
    )
    assert code == 0
    assert np.isfinite(summary["recall_at_fpr"])
    assert np.isfinite(summary["map"])
    assert (out / "report.csv").exists()


def test_evaluate_checkpoint_round_trip_matches_in_memory(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, TRAIN_CFG)
    out = tmp_path / "same"
    run_cli(capsys, "train", "--data", str(data_dir), "--strategy", "supervised",
            "--config", cfg, "--seed", "8", "--out", str(out))
    model = load_model(out / "model.final.ckpt")
    dataset = synthgen.load_dataset(data_dir)
    from cbx.metrics import evaluate_model

    want = evaluate_model(model, dataset.split("validation"), dataset.split("test"))
    code, summary, _ = run_cli(
        capsys, "evaluate", "--data", str(data_dir),
        "--checkpoint", str(out / "model.final.ckpt"),
    )
    assert code == 0
    assert summary["recall_at_fpr"] == pytest.approx(want.recall_at_fpr)
    assert summary["map"] == pytest.approx(want.mean_ap)


def test_annotate_roundtrip(tmp_path, capsys, data_dir):
    out = tmp_path / "annotated"
    code, summary, _ = run_cli(
        capsys, "annotate", "--data", str(data_dir), "--out", str(out)
    )
    assert code == 0
    assert summary["records"] == 3500
    reloaded = synthgen.load_dataset(out)
    assert all(r.noisy_concepts is not None for r in reloaded.records)


def test_grid_pareto_plot_pipeline(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, GRID_CFG, "grid.cfg")
    out = tmp_path / "grid"
    code, summary, _ = run_cli(
        capsys, "grid", "--data", str(data_dir), "--config", cfg, "--out", str(out)
    )
    assert code == 0
    assert summary["runs"] == 2 and summary["completed"] == 2
    results = out / "results.csv"

    code, summary, _ = run_cli(
        capsys, "pareto", "--results", str(results), "--out", str(tmp_path / "annotated.csv")
    )
    assert code == 0
    assert summary["runs"] == 2 and len(summary["front"]) >= 1

    svg = tmp_path / "plot.svg"
    code, summary, _ = run_cli(capsys, "plot", "--results", str(results), "--out", str(svg))
    assert code == 0
    assert svg.exists() and svg.read_text().startswith("<?xml")


def test_grid_rerun_results_byte_identical(tmp_path, capsys, data_dir):
    cfg = write_cfg(tmp_path, GRID_CFG, "grid.cfg")
    for sub in ("g1", "g2"):
        code, _, _ = run_cli(
            capsys, "grid", "--data", str(data_dir), "--config", cfg,
            "--out", str(tmp_path / sub),
        )
        assert code == 0
    assert (tmp_path / "g1" / "results.csv").read_bytes() == (
        tmp_path / "g2" / "results.csv"
    ).read_bytes()


def test_unknown_data_dir_is_one_line_error(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")
    )
    assert code == 1
    assert len(err.strip().splitlines()) == 1


def test_module_entry_point():
    import subprocess, sys

    proc = subprocess.run(
        [sys.executable, "-m", "cbx", "--help"], capture_output=True, text=True,
        cwd=os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
