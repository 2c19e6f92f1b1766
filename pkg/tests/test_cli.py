import pandas as pd
import pytest

from scripts.artifacts import load_tensor_dump, save_tensor_dump
from scripts.cli import main
from scripts.evaluation import EvalReport, ReportWriter
from scripts.nn_models import ModelCheckpoint


@pytest.fixture
def checkpoints(tmp_path, classifier, small_dae):
    return {
        "classifier": str(ModelCheckpoint.save(classifier, tmp_path / "clf.ckpt")),
        "dae": str(ModelCheckpoint.save(small_dae, tmp_path / "dae.ckpt")),
    }


@pytest.fixture
def dump(tmp_path, digit_images):
    return str(save_tensor_dump(digit_images.images, tmp_path / "clean.bin", labels=digit_images.labels))


def test_missing_data_dir_fails_cleanly(tmp_path, checkpoints):
    code = main([
        "fit-stats", "--dataset", "mnist", "--data-dir", str(tmp_path / "absent"),
        "--dae", checkpoints["dae"], "--out", str(tmp_path / "stats.txt"),
    ])
    assert code == 1


def test_usage_error_exit_code():
    assert main(["attack", "--kind", "nonsense"]) == 2


def test_attack_writes_labelled_dump(tmp_path, checkpoints, dump, digit_images):
    out = tmp_path / "fgsm.bin"
    code = main([
        "attack", "--kind", "fgsm", "--eps", "0.1", "--model", checkpoints["classifier"],
        "--dataset", "mnist", "--in", dump, "--out", str(out),
    ])
    assert code == 0
    images, labels, sidecar = load_tensor_dump(out)
    assert images.shape == digit_images.images.shape
    assert labels.tolist() == digit_images.labels.tolist()
    assert sidecar["kind"] == "fgsm"
    assert sidecar["epsilon"] == 0.1


def test_purify_writes_dump(tmp_path, checkpoints, dump, digit_images):
    out = tmp_path / "purified.bin"
    code = main([
        "-q", "purify", "--variant", "B", "--iters", "2", "--dae", checkpoints["dae"],
        "--classifier", checkpoints["classifier"], "--in", dump, "--out", str(out),
    ])
    assert code == 0
    images, _, sidecar = load_tensor_dump(out)
    assert images.shape == digit_images.images.shape
    assert sidecar["variant"] == "B"


def test_purify_without_stats_fails(tmp_path, checkpoints, dump):
    code = main([
        "purify", "--variant", "E", "--dae", checkpoints["dae"], "--in", dump, "--out", str(tmp_path / "p.bin"),
    ])
    assert code == 1


def test_report_counter_table(tmp_path, capsys):
    grid = pd.DataFrame([[0.1, 0.2, 0.6]], index=["ca"], columns=["none", "direct", "purify-B"])
    csv_path, _ = ReportWriter(tmp_path).emit_report(
        EvalReport(grid, {"attacks": [{"kind": "counter_a", "label": "ca"}]}), fmt="csv"
    )
    assert main(["report", f"mnist={csv_path}", "--counter-table"]) == 0
    assert "Best" in capsys.readouterr().out
