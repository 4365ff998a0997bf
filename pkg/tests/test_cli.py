import json

import numpy as np
import pytest

from mrigen.cli import COMMANDS, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, dispatch, replay_argv
from mrigen.imageio import load_image_dir, read_image

PROMPT = "0.3T brain MRI, slice 5, T1 contrast"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert dispatch(["phantom-gen", "--out", str(data), "--per-class", "2", "--seed", "1"]) == EXIT_OK
    run = root / "run"
    argv = ["train", "--data", str(data / "manifest.jsonl"), "--out", str(run), "--max-steps", "2",
            "--batch-size", "2", "--seed", "3", "--learning-rate", "1e-3"]
    assert dispatch(argv) == EXIT_OK
    return root


def test_phantom_gen_counts(tmp_path):
    out = tmp_path / "d"
    assert dispatch(["phantom-gen", "--out", str(out), "--per-class", "20", "--seed", "1"]) == EXIT_OK
    assert len(list(out.glob("*.png"))) == 120
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 120
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "phantom-gen" and manifest["seed"] == 1 and manifest["finished"]


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoints" / "model.bin").exists()
    assert (run / "metrics" / "loss.csv").read_text().startswith("step")
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["config"]["max_steps"] == 2 and manifest["seed"] == 3
    assert "max_steps = 2" in (run / "config.snapshot").read_text()


def test_train_replay_is_byte_identical(workspace):
    run = workspace / "run"
    before = (run / "checkpoints" / "model.bin").read_bytes()
    assert dispatch(replay_argv(run / "run_manifest.json")) == EXIT_OK
    assert (run / "checkpoints" / "model.bin").read_bytes() == before


def test_sample_is_deterministic(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoints" / "model.bin")
    for name in ("a.png", "b.png"):
        argv = ["sample", "--ckpt", ckpt, "--prompt", PROMPT, "--seed", "7", "--out", str(tmp_path / name),
                "--steps", "5"]
        assert dispatch(argv) == EXIT_OK
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert read_image(tmp_path / "a.png").shape == (32, 32)
    out = tmp_path / "many"
    argv = ["sample", "--ckpt", ckpt, "--prompt", PROMPT, "--seed", "7", "--out", str(out), "--n", "3",
            "--steps", "5"]
    assert dispatch(argv) == EXIT_OK
    assert len(list((out / "samples").glob("*.png"))) == 3
    assert (out / "run_manifest.json").exists()


def test_sample_requires_seed(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "checkpoints" / "model.bin")
    code = dispatch(["sample", "--ckpt", ckpt, "--prompt", PROMPT, "--out", str(tmp_path / "x.png")])
    assert code == EXIT_USAGE and "seed" in capsys.readouterr().err


def test_sample_bad_prompt_is_data_error(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "checkpoints" / "model.bin")
    code = dispatch(["sample", "--ckpt", ckpt, "--prompt", "7T brain MRI, slice 5, T1 contrast",
                     "--seed", "1", "--out", str(tmp_path / "x.png")])
    assert code == EXIT_DATA and "7T" in capsys.readouterr().err


def test_eval_fid_identical_sets(workspace, tmp_path, capsys):
    data = str(workspace / "data")
    assert dispatch(["eval-fid", "--real", data, "--gen", data, "--out", str(tmp_path)]) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics" / "metrics.json").read_text())
    assert metrics["fid_tinyconv"] <= 1e-6
    assert (tmp_path / "metrics" / "features_real.bin").exists()


def test_eval_msssim(workspace, tmp_path):
    data = str(workspace / "data")
    assert dispatch(["eval-msssim", "--images", data, "--pairs", "5", "--out", str(tmp_path)]) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics" / "metrics.json").read_text())
    assert 0 < metrics["ms_ssim_diversity"] <= 1 and metrics["n_pairs"] == 5
    assert len((tmp_path / "metrics" / "msssim_pairs.csv").read_text().splitlines()) == 6


def test_classify_writes_reports(workspace, tmp_path):
    m = str(workspace / "data" / "manifest.jsonl")
    argv = ["classify", "--real", m, "--alt", m, "--synthetic", m, "--test", m, "--seeds", "0",
            "--epochs", "2", "--out", str(tmp_path)]
    assert dispatch(argv) == EXIT_OK
    doc = json.loads((tmp_path / "reports" / "classification.json").read_text())
    assert len(doc["rows"]) == 4
    assert all(np.asarray(r["confusion"]).sum() == 12 for r in doc["rows"])
    assert (tmp_path / "reports" / "comparison.csv").exists()


def write_metrics(directory, **fields):
    (directory / "metrics").mkdir(parents=True)
    (directory / "metrics" / "metrics.json").write_text(json.dumps(fields))


def test_report_renders_fixture(tmp_path, capsys):
    write_metrics(tmp_path / "a", experiment="Original", config="SD", fid_tinyconv=317.35,
                  fid_external=39.94, ms_ssim_diversity=0.05)
    write_metrics(tmp_path / "b", experiment="Fine-tuned", config="UNet", fid_tinyconv=1.0)
    out = tmp_path / "out"
    assert dispatch(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "Original SD  317.35  39.94  0.05" in lines
    assert lines.index("Original SD  317.35  39.94  0.05") < lines.index("Fine-tuned UNet  1.00  -  -")
    csv_lines = (out / "reports" / "report.csv").read_text().splitlines()
    assert len(csv_lines) == 3 and csv_lines[1].startswith("Original,SD,317.35")


def test_report_empty_and_strict(tmp_path, capsys):
    assert dispatch(["report"]) == EXIT_OK
    assert "no runs" in capsys.readouterr().err
    (tmp_path / "bad" / "metrics").mkdir(parents=True)
    (tmp_path / "bad" / "metrics" / "metrics.json").write_text("{oops")
    assert dispatch(["report", str(tmp_path / "bad")]) == EXIT_OK
    assert "corrupt" in capsys.readouterr().err
    assert dispatch(["report", str(tmp_path / "bad"), "--strict"]) == EXIT_DATA


def test_usage_errors_suggest(capsys):
    assert dispatch(["sampel"]) == EXIT_USAGE
    assert "did you mean 'sample'" in capsys.readouterr().err
    assert dispatch(["phantom-gen", "--out", "x", "--per-class", "1", "--seed", "1", "--sede", "2"]) == EXIT_USAGE
    assert "did you mean '--seed'" in capsys.readouterr().err
    assert dispatch([]) == EXIT_USAGE


def test_help_lists_every_command(capsys):
    assert dispatch(["--help"]) == EXIT_OK
    text = capsys.readouterr().out
    for name in COMMANDS:
        assert f"{name} " in text


def test_missing_data_is_data_error(tmp_path, capsys):
    code = dispatch(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o"), "--seed", "1"])
    assert code == EXIT_DATA
    assert (tmp_path / "o" / "run_manifest.json").exists()


def test_divergence_is_numeric_error(workspace, tmp_path, capsys):
    argv = ["train", "--data", str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path),
            "--max-steps", "5", "--batch-size", "2", "--seed", "1", "--learning-rate", "1e30",
            "--lr-schedule", "constant"]
    assert dispatch(argv) == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err
    assert (tmp_path / "checkpoints" / "last_finite.bin").exists()


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("max_steps = 1\nbatch_size = 2\nseed = 4\n")
    out = tmp_path / "o"
    argv = ["train", "--data", str(workspace / "data" / "manifest.jsonl"), "--out", str(out),
            "--config", str(cfg), "--seed", "9"]
    assert dispatch(argv) == EXIT_OK
    snap = json.loads((out / "run_manifest.json").read_text())["config"]
    assert (snap["max_steps"], snap["batch_size"], snap["seed"]) == (1, 2, 9)


def test_preprocess_retains_slices(workspace, tmp_path):
    argv = ["preprocess", "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path),
            "--retain", "1"]
    assert dispatch(argv) == EXIT_OK
    imgs = load_image_dir(tmp_path)
    assert imgs.shape[1:] == (32, 32) and 0 < len(imgs) <= 12
