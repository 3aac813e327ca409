"""End-to-end CLI runs, in process via main(argv), checking the exit-code
contract (0 ok / 1 runtime / 2 validation) and the emitted artifacts."""

import csv
import json

import numpy as np
import pytest

from r3d.cli import main

TINY_TRAIN = dict(
    epochs=2, batch_size=4, t_o=2, t_a=4, n_p=32, n_q=4,
    encoder_preset="tiny", decoder_depth=1, schedule_k=5, lr=1e-3,
    execute_steps=4,
    augment=dict(coord_noise_sigma=0.0, proprio_noise_sigma=0.0),
)


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("demos")
    assert main(["gen-demos", "--task", "reach", "--n", "3", "--seed", "7",
                 "--out", str(path), "--n-p", "32"]) == 0
    return path


@pytest.fixture(scope="module")
def train_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.json"
    path.write_text(json.dumps(TINY_TRAIN))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, demo_dir, train_cfg_path):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(train_cfg_path), "--data", str(demo_dir),
                 "--out", str(out), "--seed", "0"]) == 0
    return out


def test_gen_demos_writes_store_and_is_seed_idempotent(demo_dir, tmp_path):
    manifest = json.loads((demo_dir / "manifest.json").read_text())
    assert manifest["task_id"] == "reach" and len(manifest["episodes"]) == 3
    assert main(["gen-demos", "--task", "reach", "--n", "3", "--seed", "7",
                 "--out", str(tmp_path), "--n-p", "32"]) == 0
    for name in manifest["episodes"] + ["manifest.json"]:
        assert (tmp_path / name).read_bytes() == (demo_dir / name).read_bytes()


def test_gen_demos_validation_exit_2(tmp_path, capsys):
    assert main(["gen-demos", "--task", "reach", "--n", "0", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_train_artifacts(run_dir, capsys):
    assert (run_dir / "checkpoint.r3dc").is_file()
    assert (run_dir / "metrics.csv").is_file()
    header = (run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,split,loss,loss_joint,loss_ee,wall_ms"


def test_train_unknown_config_key_exit_2(tmp_path, demo_dir, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(dict(TINY_TRAIN, optimiser="sgd")))
    assert main(["train", "--config", str(bad), "--data", str(demo_dir),
                 "--out", str(tmp_path / "o")]) == 2
    assert "optimiser" in capsys.readouterr().err


def test_train_missing_data_exit_1(tmp_path, train_cfg_path, capsys):
    assert main(["train", "--config", str(train_cfg_path),
                 "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_eval_writes_csv(run_dir, tmp_path, capsys):
    out = tmp_path / "episodes.csv"
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.r3dc"),
                 "--task", "reach", "--episodes", "2", "--seed", "1",
                 "--out", str(out)]) == 0
    assert "success rate:" in capsys.readouterr().out
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["episode", "steps", "success", "final_dist"]
    assert len(rows) == 3
    for ep, steps, success, dist in rows[1:]:
        assert int(success) in (0, 1)
        assert float(dist) >= 0.0


def test_eval_validation_exit_2(run_dir):
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.r3dc"),
                 "--task", "reach", "--episodes", "0"]) == 2


def test_pretrain_runs_and_reports_accuracy(tmp_path, capsys):
    cfg = tmp_path / "pre.json"
    cfg.write_text(json.dumps(dict(n_scenes=4, epochs=2, batch_size=2,
                                   lr=1e-3, n_p=64, encoder_preset="tiny")))
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "final patch accuracy:" in stdout
    assert (out / "encoder.r3dc").is_file()
    assert (out / "metrics.csv").read_text().splitlines()[0] == \
        "step,epoch,split,loss,accuracy,wall_ms"


def test_pretrain_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "pre.json"
    cfg.write_text(json.dumps(dict(n_scenes=1)))  # needs >= 2 for a holdout
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--max-coords", "2"]) == 0
    out = capsys.readouterr().out
    assert "all gradient checks passed" in out
    for op in ("add", "matmul", "softmax", "layer_norm", "attention", "full_model"):
        assert op in out


def test_gradcheck_detects_injected_bug(monkeypatch, capsys):
    import r3d.tensor as T

    orig = T._layer_norm_backward

    def broken(g, xhat, rstd, gamma):
        return -orig(g, xhat, rstd, gamma)  # sign flip

    monkeypatch.setattr(T, "_layer_norm_backward", broken)
    assert main(["gradcheck", "--max-coords", "2"]) == 1
    captured = capsys.readouterr()
    assert "layer_norm" in captured.err


def test_sweep_emits_one_row_per_value(tmp_path, demo_dir, train_cfg_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(train_cfg_path), "--axis", "decoder_depth",
                 "--values", "1", "2", "--data", str(demo_dir), "--out", str(out),
                 "--episodes", "1", "--seed", "0"]) == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["value", "final_val_loss", "success_rate"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert (out / "cell_1" / "checkpoint.r3dc").is_file()
    assert (out / "cell_2" / "checkpoint.r3dc").is_file()
    # the swept axis is the only config difference across cells
    from r3d.dataio import load_checkpoint

    c1 = load_checkpoint(out / "cell_1" / "checkpoint.r3dc").config["train"]
    c2 = load_checkpoint(out / "cell_2" / "checkpoint.r3dc").config["train"]
    assert c1.pop("decoder_depth") == 1 and c2.pop("decoder_depth") == 2
    assert c1 == c2


def test_sweep_rejects_bad_axis(tmp_path, demo_dir):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--axis", "lr", "--values", "1", "--data", str(demo_dir),
              "--out", str(tmp_path)])
    assert exc.value.code == 2
