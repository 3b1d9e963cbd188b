import json

import pytest

from skelmamba.cli import load_run_config, run


def test_synth_is_idempotent(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["--classes", "2", "--per-class", "2", "--frames", "8", "--seed", "7"]
    assert run(["synth", "--out", str(a), *args]) == 0
    assert run(["synth", "--out", str(b), *args]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run(["nonsense"]) == 1
    assert run(["synth"]) == 1  # --out missing
    assert run(["eval", "--checkpoint", str(tmp_path / "none.skmb"), "--data", str(tmp_path / "none.json")]) == 1
    assert run(["train", "--config", "nope", "--data", "x", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err.lower()


def test_bad_thread_setting(monkeypatch, tmp_path):
    monkeypatch.setenv("SKELMAMBA_THREADS", "zero")
    assert run(["synth", "--out", str(tmp_path / "d.json"), "--per-class", "1"]) == 1


def test_oracle_command(capsys):
    assert run(["oracle", "--cases", "100"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("cases=100") and line.endswith("ok")
    assert float(line.split("max_abs_diff=")[1].split()[0]) <= 1e-10


@pytest.mark.slow
def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--scale", "tiny"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    names = [ln.split()[0] for ln in lines]
    assert {"pgm_forward", "tsmb_forward", "model"} <= set(names)
    assert all(ln.endswith("ok") for ln in lines)


def test_run_config_presets(tmp_path):
    for name in ("tiny", "desk", "paper"):
        model, train = load_run_config(name)
        assert model.C > 0 and train.epochs > 0
    model, train = load_run_config("paper", seed=4)
    assert (train.epochs, train.batch_size, train.seed) == (500, 128, 4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"preset": "tiny", "C": 16}, "train": {"epochs": 3, "warmup_epochs": 1}}))
    model, train = load_run_config(str(path))
    assert model.C == 16 and train.epochs == 3


def test_train_eval_ensemble_pipeline(tmp_path, capsys):
    data = tmp_path / "d.json"
    assert run(["synth", "--out", str(data), "--classes", "2", "--per-class", "2", "--frames", "12"]) == 0
    cfg = tmp_path / "c.json"
    model = {"preset": "tiny", "T_in": 8, "C": 16, "L": 2, "tdown_after": [1], "d_state": 2}
    cfg.write_text(json.dumps({"model": model, "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4}}))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        args = ["train", "--config", str(cfg), "--data", str(data), "--val", str(data), "--out", str(out), "--modality", "jb", "--no-timestamp"]
        assert run(args) == 0
        outs.append(out)
    for name in ("metrics_joint.jsonl", "metrics_bone.jsonl", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    for name in ("model_joint.skmb", "curves_joint.svg", "confusion_bone.svg"):
        assert (outs[0] / name).exists()
    report = json.loads((outs[0] / "report.json").read_text())
    assert set(report["modalities"]) == {"joint", "bone"} and "ensemble_val_acc" in report
    capsys.readouterr()

    assert run(["eval", "--checkpoint", str(outs[0] / "model_joint.skmb"), "--data", str(data)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert 0.0 <= ev["accuracy"] <= 1.0
    ckpts = ",".join(str(outs[0] / f"model_{m}.skmb") for m in ("joint", "bone"))
    assert run(["ensemble", "--checkpoints", ckpts, "--data", str(data)]) == 0
    en = json.loads(capsys.readouterr().out)
    assert en["accuracy"] == report["ensemble_val_acc"]


def test_bench_command(capsys):
    assert run(["bench", "--config", "tiny", "--repeats", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["params"] > 0 and rep["macs"] > 0 and rep["forward_ms_median"] > 0
