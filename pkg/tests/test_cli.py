import json

import pytest

from leaf.cli import main

TINY = {
    "branch": {"d": 4, "L": 1, "m": 2},
    "pretrain": {"epochs": 1, "batch_size": 32},
    "val_stride": 6,
}


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--n-vertices", "4", "--days", "2", "--scale", "1.1"]) == 0
    cfg = {**TINY, "data": {"flows": str(data / "flows.csv"), "adjacency": str(data / "adjacency.csv"),
                            "meta": str(data / "meta.json")}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path


def test_pretrain_run_eval(workspace, capsys):
    tmp, cfg = workspace
    out = tmp / "out"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    ckpt = out / "checkpoint.bin"
    assert ckpt.exists() and (out / "training_log.json").exists()
    assert main(["run", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out / "run"),
                 "--selector", "oracle", "--test-limit", "2"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n_windows"] == 2
    assert main(["eval", str(out / "run" / "predictions.bin")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mae"] == pytest.approx(summary["mae"], abs=1e-9)


def test_prompt_dry_run(workspace, capsys):
    tmp, cfg = workspace
    target = tmp / "prompts.txt"
    assert main(["prompt-dry-run", "--config", str(cfg), "--vertex", "1", "--prompt-out", str(target)]) == 0
    text = target.read_text()
    assert "===== vertex 1 =====" in text and "Sensor ID: S001." in text
    assert sum(line.startswith("Option ") for line in text.splitlines()) == 12


def test_ablate(workspace, capsys):
    tmp, cfg = workspace
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp / "abl"), "--test-limit", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines] == ["E1", "E2", "E3", "E4", "E5", "E6", "LEAF"]
    assert (tmp / "abl" / "ablation_report.json").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"selector": "crystal ball", "adapt": {"K": 0}}))
    assert main(["run", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "selector:" in err and "adapt:" in err
