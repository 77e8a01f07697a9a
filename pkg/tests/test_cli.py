import json
import os

import pytest

from mifo.cli import main

from tests.conftest import tiny_config_dict


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path, mode="rl_only")))
    return str(path)


def test_train_eval_plot(config_path, tmp_path, capsys):
    assert main(["train", "--config", config_path]) == 0
    run_dir = tmp_path / "run"
    assert (run_dir / "final.safetensors").exists()

    assert main(["eval", "--ckpt", str(run_dir / "final.safetensors"), "--k", "1"]) == 0
    out = capsys.readouterr().out
    assert "pass_at_1" in out and "avg_at_k" in out

    assert main(["plot", "--metrics", str(run_dir / "metrics.jsonl"),
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "reward.svg").exists()


def test_resume_from_cli(config_path, tmp_path):
    cfg = json.loads(open(config_path).read())
    cfg["checkpoint_every"] = 1
    with open(config_path, "w") as f:
        json.dump(cfg, f)
    assert main(["train", "--config", config_path]) == 0
    ckpt = tmp_path / "run" / "ckpt_000002.safetensors"
    assert main(["train", "--config", config_path, "--resume", str(ckpt)]) == 0


def test_eval_prints_one_table_row(config_path, tmp_path, capsys):
    assert main(["train", "--config", config_path]) == 0
    capsys.readouterr()
    ckpt = str(tmp_path / "run" / "final.safetensors")
    assert main(["eval", "--ckpt", ckpt, "--k", "2", "--split", "train", "--answer-forcing"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("|")
    row = [c.strip() for c in lines[2].strip("|").split("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    values = dict(zip(header, row))
    assert values["split"] == "train" and values["k"] == "2"
    assert values["answer_forcing"] == "True"


def test_probe_from_cli(config_path, tmp_path, capsys):
    assert main(["probe", "magnitude", "--config", config_path]) == 0
    assert "total" in capsys.readouterr().out


def test_errors_are_reported_as_json(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ExperimentConfigException"
    assert "missing.json" in err["message"]


def test_probe_needs_both_checkpoints(config_path, capsys):
    assert main(["probe", "prune", "--config", config_path, "--ckpt-a", "x.safetensors"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ProbeCheckpointException"


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["serve"])
