import os

import pytest

from mifo.experiment import MifoRun
from mifo.plots import emit_plots, load_metrics
from mifo.probe_runner import probe_command
from mifo.config import ExperimentConfig

from tests.conftest import tiny_config_dict


@pytest.fixture
def metrics_file(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config_dict(tmp_path, mode="rl_only"))
    MifoRun(cfg).run()
    probe_command("magnitude", cfg, show=False)
    probe_command("prune", cfg, ckpt_a=os.path.join(cfg.output_dir, "probe_sft.safetensors"),
                  ckpt_b=os.path.join(cfg.output_dir, "probe_rl.safetensors"), show=False)
    return os.path.join(cfg.output_dir, "metrics.jsonl")


def test_charts_with_csv_beside_every_svg(metrics_file, tmp_path):
    out = tmp_path / "plots"
    written = emit_plots([metrics_file], str(out))
    names = {os.path.basename(p) for p in written}
    for stem in ("reward", "accuracy", "length", "eval", "magnitude", "prune"):
        assert f"{stem}.csv" in names and f"{stem}.svg" in names
    assert "metrics.csv" in names
    assert all(os.path.exists(p) for p in written)


def test_malformed_lines_are_skipped(metrics_file, tmp_path):
    with open(metrics_file, "a") as f:
        f.write("{not json\n")
        f.write('{"step": 1}\n')
    with pytest.warns(UserWarning, match="skipped 2"):
        emit_plots([metrics_file], str(tmp_path / "plots"))
    df, skipped = load_metrics([metrics_file])
    assert skipped == 2 and len(df) > 0


def test_empty_input_gives_header_only_csv(tmp_path):
    empty = tmp_path / "metrics.jsonl"
    empty.write_text("")
    written = emit_plots([str(empty)], str(tmp_path / "plots"))
    assert [os.path.basename(p) for p in written] == ["metrics.csv"]
    lines = open(written[0]).read().splitlines()
    assert len(lines) == 1 and lines[0].startswith("run,step,phase")
