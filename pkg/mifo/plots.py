"""CSV tables and SVG line charts from metrics streams.

Every chart is written together with the CSV it was drawn from.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from mifo.metrics import RECORD_FIELDS  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "mifo"

RL_SERIES = {
    "reward": "mean_reward",
    "accuracy": "mean_acc",
    "length": "mean_response_length",
}


def load_metrics(metrics_files: Sequence[str]) -> Tuple[pd.DataFrame, int]:
    """Read JSONL metrics files into one frame with a `run` column.

    Returns:
        Tuple[pd.DataFrame, int]: the records and the number of malformed lines skipped
    """
    rows: List[Dict] = []
    skipped = 0
    for path in metrics_files:
        run = os.path.splitext(os.path.basename(path))[0]
        if run == "metrics":
            run = os.path.basename(os.path.dirname(os.path.abspath(path))) or run
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError:
                    skipped += 1
                    continue
                if not isinstance(d, dict) or "step" not in d or "phase" not in d:
                    skipped += 1
                    continue
                d["run"] = run
                rows.append(d)
    columns = ["run"] + list(RECORD_FIELDS)
    df = pd.DataFrame(rows)
    if df.empty:
        df = pd.DataFrame(columns=columns)
    return df, skipped


def _line_chart(df: pd.DataFrame, x: str, y: str, series: str, title: str, out_svg: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, part in df.groupby(series, sort=True):
        ax.plot(part[x], part[y], label=str(name))
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)


def _emit(df: pd.DataFrame, out_dir: str, stem: str, x: str, y: str, series: str,
          title: str) -> List[str]:
    csv = os.path.join(out_dir, f"{stem}.csv")
    df.to_csv(csv, index=False)
    svg = os.path.join(out_dir, f"{stem}.svg")
    _line_chart(df, x, y, series, title, svg)
    return [csv, svg]


def emit_plots(metrics_files: Sequence[str], out_dir: str) -> List[str]:
    """Write metrics.csv plus one CSV/SVG pair per chart.

    Charts: RL reward, accuracy and response length per step; evaluation score per
    step; per-layer update magnitudes and the prune sweep when probe records exist.

    Returns:
        List[str]: the files written
    """
    os.makedirs(out_dir, exist_ok=True)
    df, skipped = load_metrics(metrics_files)
    if skipped:
        warnings.warn(f"skipped {skipped} malformed metrics lines")
    written = [os.path.join(out_dir, "metrics.csv")]
    flat = df.drop(columns=[c for c in ("admissions",) if c in df.columns])
    flat.to_csv(written[0], index=False)
    if df.empty:
        return written

    rl = df[df["phase"] == "rl"]
    for stem, column in RL_SERIES.items():
        part = rl[["run", "step", column]].dropna() if column in rl else rl.iloc[0:0]
        if len(part):
            written += _emit(part, out_dir, stem, "step", column, "run", f"RL {stem}")

    if "eval_scores" in df.columns:
        ev = df[(df["phase"] == "eval") & df["eval_scores"].notna()]
        rows = [{"run": r.run, "step": r.step, "metric": k, "score": v}
                for r in ev.itertuples() for k, v in r.eval_scores.items()
                if k.startswith(("pass@", "avg@"))]
        if rows:
            written += _emit(pd.DataFrame(rows), out_dir, "eval", "step", "score",
                             "metric", "evaluation")

    if "probe_type" in df.columns:
        probe = df[df["phase"] == "probe"]
        mag = probe[probe["probe_type"] == "magnitude"]
        if len(mag):
            rows = [{"layer": r.layer, "position": i, "paradigm": p, "update_norm": getattr(r, p)}
                    for i, r in enumerate(mag[mag["layer"] != "total"].itertuples())
                    for p in ("sft", "rl")]
            written += _emit(pd.DataFrame(rows), out_dir, "magnitude", "position",
                             "update_norm", "paradigm", "per-layer update magnitude")
        prune = probe[probe["probe_type"] == "prune"]
        if len(prune):
            rows = [{"paradigm": r.paradigm, "p_post": r.p_post, "metric": k, "score": v}
                    for r in prune.itertuples() for k, v in r.eval_scores.items()
                    if k.startswith("avg@")]
            written += _emit(pd.DataFrame(rows), out_dir, "prune", "p_post", "score",
                             "paradigm", "accuracy vs pruning rate")
    logger.info("wrote %d plot files to %s", len(written), out_dir)
    return written
