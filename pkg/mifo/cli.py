"""Command line entry point: train, probe, eval and plot."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd

from mifo.checkpoint import load_checkpoint
from mifo.config import ExperimentConfig
from mifo.experiment import evaluate, run
from mifo.model import TinyTransformer
from mifo.plots import emit_plots
from mifo.probe_runner import SUBCOMMANDS, probe_command
from mifo.seeding import derive_seed
from mifo.tasks import VOCAB, make_questions

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mifo", description="RL/SFT interleaving lab")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run an experiment")
    train.add_argument("--config", required=True)
    train.add_argument("--resume", default=None, help="checkpoint to continue from")

    probe = sub.add_parser("probe", help="SFT vs RL update probes")
    probe.add_argument("probe", choices=SUBCOMMANDS)
    probe.add_argument("--config", required=True)
    probe.add_argument("--ckpt-a", default=None, help="SFT endpoint")
    probe.add_argument("--ckpt-b", default=None, help="RL endpoint")

    ev = sub.add_parser("eval", help="score a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", default="eval", choices=["train", "eval"])
    ev.add_argument("--k", type=int, default=4)
    ev.add_argument("--answer-forcing", action="store_true")

    plot = sub.add_parser("plot", help="CSV and SVG charts from metrics files")
    plot.add_argument("--metrics", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    return parser


def _eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg_dict = dict(ckpt.manifest["config"])
    cfg_dict.setdefault("output_dir", os.path.dirname(os.path.abspath(args.ckpt)))
    config = ExperimentConfig.from_dict(cfg_dict)
    model = TinyTransformer(config.model, eos_id=VOCAB.eos)
    model.check_params(ckpt.params)
    seeds = config.task.eval_seeds if args.split == "eval" else config.task.train_seeds
    result = evaluate(model, ckpt.params, make_questions(config.task, seeds), args.k,
                      config.eval_temperature, seed=derive_seed(config.master_seed, "eval", 0),
                      max_new=config.grpo.max_new, answer_forcing=args.answer_forcing,
                      split=args.split)
    print(pd.DataFrame([result.to_dict()]).to_markdown(floatfmt=".3f", index=False))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            config = None if args.resume else ExperimentConfig.from_json(args.config)
            run(config, resume=args.resume)
        elif args.command == "probe":
            probe_command(args.probe, ExperimentConfig.from_json(args.config), args.ckpt_a,
                          args.ckpt_b)
        elif args.command == "eval":
            _eval(args)
        else:
            for path in emit_plots(args.metrics, args.out):
                print(path)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
