"""
Command-line entry point.

Subcommands:
    gen       write train/eval datasets from disjoint seed ranges
    train     two-stage training, checkpoint written to the output directory
    eval      score a checkpoint on a dataset under an ablation tag
    diagnose  alignment/disentanglement artifacts for a checkpoint
    ablate    train and evaluate every configured tag over every configured seed

Exit codes: 0 success, 2 user error (bad config, missing file, unknown tag), 1 internal error.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

from assembly import build_model
from checkpoint import load_model, save_model
from config import RunConfig, load_config
from datagen import QASample, generate_samples, read_dataset, write_dataset
from diagnostics import diagnose
from errors import CheckpointError, ConfigurationError, DatasetFormatError, MadiError
from evalmetrics import run_eval
from training import train

load_dotenv()

logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, os.getenv("MADI_LOG_LEVEL", "INFO").upper(), logging.INFO)
)
logger = logging.getLogger(__name__)

SPLIT_STRIDE = 10_000_000
EVAL_OFFSET = SPLIT_STRIDE // 2

USER_ERRORS = (ConfigurationError, DatasetFormatError, CheckpointError, OSError)


class UserInputError(MadiError):
    """Problem with something the user supplied (path, flag, tag)."""


def split_seed(seed: int, split: str) -> int:
    return seed * SPLIT_STRIDE + (EVAL_OFFSET if split == "eval" else 0)


def require_dataset(path: str) -> List[QASample]:
    if not os.path.exists(path):
        raise UserInputError(f"dataset not found: {path}")
    return read_dataset(path)


def cmd_gen(config: RunConfig) -> List[str]:
    os.makedirs(config.output_dir, exist_ok=True)
    written = []
    for split, count, path in (
        ("train", config.train_samples, config.resolved_train_path),
        ("eval", config.eval_split_samples, config.resolved_eval_path),
    ):
        samples = generate_samples(
            count,
            split_seed(config.seed, split),
            config.generation,
            config.templates,
            config.trend_threshold,
            config.noise_threshold,
            show_progress=count > 100,
        )
        write_dataset(samples, path)
        written.append(path)
    return written


def cmd_train(config: RunConfig):
    samples = require_dataset(config.resolved_train_path)
    eval_samples = read_dataset(config.resolved_eval_path) if os.path.exists(config.resolved_eval_path) else None
    model = build_model(config)
    result = train(model, samples, eval_samples, output_dir=config.output_dir, show_progress=True)
    path = config.resolved_checkpoint_path
    if path != result.checkpoint_path:
        save_model(path, model)
    if result.best_step is not None:
        logger.info(f"Best evaluation score {result.best_score:.4f} at step {result.best_step}")
    return result


def cmd_eval(config: RunConfig, checkpoint: Optional[str] = None, tag: Optional[str] = None,
             split: str = "eval"):
    path = config.resolved_eval_path if split == "eval" else config.resolved_train_path
    samples = require_dataset(path)
    if not samples:
        raise UserInputError(f"dataset is empty: {path}")
    model = load_model(checkpoint or config.resolved_checkpoint_path)
    report = run_eval(model, samples, tag or config.ablation, workers=config.workers)
    os.makedirs(config.output_dir, exist_ok=True)
    report_path = os.path.join(config.output_dir, f"eval_{split}_{report.ablation_tag}.json")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    print(report.to_json())
    return report


def cmd_diagnose(config: RunConfig, checkpoint: Optional[str] = None, max_instances: int = 8):
    samples = require_dataset(config.resolved_eval_path)
    model = load_model(checkpoint or config.resolved_checkpoint_path)
    summary = diagnose(model, samples, os.path.join(config.output_dir, "diagnostics"), max_instances)
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_ablate(config: RunConfig) -> pd.DataFrame:
    train_samples = require_dataset(config.resolved_train_path)
    eval_samples = require_dataset(config.resolved_eval_path)
    rows = []
    for tag in config.ablation_tags:
        for seed in config.ablation_seeds:
            run_config = config.model_copy(update={"seed": seed, "ablation": tag})
            model = build_model(run_config)
            train(model, train_samples, output_dir=os.path.join(config.output_dir, "ablation", f"{tag}_seed{seed}"))
            report = run_eval(model, eval_samples, tag, workers=config.workers)
            rows.append({
                "tag": tag,
                "seed": seed,
                "categorical_accuracy": report.categorical_accuracy,
                "mean_relative_accuracy": report.mean_relative_accuracy,
                "score": report.score,
            })
    table = pd.DataFrame(rows, columns=["tag", "seed", "categorical_accuracy", "mean_relative_accuracy", "score"])
    os.makedirs(config.output_dir, exist_ok=True)
    table.to_csv(os.path.join(config.output_dir, "ablation.csv"), index=False)
    print(table.to_string(index=False))
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madi", description="Multi-modal time-series QA pipeline")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted keys for generation ranges)")
    parser.add_argument("--output-dir", help="output directory (overrides MADI_OUTPUT_DIR)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate train/eval datasets")
    sub.add_parser("train", help="train a model")

    eval_parser = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint")
    eval_parser.add_argument("--tag", help="ablation tag")
    eval_parser.add_argument("--split", choices=("train", "eval"), default="eval")

    diagnose_parser = sub.add_parser("diagnose", help="write alignment/disentanglement diagnostics")
    diagnose_parser.add_argument("--checkpoint")
    diagnose_parser.add_argument("--instances", type=int, default=8)

    sub.add_parser("ablate", help="train and evaluate every ablation tag and seed")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides, args.output_dir)
        logger.info(f"Resolved config: {config.to_json()}")

        if args.command == "gen":
            cmd_gen(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoint, args.tag, args.split)
        elif args.command == "diagnose":
            cmd_diagnose(config, args.checkpoint, args.instances)
        elif args.command == "ablate":
            cmd_ablate(config)
        return 0
    except (UserInputError, *USER_ERRORS) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed with an internal error: {e}", exc_info=True)
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
