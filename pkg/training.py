"""
Two-stage training loop.

Stage one (the first ``freeze_ratio`` of steps) keeps the decoder, the shared text embedding and
the visual encoder fixed while the new modules learn; stage two trains everything. Each step
runs forward, the weighted total loss, backward, one AdamW update and then the codebook EMA.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from assembly import MadiModel, ModuleToggles
from checkpoint import save_model
from datagen import QASample
from ddi import ema_update
from diffcore import AdamW, backward, cosine_lr, no_grad
from errors import ContractViolation, NumericalFailureError, TrainingDivergedError
from evalmetrics import EvalReport, run_eval

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    model: MadiModel
    metrics: List[Dict] = field(default_factory=list)
    best_step: Optional[int] = None
    best_score: Optional[float] = None
    best_state: Optional[Dict[str, np.ndarray]] = None
    checkpoint_path: Optional[str] = None
    last_report: Optional[EvalReport] = None


def _initialize_codebooks(model: MadiModel, prepared, toggles: ModuleToggles) -> None:
    if not toggles.uses_codebooks or model.hierarchy.is_initialized:
        return
    latents = []
    with no_grad():
        for item in prepared:
            for series in item.series:
                trace = model.encode_instance(series, toggles)
                latents.append(model.hierarchy.down(trace.numeric).data)
                latents.append(model.hierarchy.down(trace.visual).data)
    model.hierarchy.initialize_from(latents)


def train(model: MadiModel, samples: Sequence[QASample], eval_samples: Optional[Sequence[QASample]] = None,
          ablation_tag: Optional[str] = None, output_dir: Optional[str] = None,
          show_progress: bool = False) -> TrainingResult:
    """
    Train ``model`` in place on ``samples``.

    Args:
        model: freshly built or restored model; its config supplies every hyperparameter
        samples: training samples
        eval_samples: held-out samples scored every ``eval_interval`` steps (best state kept)
        ablation_tag: module toggles to train with; defaults to the config's tag
        output_dir: when set, metrics.jsonl, model.ckpt and best.ckpt are written there

    Raises:
        ContractViolation: empty dataset
        TrainingDivergedError: a loss or gradient became NaN or infinite
    """
    cfg = model.config
    if not samples:
        raise ContractViolation("training needs a non-empty dataset")
    tag = ablation_tag or cfg.ablation
    toggles = ModuleToggles.from_tag(tag)
    rng = np.random.default_rng(cfg.seed)

    prepared = model.prepare_samples(samples, cfg.workers)
    eval_subset = list(eval_samples[: cfg.eval_samples]) if eval_samples else []
    eval_prepared = model.prepare_samples(eval_subset, cfg.workers) if eval_subset else None

    optimizer = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    freeze_steps = math.ceil(cfg.freeze_ratio * cfg.steps)
    frozen = model.stage_one_frozen()
    result = TrainingResult(model=model)

    metrics_file = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        metrics_file = open(os.path.join(output_dir, "metrics.jsonl"), "w", encoding="utf-8")

    try:
        if cfg.steps:
            first = [prepared[i] for i in rng.permutation(len(prepared))[: cfg.batch_size]]
            _initialize_codebooks(model, first, toggles)
        logger.info(
            f"Training {cfg.steps} steps (tag {tag}, {len(prepared)} samples, "
            f"{freeze_steps} stage-one steps with {len(frozen)} frozen tensors)"
        )

        for step in tqdm(range(cfg.steps), desc="training", disable=not show_progress):
            if step == freeze_steps and freeze_steps:
                logger.info(f"Step {step}: unfreezing all parameters")
            batch = rng.choice(len(prepared), size=cfg.batch_size, replace=len(prepared) < cfg.batch_size)

            model.zero_grad()
            try:
                losses = [model.sample_losses(prepared[i], toggles) for i in batch]
                total = losses[0].total
                for item in losses[1:]:
                    total = total + item.total
                total = total * (1.0 / len(losses))
                if not np.isfinite(total.item()):
                    raise TrainingDivergedError(step)
                backward(total)
            except NumericalFailureError as e:
                raise TrainingDivergedError(step, e.op_name or "loss") from e

            optimizer.step(
                lr=cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_ratio),
                frozen=frozen if step < freeze_steps else (),
            )
            if toggles.uses_codebooks:
                ema_update(model.hierarchy, [t for item in losses for t in item.assignments()])

            record = {
                "step": step,
                "L_LM": float(np.mean([item.lm.item() for item in losses])),
                "L_PA": float(np.mean([item.pa.item() for item in losses])),
                "L_DDI": float(np.mean([item.ddi.item() for item in losses])),
                "eval_acc": None,
            }
            last_step = step == cfg.steps - 1
            if eval_prepared and cfg.eval_interval and ((step + 1) % cfg.eval_interval == 0 or last_step):
                report = run_eval(model, eval_subset, tag, workers=1, prepared=eval_prepared)
                result.last_report = report
                record["eval_acc"] = report.score
                if result.best_score is None or report.score > result.best_score:
                    result.best_score = report.score
                    result.best_step = step
                    result.best_state = model.state_dict()
                    if output_dir:
                        save_model(os.path.join(output_dir, "best.ckpt"), model)
            result.metrics.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
    finally:
        if metrics_file:
            metrics_file.close()

    if output_dir:
        result.checkpoint_path = save_model(os.path.join(output_dir, "model.ckpt"), model, optimizer)
    return result
