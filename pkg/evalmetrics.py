"""
Answer scoring and the evaluation runner.

Categorical answers are scored by exact match after case/whitespace normalization (accuracy
and macro-F1); numeric answers by relative accuracy of the first number in the response.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from assembly import MadiModel, ModuleToggles
from datagen import QASample
from errors import ContractViolation

logger = logging.getLogger(__name__)

NUMBER_PATTERN = re.compile(r"[-+]?\d+(?:\.\d+)?")
ZERO_LABEL_TOLERANCE = 1e-9


def relative_accuracy(pred: float, label: float) -> float:
    """max(0, 1 - |(pred - label) / label|); a zero label scores 1 only for a zero prediction."""
    if label == 0:
        return 1.0 if abs(pred) <= ZERO_LABEL_TOLERANCE else 0.0
    return max(0.0, 1.0 - abs((pred - label) / label))


def extract_numeric(answer: str) -> Optional[float]:
    match = NUMBER_PATTERN.search(answer or "")
    return float(match.group()) if match else None


def normalize_answer(text) -> str:
    return " ".join(str(text).lower().split())


def macro_f1(predictions: Sequence[str], labels: Sequence[str]) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``labels``."""
    if not labels:
        raise ContractViolation("macro-F1 needs at least one label")
    predictions = [normalize_answer(p) for p in predictions]
    labels = [normalize_answer(l) for l in labels]
    scores = []
    for cls in sorted(set(labels)):
        tp = sum(1 for p, l in zip(predictions, labels) if p == cls and l == cls)
        fp = sum(1 for p, l in zip(predictions, labels) if p == cls and l != cls)
        fn = sum(1 for p, l in zip(predictions, labels) if p != cls and l == cls)
        denominator = 2 * tp + fp + fn
        scores.append(2 * tp / denominator if denominator else 0.0)
    return float(np.mean(scores))


@dataclass
class TaskScores:
    count: int
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    relative_accuracy: Optional[float] = None


@dataclass
class EvalReport:
    tasks: Dict[str, TaskScores]
    sample_count: int
    ablation_tag: str
    categorical_accuracy: Optional[float] = None
    mean_relative_accuracy: Optional[float] = None
    predictions: List[str] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop("predictions")
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def score(self) -> float:
        """Single number used to pick the best checkpoint."""
        parts = [s for s in (self.categorical_accuracy, self.mean_relative_accuracy) if s is not None]
        return float(np.mean(parts)) if parts else 0.0


def score_predictions(samples: Sequence[QASample], predictions: Sequence[str], ablation_tag: str = "full") -> EvalReport:
    """Score generated answers against ground-truth labels; pure in its inputs."""
    if len(samples) != len(predictions):
        raise ContractViolation(f"{len(samples)} samples but {len(predictions)} predictions")
    rows = []
    for sample, prediction in zip(samples, predictions):
        if sample.label_kind == "categorical":
            correct = normalize_answer(prediction) == normalize_answer(sample.label)
            rows.append({"task": sample.task, "kind": "categorical", "prediction": prediction,
                         "label": str(sample.label), "correct": float(correct), "relative": np.nan})
        else:
            value = extract_numeric(prediction)
            score = 0.0 if value is None else relative_accuracy(value, float(sample.label))
            rows.append({"task": sample.task, "kind": "numeric", "prediction": prediction,
                         "label": str(sample.label), "correct": np.nan, "relative": score})
    frame = pd.DataFrame(rows, columns=["task", "kind", "prediction", "label", "correct", "relative"])

    tasks: Dict[str, TaskScores] = {}
    for task, group in frame.groupby("task", sort=True):
        scores = TaskScores(count=len(group))
        categorical = group[group["kind"] == "categorical"]
        numeric = group[group["kind"] == "numeric"]
        if len(categorical):
            scores.accuracy = float(categorical["correct"].mean())
            scores.macro_f1 = macro_f1(list(categorical["prediction"]), list(categorical["label"]))
        if len(numeric):
            scores.relative_accuracy = float(numeric["relative"].mean())
        tasks[str(task)] = scores

    categorical_all = frame[frame["kind"] == "categorical"]
    numeric_all = frame[frame["kind"] == "numeric"]
    return EvalReport(
        tasks=tasks,
        sample_count=len(frame),
        ablation_tag=ablation_tag,
        categorical_accuracy=float(categorical_all["correct"].mean()) if len(categorical_all) else None,
        mean_relative_accuracy=float(numeric_all["relative"].mean()) if len(numeric_all) else None,
        predictions=list(predictions),
    )


def run_eval(model: MadiModel, samples: Sequence[QASample], ablation_tag: str = "full",
             workers: int = 1, prepared=None) -> EvalReport:
    """Generate an answer for every sample with the tagged modules disabled, then score them."""
    toggles = ModuleToggles.from_tag(ablation_tag)
    if not samples:
        raise ContractViolation("evaluation needs at least one sample")
    prepared = prepared if prepared is not None else model.prepare_samples(samples, workers)

    def answer(item):
        return model.answer(item, toggles)

    if workers > 1 and len(prepared) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            predictions = list(executor.map(answer, prepared))
    else:
        predictions = [answer(item) for item in prepared]
    report = score_predictions(samples, predictions, ablation_tag)
    logger.info(f"Evaluated {report.sample_count} samples with tag {ablation_tag}: {report.to_json()}")
    return report
