"""
Attribute-based synthetic time series and question/answer generation.

A series is built from an attribute pool (trend, seasonality, noise, local events) and every
question is answered from the attributes that built it, so labels are ground truth by
construction. Records are stored one JSON object per line.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from tqdm import tqdm

from errors import ConfigurationError, ContractViolation, DatasetFormatError, TemplateNotApplicable

logger = logging.getLogger(__name__)

EVENT_KINDS = ("spike", "dip", "level_shift", "shake")
TEMPLATE_IDS = (
    "trend_class",
    "period_value",
    "amplitude_value",
    "noise_class",
    "event_presence",
    "event_position",
    "amplitude_compare",
)
CATEGORICAL_TEMPLATES = {"trend_class", "noise_class", "event_presence", "amplitude_compare"}
# Templates asked over two series at once
PAIR_TEMPLATES = {"amplitude_compare"}
SERIES_PLACEHOLDER = "<ts>"

CONTEXT_TEMPLATE = "this is a time series with {length} points : <ts> ."
PAIR_CONTEXT_TEMPLATE = (
    "there are two time series . the first has {first} points : <ts> . the second has {second} points : <ts> ."
)
QUESTION_TEMPLATES = {
    "trend_class": "what is the trend of the series ? answer increasing , decreasing or steady .",
    "period_value": "what is the period of the seasonal pattern ?",
    "amplitude_value": "what is the amplitude of the seasonal pattern ?",
    "noise_class": "is the noise level of the series low or high ?",
    "event_presence": "is there a local event such as a spike , dip , level shift or shake ?",
    "event_position": "at which index does the first local event start ?",
    "amplitude_compare": "which series has the larger seasonal amplitude ? answer first or second .",
}
ANSWER_WORDS = ("increasing", "decreasing", "steady", "low", "high", "yes", "no", "first", "second")

SHAKE_STEPS = 6
# Smallest amplitude difference a comparison question is asked about
AMPLITUDE_GAP = 0.3


# --- Attribute pool ---

@dataclass(frozen=True)
class Trend:
    kind: str = "none"
    slope: float = 0.0


@dataclass(frozen=True)
class Seasonality:
    period: int = 0
    amplitude: float = 0.0


@dataclass(frozen=True)
class LocalEvent:
    kind: str
    position: int
    magnitude: float


@dataclass(frozen=True)
class AttributeSpec:
    """The attributes a synthetic series is built from."""

    length: int
    trend: Trend = Trend()
    seasonality: Seasonality = Seasonality()
    noise_sigma: float = 0.0
    local_events: Tuple[LocalEvent, ...] = ()
    base_level: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.length < 1:
            raise ContractViolation(f"length must be positive, got {self.length}")
        if self.trend.kind not in ("none", "linear"):
            raise ContractViolation(f"unknown trend kind {self.trend.kind!r}")
        if self.seasonality.amplitude > 0 and not 0 < self.seasonality.period <= self.length / 2:
            raise ContractViolation(
                f"period {self.seasonality.period} must lie in (0, {self.length / 2}] for a periodic series"
            )
        if self.noise_sigma < 0:
            raise ContractViolation("noise_sigma must be non-negative")
        for event in self.local_events:
            if event.kind not in EVENT_KINDS:
                raise ContractViolation(f"unknown event kind {event.kind!r}")
            if not 0 <= event.position < self.length:
                raise ContractViolation(f"event position {event.position} outside [0, {self.length})")

    @property
    def slope(self) -> float:
        return self.trend.slope if self.trend.kind == "linear" else 0.0

    def to_dict(self) -> Dict:
        return {
            "length": self.length,
            "trend": {"kind": self.trend.kind, "slope": self.trend.slope},
            "seasonality": {"period": self.seasonality.period, "amplitude": self.seasonality.amplitude},
            "noise_sigma": self.noise_sigma,
            "local_events": [
                {"kind": e.kind, "position": e.position, "magnitude": e.magnitude} for e in self.local_events
            ],
            "base_level": self.base_level,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AttributeSpec":
        return cls(
            length=int(data["length"]),
            trend=Trend(**data.get("trend", {})),
            seasonality=Seasonality(**data.get("seasonality", {})),
            noise_sigma=float(data.get("noise_sigma", 0.0)),
            local_events=tuple(LocalEvent(**e) for e in data.get("local_events", [])),
            base_level=float(data.get("base_level", 0.0)),
            seed=int(data.get("seed", 0)),
        )


def series_stats(values: np.ndarray) -> Dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "max": float(np.max(values)),
        "min": float(np.min(values)),
        "first": float(values[0]),
        "last": float(values[-1]),
    }


@dataclass
class TimeSeriesInstance:
    values: np.ndarray
    spec: AttributeSpec
    stats: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.stats:
            self.stats = series_stats(self.values)
        if len(self.values) != self.spec.length:
            raise ContractViolation(f"series has {len(self.values)} values but spec length is {self.spec.length}")


@dataclass
class QASample:
    context: str
    question: str
    answer: str
    label_kind: str
    label: Union[str, int, float]
    series: List[TimeSeriesInstance]

    @property
    def task(self) -> str:
        return task_of(self.question)


def task_of(question: str) -> str:
    for template_id, text in QUESTION_TEMPLATES.items():
        if question == text:
            return template_id
    return "unknown"


# --- Sampling ---

class GenerationRanges(BaseModel):
    """Ranges the attribute pool is sampled from (inclusive bounds)."""

    model_config = ConfigDict(extra="forbid")

    length: Tuple[int, int] = (64, 512)
    trend_directions: Tuple[int, ...] = (-1, 0, 1)
    slope_magnitude: Tuple[float, float] = (0.02, 0.06)
    period: Tuple[int, int] = (20, 30)
    amplitude: Tuple[float, float] = (0.5, 3.0)
    noise_sigma: Tuple[float, float] = (0.0, 0.3)
    base_level: Tuple[float, float] = (-10.0, 10.0)
    event_count: Tuple[int, int] = (0, 2)
    event_kinds: Tuple[str, ...] = EVENT_KINDS
    event_magnitude: Tuple[float, float] = (1.0, 5.0)

    @model_validator(mode="after")
    def check_ranges(self) -> "GenerationRanges":
        for name in ("length", "slope_magnitude", "period", "amplitude", "noise_sigma",
                     "base_level", "event_count", "event_magnitude"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} range is empty: {low} > {high}")
        if not self.trend_directions or any(d not in (-1, 0, 1) for d in self.trend_directions):
            raise ValueError("trend_directions must be a non-empty subset of {-1, 0, 1}")
        if not self.event_kinds or any(k not in EVENT_KINDS for k in self.event_kinds):
            raise ValueError(f"event_kinds must be a non-empty subset of {EVENT_KINDS}")
        if self.length[0] < 8:
            raise ValueError("length must be at least 8")
        if self.amplitude[1] > 0 and (self.period[0] <= 0 or self.period[1] > self.length[0] / 2):
            raise ValueError("period range must lie in (0, min_length/2]")
        if self.noise_sigma[0] < 0:
            raise ValueError("noise_sigma must be non-negative")
        return self


def _as_ranges(config: Union[GenerationRanges, Dict, None]) -> GenerationRanges:
    if isinstance(config, GenerationRanges):
        return config
    try:
        return GenerationRanges.model_validate(config or {})
    except ValidationError as e:
        raise ConfigurationError(f"invalid generation ranges: {e}") from e


def sample_spec(rng_seed: int, config: Union[GenerationRanges, Dict, None] = None) -> AttributeSpec:
    """Draw an AttributeSpec uniformly within the configured ranges; reproducible per seed."""
    ranges = _as_ranges(config)
    rng = np.random.default_rng(rng_seed)

    length = int(rng.integers(ranges.length[0], ranges.length[1] + 1))
    direction = int(rng.choice(ranges.trend_directions))
    magnitude = float(rng.uniform(*ranges.slope_magnitude))
    trend = Trend("linear", direction * magnitude) if direction else Trend()

    amplitude = float(rng.uniform(*ranges.amplitude))
    period = int(rng.integers(ranges.period[0], ranges.period[1] + 1))
    seasonality = Seasonality(period, amplitude) if amplitude > 0 else Seasonality()

    noise_sigma = float(rng.uniform(*ranges.noise_sigma))
    base_level = float(rng.uniform(*ranges.base_level))

    events = []
    count = int(rng.integers(ranges.event_count[0], ranges.event_count[1] + 1))
    last_start = max(1, length - SHAKE_STEPS)
    for _ in range(count):
        kind = str(rng.choice(ranges.event_kinds))
        position = int(rng.integers(1, last_start + 1)) if length > 2 else 0
        events.append(LocalEvent(kind, position, float(rng.uniform(*ranges.event_magnitude))))
    events.sort(key=lambda e: e.position)

    return AttributeSpec(
        length=length,
        trend=trend,
        seasonality=seasonality,
        noise_sigma=noise_sigma,
        local_events=tuple(events),
        base_level=base_level,
        seed=int(rng_seed),
    )


def synthesize(spec: AttributeSpec) -> TimeSeriesInstance:
    """Build the series values from its attributes (pure: same spec, same values)."""
    spec.validate()
    t = np.arange(spec.length, dtype=np.float64)
    values = spec.base_level + spec.slope * t
    if spec.seasonality.amplitude > 0:
        values = values + spec.seasonality.amplitude * np.sin(2.0 * np.pi * t / spec.seasonality.period)
    if spec.noise_sigma > 0:
        values = values + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, spec.length)

    for event in spec.local_events:
        values = values + _event_delta(event, spec.length)
    return TimeSeriesInstance(values=values, spec=spec)


def _event_delta(event: LocalEvent, length: int) -> np.ndarray:
    delta = np.zeros(length)
    p, m = event.position, event.magnitude
    if event.kind in ("spike", "dip"):
        sign = 1.0 if event.kind == "spike" else -1.0
        for offset, weight in ((-1, 0.5), (0, 1.0), (1, 0.5)):
            if 0 <= p + offset < length:
                delta[p + offset] += sign * weight * m
    elif event.kind == "level_shift":
        delta[p:] += m
    elif event.kind == "shake":
        for k in range(SHAKE_STEPS):
            if p + k < length:
                delta[p + k] += m if k % 2 == 0 else -m
    return delta


# --- Question/answer templates ---

def recompute_label(spec: AttributeSpec, template_id: str, trend_threshold: float = 1.0,
                    noise_threshold: float = 0.15) -> Tuple[str, Union[str, int, float]]:
    """Ground-truth (label_kind, label) for a template, derived from the attributes alone."""
    if template_id in PAIR_TEMPLATES:
        raise ContractViolation(f"template {template_id!r} compares two series; use recompute_pair_label")
    if template_id == "trend_class":
        change = spec.slope * spec.length
        label = "increasing" if change > trend_threshold else "decreasing" if change < -trend_threshold else "steady"
        return "categorical", label
    if template_id == "period_value":
        if spec.seasonality.amplitude <= 0:
            raise TemplateNotApplicable("period question on an aperiodic series")
        return "numeric", int(spec.seasonality.period)
    if template_id == "amplitude_value":
        if spec.seasonality.amplitude <= 0:
            raise TemplateNotApplicable("amplitude question on an aperiodic series")
        return "numeric", round(spec.seasonality.amplitude, 1)
    if template_id == "noise_class":
        return "categorical", "high" if spec.noise_sigma >= noise_threshold else "low"
    if template_id == "event_presence":
        return "categorical", "yes" if spec.local_events else "no"
    if template_id == "event_position":
        if not spec.local_events:
            raise TemplateNotApplicable("event position question on a series without events")
        return "numeric", int(min(e.position for e in spec.local_events))
    raise ContractViolation(f"unknown template {template_id!r}; expected one of {TEMPLATE_IDS}")


def render_answer(label_kind: str, label) -> str:
    if label_kind == "categorical":
        return str(label)
    if isinstance(label, int) or float(label).is_integer():
        return str(int(label))
    return f"{float(label):.1f}"


def make_qa(spec: AttributeSpec, template_id: str, trend_threshold: float = 1.0,
            noise_threshold: float = 0.15, instance: Optional[TimeSeriesInstance] = None) -> QASample:
    """
    Build one question/answer sample for a single series.

    Raises TemplateNotApplicable when the template does not fit the attributes.
    """
    label_kind, label = recompute_label(spec, template_id, trend_threshold, noise_threshold)
    instance = instance if instance is not None else synthesize(spec)
    return QASample(
        context=CONTEXT_TEMPLATE.format(length=spec.length),
        question=QUESTION_TEMPLATES[template_id],
        answer=render_answer(label_kind, label),
        label_kind=label_kind,
        label=label,
        series=[instance],
    )


def recompute_pair_label(first: AttributeSpec, second: AttributeSpec,
                         template_id: str) -> Tuple[str, Union[str, int, float]]:
    """Ground-truth label for a question comparing two series."""
    if template_id != "amplitude_compare":
        raise ContractViolation(f"unknown comparison template {template_id!r}; expected {sorted(PAIR_TEMPLATES)}")
    a, b = first.seasonality.amplitude, second.seasonality.amplitude
    if a <= 0 or b <= 0:
        raise TemplateNotApplicable("amplitude comparison needs two periodic series")
    if abs(a - b) < AMPLITUDE_GAP:
        raise TemplateNotApplicable(f"amplitudes {a:.2f} and {b:.2f} are too close to compare")
    return "categorical", "first" if a > b else "second"


def make_pair_qa(first: AttributeSpec, second: AttributeSpec, template_id: str = "amplitude_compare",
                 instances: Optional[Tuple[TimeSeriesInstance, TimeSeriesInstance]] = None) -> QASample:
    """
    Build a question over two series; the context carries one placeholder per series.

    Raises TemplateNotApplicable when the pair cannot be told apart.
    """
    label_kind, label = recompute_pair_label(first, second, template_id)
    series = list(instances) if instances is not None else [synthesize(first), synthesize(second)]
    return QASample(
        context=PAIR_CONTEXT_TEMPLATE.format(first=first.length, second=second.length),
        question=QUESTION_TEMPLATES[template_id],
        answer=render_answer(label_kind, label),
        label_kind=label_kind,
        label=label,
        series=series,
    )


def generate_samples(count: int, seed_start: int, ranges: Union[GenerationRanges, Dict, None] = None,
                     templates: Sequence[str] = TEMPLATE_IDS, trend_threshold: float = 1.0,
                     noise_threshold: float = 0.15, show_progress: bool = False) -> List[QASample]:
    """
    Generate ``count`` samples from consecutive seeds, cycling through ``templates``.

    Comparison templates draw their two series from two consecutive seeds. A seed whose
    attributes do not fit the current template is skipped.
    """
    ranges = _as_ranges(ranges)
    unknown = [t for t in templates if t not in TEMPLATE_IDS]
    if unknown or not templates:
        raise ConfigurationError(f"unknown or empty templates: {unknown or templates}")

    samples: List[QASample] = []
    seed = seed_start
    skipped = 0
    with tqdm(total=count, desc="generating", disable=not show_progress) as progress:
        while len(samples) < count:
            template_id = templates[len(samples) % len(templates)]
            spec = sample_spec(seed, ranges)
            seed += 1
            try:
                if template_id in PAIR_TEMPLATES:
                    other = sample_spec(seed, ranges)
                    seed += 1
                    samples.append(make_pair_qa(spec, other, template_id))
                else:
                    samples.append(make_qa(spec, template_id, trend_threshold, noise_threshold))
                progress.update(1)
            except TemplateNotApplicable:
                skipped += 1
                if skipped > 100 * max(count, 1):
                    raise ConfigurationError(f"template {template_id} never fits the generation ranges")
    if skipped:
        logger.warning(f"Skipped {skipped} seeds whose attributes did not fit the requested template")
    return samples


# --- Dataset files ---

def sample_to_record(sample: QASample) -> Dict:
    return {
        "context": sample.context,
        "question": sample.question,
        "answer": sample.answer,
        "label_kind": sample.label_kind,
        "label": sample.label,
        "series": [inst.values.tolist() for inst in sample.series],
        "spec": [inst.spec.to_dict() for inst in sample.series],
    }


def record_to_sample(record: Dict) -> QASample:
    series_values = record["series"]
    specs = record["spec"]
    if len(series_values) != len(specs):
        raise ValueError("series and spec lists differ in length")
    series = [
        TimeSeriesInstance(values=np.asarray(values, dtype=np.float64), spec=AttributeSpec.from_dict(spec))
        for values, spec in zip(series_values, specs)
    ]
    return QASample(
        context=record["context"],
        question=record["question"],
        answer=record["answer"],
        label_kind=record["label_kind"],
        label=record["label"],
        series=series,
    )


def write_dataset(samples: Iterable[QASample], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample_to_record(sample), ensure_ascii=False))
            f.write("\n")
            count += 1
    logger.info(f"Wrote {count} samples to {path}")
    return count


def read_dataset(path: str) -> List[QASample]:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                samples.append(record_to_sample(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractViolation) as e:
                raise DatasetFormatError(f"malformed record in {path}: {e}", line_number) from e
    return samples
