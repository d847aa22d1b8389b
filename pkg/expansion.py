"""
Patch-level modality expansion of a single series.

normalize -> stats_prompt carries the original magnitudes as text; patchify, rasterize and
caption_patch then produce the three aligned views (numeric, pixel, caption) with one entry
per patch index.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from errors import ContractViolation

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6

PROMPT_FORMAT = "[offset=%.3f|scaling=%.3f|length=%d|max=%.3f|min=%.3f|left=%.3f|right=%.3f]"
PROMPT_PATTERN = re.compile(
    r"^\[offset=(?P<offset>-?\d+\.\d{3})\|scaling=(?P<scaling>-?\d+\.\d{3})\|length=(?P<length>\d+)"
    r"\|max=(?P<max>-?\d+\.\d{3})\|min=(?P<min>-?\d+\.\d{3})"
    r"\|left=(?P<left>-?\d+\.\d{3})\|right=(?P<right>-?\d+\.\d{3})\]$"
)
CAPTION_FORMAT = "t=%d..%d max=%.3f min=%.3f mean=%.3f std=%.3f"


@dataclass
class NormalizedSeries:
    values: np.ndarray
    offset: float
    scaling: float
    stats: Dict[str, float]

    def denormalize(self) -> np.ndarray:
        return self.values / self.scaling - self.offset

    @property
    def length(self) -> int:
        return len(self.values)


@dataclass
class PatchBundle:
    """Aligned numeric/pixel/caption views of one series."""

    normalized: NormalizedSeries
    numeric_patches: np.ndarray
    pixel_patches: np.ndarray
    captions: List[str]
    spans: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def patch_count(self) -> int:
        return self.numeric_patches.shape[0]

    def __post_init__(self):
        counts = {self.numeric_patches.shape[0], self.pixel_patches.shape[0], len(self.captions)}
        if len(counts) != 1:
            raise ContractViolation(f"modality views disagree on patch count: {sorted(counts)}")


def normalize(series) -> NormalizedSeries:
    values = np.asarray(series, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ContractViolation("normalize needs a non-empty one-dimensional series")
    if not np.all(np.isfinite(values)):
        raise ContractViolation("series contains NaN or infinite values")

    mean = float(np.mean(values))
    std = float(np.std(values))
    scaling = 1.0 / std if std > STD_FLOOR else 1.0
    stats = {
        "length": int(values.size),
        "max": float(np.max(values)),
        "min": float(np.min(values)),
        "first": float(values[0]),
        "last": float(values[-1]),
    }
    # + 0.0 turns -0.0 into 0.0 so the prompt never prints "-0.000"
    return NormalizedSeries(values=(values - mean) * scaling, offset=-mean + 0.0, scaling=scaling, stats=stats)


def stats_prompt(ns: NormalizedSeries) -> str:
    s = ns.stats
    return PROMPT_FORMAT % (ns.offset, ns.scaling, s["length"], s["max"], s["min"], s["first"], s["last"])


def parse_stats_prompt(text: str) -> Dict[str, float]:
    match = PROMPT_PATTERN.match(text.strip())
    if not match:
        raise ValueError(f"not a statistics prompt: {text!r}")
    fields = {k: float(v) for k, v in match.groupdict().items()}
    fields["length"] = int(fields["length"])
    return fields


def pad_to_multiple(values: np.ndarray, patch_size: int) -> np.ndarray:
    remainder = len(values) % patch_size
    if remainder == 0:
        return values
    return np.concatenate([values, np.full(patch_size - remainder, values[-1])])


def patchify(ns, patch_size: int) -> np.ndarray:
    """Split into non-overlapping rows of ``patch_size``, right-padding with the last value."""
    if patch_size < 1:
        raise ContractViolation(f"patch size must be at least 1, got {patch_size}")
    values = np.asarray(ns.values if isinstance(ns, NormalizedSeries) else ns, dtype=np.float64)
    if values.size == 0:
        raise ContractViolation("cannot patchify an empty series")
    padded = pad_to_multiple(values, patch_size)
    return padded.reshape(-1, patch_size)


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize(ns, pixel_patch: int, patch_size: int = 8) -> np.ndarray:
    """
    Render the padded series as a bare line plot of height ``pixel_patch``.

    The image is ``patch_count * pixel_patch`` columns wide; time step t lands in column
    floor(t * (W - 1) / (T - 1)), which keeps every step inside the pixel patch of its
    numeric patch as long as ``pixel_patch >= patch_size``.
    """
    if pixel_patch < 4:
        raise ContractViolation(f"pixel patch must be at least 4, got {pixel_patch}")
    if pixel_patch < patch_size:
        raise ContractViolation(f"pixel patch {pixel_patch} is smaller than numeric patch {patch_size}")
    values = patchify(ns, patch_size).reshape(-1)
    steps = len(values)
    width = (steps // patch_size) * pixel_patch
    image = np.zeros((pixel_patch, width), dtype=np.uint8)

    high, low = float(np.max(values)), float(np.min(values))
    if high == low:
        rows = np.full(steps, (pixel_patch - 1) // 2, dtype=np.int64)
    else:
        scaled = (high - values) / (high - low) * (pixel_patch - 1)
        rows = np.floor(scaled + 0.5).astype(np.int64)
    if steps == 1:
        columns = np.zeros(1, dtype=np.int64)
    else:
        columns = (np.arange(steps, dtype=np.int64) * (width - 1)) // (steps - 1)

    image[rows[0], columns[0]] = 1
    for t in range(1, steps):
        for x, y in _bresenham(int(columns[t - 1]), int(rows[t - 1]), int(columns[t]), int(rows[t])):
            image[y, x] = 1
    return image


def split_pixel_patches(image: np.ndarray, pixel_patch: int) -> np.ndarray:
    height, width = image.shape
    if height != pixel_patch or width % pixel_patch:
        raise ContractViolation(f"image of shape {image.shape} does not tile into {pixel_patch}px patches")
    return image.reshape(pixel_patch, width // pixel_patch, pixel_patch).transpose(1, 0, 2).copy()


def caption_patch(numeric_patch, start_index: int) -> str:
    patch = np.asarray(numeric_patch, dtype=np.float64)
    if patch.size == 0:
        raise ContractViolation("cannot caption an empty patch")
    return CAPTION_FORMAT % (
        start_index,
        start_index + patch.size - 1,
        np.max(patch) + 0.0,
        np.min(patch) + 0.0,
        np.mean(patch) + 0.0,
        np.std(patch) + 0.0,
    )


def expand(series, patch_size: int = 8, pixel_patch: int = 16) -> PatchBundle:
    """Normalize a raw series and build its aligned numeric, pixel and caption views."""
    ns = normalize(series)
    if ns.stats["max"] == ns.stats["min"]:
        logger.debug("Zero-variance series; normalization left unscaled")
    patches = patchify(ns, patch_size)
    image = rasterize(ns, pixel_patch, patch_size)
    spans = [(j * patch_size, (j + 1) * patch_size - 1) for j in range(patches.shape[0])]
    return PatchBundle(
        normalized=ns,
        numeric_patches=patches,
        pixel_patches=split_pixel_patches(image, pixel_patch).astype(np.float64),
        captions=[caption_patch(row, start) for row, (start, _) in zip(patches, spans)],
        spans=spans,
    )


def column_owner(steps: int, patch_size: int, pixel_patch: int) -> np.ndarray:
    """Pixel patch index owning each time step of a padded series."""
    width = (steps // patch_size) * pixel_patch
    if steps == 1:
        return np.zeros(1, dtype=np.int64)
    columns = (np.arange(steps, dtype=np.int64) * (width - 1)) // (steps - 1)
    return columns // pixel_patch


def write_pgm(image: np.ndarray, path: str) -> None:
    """Plain-text PGM (P2) dump with max value 1."""
    height, width = image.shape
    with open(path, "w", encoding="ascii") as f:
        f.write(f"P2\n{width} {height}\n1\n")
        for row in image:
            f.write(" ".join(str(int(v)) for v in row))
            f.write("\n")


def save_png(image: np.ndarray, path: str, scale: int = 4) -> None:
    pixels = (1 - np.asarray(image, dtype=np.uint8)) * 255
    picture = Image.fromarray(pixels.astype(np.uint8))
    if scale > 1:
        picture = picture.resize((picture.width * scale, picture.height * scale), Image.NEAREST)
    picture.save(path)
