"""
Patch-level contrastive alignment.

Numeric patch tokens are anchors; the visual and caption tokens of the same patch index are
positives, every other patch of the same instance is a negative. Positives are detached so
only the numeric side moves toward the other modalities.
"""

import logging
from dataclasses import dataclass

import numpy as np

from diffcore import Tensor, cosine_matrix, log_softmax, stop_gradient
from encoders import token_data
from errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass
class AlignmentConfig:
    temperature: float = 0.07
    numeric_visual: bool = True
    numeric_caption: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


def infonce(anchors, positives, temperature: float, detach_positives: bool = True) -> Tensor:
    """
    Sum over anchors of -log softmax_j(cos(a_j, p_j') / temperature) at the matching index.

    The softmax runs over the rows of ``positives`` only, so negatives never leave the instance.
    """
    a, p = token_data(anchors), token_data(positives)
    if a.shape[0] == 0:
        raise ContractViolation("infonce needs at least one row")
    if a.shape != p.shape:
        raise ValueError(f"anchors {a.shape} and positives {p.shape} must have the same shape")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")

    if detach_positives:
        p = stop_gradient(p)
    logits = cosine_matrix(a, p) * (1.0 / temperature)
    diagonal = np.arange(a.shape[0])
    return -(log_softmax(logits, axis=1)[diagonal, diagonal].sum())


def pa_loss(numeric, visual, caption, cfg: AlignmentConfig) -> Tensor:
    """L_PA: enabled numeric-visual plus numeric-caption terms; a disabled pair adds exactly 0."""
    rows = {token_data(m).shape[0] for m in (numeric, visual, caption) if m is not None}
    if len(rows) > 1:
        raise ValueError(f"modalities disagree on patch count: {sorted(rows)}")

    n = token_data(numeric)
    loss = Tensor(np.zeros((), dtype=n.dtype))
    if cfg.numeric_visual:
        loss = loss + infonce(n, visual, cfg.temperature)
    if cfg.numeric_caption:
        loss = loss + infonce(n, caption, cfg.temperature)
    return loss
