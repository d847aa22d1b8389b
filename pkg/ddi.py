"""
Discrete disentangled interaction.

A codebook hierarchy shared by the numeric and visual modalities quantizes each token's
down-projected latent from coarse to fine (residual VQ with pooled windows). The up-projected
quantization is the modality-common part Z; the remainder U = E - Z is modality-unique and is
what the opposite modality attends to.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from diffcore import Module, Tensor, cosine_rows, gelu, get_default_dtype, straight_through
from encoders import token_data
from errors import ConfigurationError, ContractViolation
from layers import Linear, MultiHeadAttention
from patch_alignment import infonce

logger = logging.getLogger(__name__)


def pool_broadcast(residuals: np.ndarray, window: int) -> np.ndarray:
    """Average non-overlapping windows of rows and write each mean back over its window."""
    if window < 1:
        raise ContractViolation(f"window must be at least 1, got {window}")
    residuals = np.asarray(residuals)
    if window == 1 or residuals.shape[0] == 0:
        return residuals.copy()
    count = residuals.shape[0]
    starts = np.arange(0, count, window)
    sizes = np.minimum(starts + window, count) - starts
    means = np.add.reduceat(residuals, starts, axis=0) / sizes[:, None]
    return means[np.arange(count) // window]


def vq_assign(codebook: np.ndarray, vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest code by squared Euclidean distance; ties go to the lowest index."""
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ContractViolation("cannot assign against an empty codebook")
    vectors = np.asarray(vectors)
    if vectors.shape[-1] != codebook.shape[1]:
        raise ValueError(f"vectors have dimension {vectors.shape[-1]}, codebook has {codebook.shape[1]}")
    distances = np.sum((vectors[:, None, :] - codebook[None, :, :]) ** 2, axis=-1)
    indices = np.argmin(distances, axis=1)
    return indices, codebook[indices]


class CodebookHierarchy(Module):
    """
    M codebooks of sizes K, 2K, ..., K*2^(M-1) over a d-dimensional latent space.

    Codes are buffers maintained by exponential moving averages, never by gradients. The
    down/up projections between D and d are ordinary trainable parameters.
    """

    def __init__(self, dim: int, latent_dim: int, codebook_size: int, levels: int,
                 rng: np.random.Generator, decay: float = 0.99, eps: float = 1e-5):
        if levels < 1:
            raise ConfigurationError(f"codebook levels must be at least 1, got {levels}")
        if codebook_size < 1:
            raise ConfigurationError(f"codebook size must be at least 1, got {codebook_size}")
        if not 0.0 <= decay < 1.0:
            raise ConfigurationError(f"EMA decay must lie in [0, 1), got {decay}")
        self.levels = levels
        self.codebook_size = codebook_size
        self.latent_dim = latent_dim
        self.decay = decay
        self.eps = eps
        self.down = Linear(dim, latent_dim, rng)
        self.up = Linear(latent_dim, dim, rng)
        self._rng = rng
        self._dtype = get_default_dtype()
        for m, size in enumerate(self.level_sizes):
            codes = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(size, latent_dim)).astype(self._dtype)
            self.register_buffer(f"codes_{m}", codes)
            self.register_buffer(f"counts_{m}", np.ones(size, dtype=self._dtype))
            self.register_buffer(f"sums_{m}", codes.copy())
        self.register_buffer("initialized", np.zeros(1, dtype=self._dtype))

    @property
    def level_sizes(self) -> List[int]:
        return [self.codebook_size * 2 ** m for m in range(self.levels)]

    @property
    def windows(self) -> List[int]:
        return [2 ** (self.levels - 1 - m) for m in range(self.levels)]

    def codes(self, level: int) -> np.ndarray:
        return self._buffers[f"codes_{level}"]

    @property
    def is_initialized(self) -> bool:
        return bool(self._buffers["initialized"][0])

    def initialize_from(self, latents: Sequence[np.ndarray], noise: float = 1e-3) -> None:
        """Seed every level with pooled residuals drawn from a first batch of latents."""
        stacked = [np.asarray(x) for x in latents if len(x)]
        if not stacked:
            raise ContractViolation("codebook initialization needs at least one latent row")
        residuals = [x.copy() for x in stacked]
        for m, (size, window) in enumerate(zip(self.level_sizes, self.windows)):
            pooled = np.concatenate([pool_broadcast(r, window) for r in residuals])
            picks = self._rng.choice(len(pooled), size=size, replace=len(pooled) < size)
            codes = (pooled[picks] + self._rng.normal(0.0, noise, size=(size, self.latent_dim))).astype(self._dtype)
            self._buffers[f"codes_{m}"] = codes
            self._buffers[f"counts_{m}"] = np.ones(size, dtype=self._dtype)
            self._buffers[f"sums_{m}"] = codes.copy()
            residuals = [r - vq_assign(codes, pool_broadcast(r, window))[1] for r in residuals]
        self._buffers["initialized"] = np.ones(1, dtype=self._dtype)
        logger.info(f"Initialized {self.levels} codebook levels of sizes {self.level_sizes}")


@dataclass
class DisentangledTokens:
    common: Tensor
    unique: Tensor
    latent: Tensor
    commitment: Tensor
    quantized: np.ndarray
    code_indices: np.ndarray
    level_targets: List[np.ndarray] = field(default_factory=list)
    final_residual: Optional[np.ndarray] = None
    residual_norms: List[float] = field(default_factory=list)


def rvq_forward(tokens, hierarchy: CodebookHierarchy) -> DisentangledTokens:
    """
    Residual quantization of one modality's tokens.

    Forward uses the quantized latent; the straight-through path sends the gradient of Z back
    to the down-projected latent. The commitment term is mean_j ||latent_j - sg(q_j)||^2.
    """
    e = token_data(tokens)
    latent = hierarchy.down(e)
    residual = latent.data.astype(np.float64, copy=True)
    quantized = np.zeros_like(residual)
    indices, targets, norms = [], [], []
    for m, window in enumerate(hierarchy.windows):
        pooled = pool_broadcast(residual, window)
        level_indices, level_codes = vq_assign(hierarchy.codes(m), pooled)
        residual = residual - level_codes
        quantized = quantized + level_codes
        indices.append(level_indices)
        targets.append(pooled)
        norms.append(float(np.mean(np.linalg.norm(residual, axis=1))))

    quantized_t = quantized.astype(latent.dtype)
    common = hierarchy.up(straight_through(latent, quantized_t))
    commitment = ((latent - quantized_t) ** 2).sum(axis=1).mean()
    return DisentangledTokens(
        common=common,
        unique=e - common,
        latent=latent,
        commitment=commitment,
        quantized=quantized,
        code_indices=np.stack(indices, axis=1),
        level_targets=targets,
        final_residual=residual,
        residual_norms=norms,
    )


def ema_update(hierarchy: CodebookHierarchy, assignments: Sequence[DisentangledTokens]) -> None:
    """
    Move assigned codes toward the running mean of the vectors assigned to them.

    N <- gN + (1-g)count, m <- gm + (1-g)sum, c = m / (N + eps); codes with no assignment in
    this batch are left untouched.
    """
    gamma = hierarchy.decay
    for m, size in enumerate(hierarchy.level_sizes):
        counts = np.zeros(size)
        sums = np.zeros((size, hierarchy.latent_dim))
        for tokens in assignments:
            idx = tokens.code_indices[:, m]
            counts += np.bincount(idx, minlength=size)
            np.add.at(sums, idx, tokens.level_targets[m])
        hit = counts > 0
        if not np.any(hit):
            continue
        ema_counts = hierarchy._buffers[f"counts_{m}"]
        ema_sums = hierarchy._buffers[f"sums_{m}"]
        codes = hierarchy._buffers[f"codes_{m}"]
        ema_counts[hit] = gamma * ema_counts[hit] + (1.0 - gamma) * counts[hit]
        ema_sums[hit] = gamma * ema_sums[hit] + (1.0 - gamma) * sums[hit]
        codes[hit] = ema_sums[hit] / (ema_counts[hit] + hierarchy.eps)[:, None]


class SharedProjector(Module):
    """Continuous stand-in for the quantizer: a two-layer projector shared by both modalities."""

    def __init__(self, dim: int, latent_dim: int, rng: np.random.Generator):
        self.down = Linear(dim, latent_dim, rng)
        self.up = Linear(latent_dim, dim, rng)

    def forward(self, tokens) -> DisentangledTokens:
        e = token_data(tokens)
        latent = self.down(e)
        common = self.up(gelu(latent))
        return DisentangledTokens(
            common=common,
            unique=e - common,
            latent=latent,
            commitment=Tensor(np.zeros((), dtype=e.dtype)),
            quantized=common.data.copy(),
            code_indices=np.zeros((e.shape[0], 0), dtype=np.int64),
        )


@dataclass
class DDILosses:
    total: Tensor
    commitment: Tensor
    common_alignment: Tensor
    orthogonality: Tensor


def combine_ddi(commitment, common_alignment, orthogonality, alpha: float, beta: float):
    """L_DDI = L_vq + alpha * L_com + beta * L_orth."""
    return commitment + alpha * common_alignment + beta * orthogonality


def ddi_loss(numeric: DisentangledTokens, visual: DisentangledTokens, alpha: float = 5.0,
             beta: float = 1.0, temperature: float = 0.07) -> DDILosses:
    if numeric.common.shape != visual.common.shape:
        raise ValueError(
            f"numeric tokens {numeric.common.shape} and visual tokens {visual.common.shape} must match"
        )
    commitment = numeric.commitment + visual.commitment
    common_alignment = 0.5 * (
        infonce(numeric.common, visual.common, temperature, detach_positives=False)
        + infonce(visual.common, numeric.common, temperature, detach_positives=False)
    )
    orthogonality = 0.5 * (
        cosine_rows(numeric.common, numeric.unique).abs() + cosine_rows(visual.common, visual.unique).abs()
    ).mean()
    return DDILosses(
        total=combine_ddi(commitment, common_alignment, orthogonality, alpha, beta),
        commitment=commitment,
        common_alignment=common_alignment,
        orthogonality=orthogonality,
    )


class UniqueInteraction(Module):
    """Each modality attends to the other's unique tokens through a zero-initialized residual branch."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, bias: bool = True):
        self.numeric_attention = MultiHeadAttention(dim, heads, rng, bias=bias, zero_out=True)
        self.visual_attention = MultiHeadAttention(dim, heads, rng, bias=bias, zero_out=True)

    def forward(self, numeric, visual, numeric_unique, visual_unique) -> Tuple[Tensor, Tensor]:
        e_n, e_v = token_data(numeric), token_data(visual)
        u_n, u_v = token_data(numeric_unique), token_data(visual_unique)
        if e_n.shape[0] != e_v.shape[0]:
            raise ValueError(f"numeric ({e_n.shape[0]}) and visual ({e_v.shape[0]}) token counts differ")
        fused_n = e_n + self.numeric_attention(e_n, u_v)
        fused_v = e_v + self.visual_attention(e_v, u_n)
        return fused_n, fused_v


def codebook_usage(hierarchy: CodebookHierarchy, assignments: Sequence[DisentangledTokens]) -> List[float]:
    """Fraction of codes per level used at least once by the given assignments."""
    usage = []
    for m, size in enumerate(hierarchy.level_sizes):
        used = set()
        for tokens in assignments:
            used.update(int(i) for i in tokens.code_indices[:, m])
        usage.append(len(used) / size)
    return usage
