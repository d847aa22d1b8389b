"""
Assembly of the full model.

- pos_concat: replaces each <ts> placeholder in the context with its instance's
  [statistics prompt ; numeric block ; visual block] and appends the question
- ToyDecoder / lm_loss / generate: small causal decoder reading the fused sequence as a prefix,
  with its output matrix tied to the text embedding table
- ModuleToggles: ablation tag -> which components run
- MadiModel: every trainable component plus sample preparation and the per-sample forward
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from config import ABLATION_TAGS, RunConfig
from datagen import QASample
from ddi import (
    CodebookHierarchy,
    DDILosses,
    DisentangledTokens,
    SharedProjector,
    UniqueInteraction,
    ddi_loss,
    rvq_forward,
)
from diffcore import (
    Module,
    Parameter,
    Tensor,
    concat,
    log_softmax,
    no_grad,
    set_default_dtype,
    take,
    xavier_uniform,
)
from encoders import NumericEncoder, TextEmbedder, TextVocab, VisualEncoder, token_data
from errors import ConfigurationError, ContractViolation, NumericalFailureError
from expansion import PatchBundle, expand, stats_prompt
from highlighting import CriticalTokenHighlighter
from layers import LayerNorm, TransformerBlock
from patch_alignment import AlignmentConfig, pa_loss

logger = logging.getLogger(__name__)

# Components held fixed during the first training stage
STAGE_ONE_FROZEN = ("decoder.", "text.", "visual_encoder.")


# --- Position-aware concatenation ---

@dataclass
class InstanceBlock:
    stats: Tensor
    numeric: Optional[Tensor]
    visual: Optional[Tensor]


@dataclass
class FusedSequence:
    embeddings: Tensor
    segments: List[str]

    def __post_init__(self):
        if len(self.segments) != self.embeddings.shape[0]:
            raise ContractViolation(
                f"segment map covers {len(self.segments)} rows, sequence has {self.embeddings.shape[0]}"
            )

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    def rows(self, origin: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.segments) if s == origin], dtype=np.int64)

    def extract(self, origin: str) -> np.ndarray:
        return self.embeddings.data[self.rows(origin)]

    def answer_mask(self, answer_length: int) -> np.ndarray:
        return answer_mask(self.length, answer_length)


def answer_mask(prefix_rows: int, answer_length: int) -> np.ndarray:
    """
    Decoder input rows whose next-token logits score the answer.

    The decoder reads [prefix ; answer[:-1]], so answer token b is predicted at row
    prefix_rows - 1 + b.
    """
    if prefix_rows < 1:
        raise ContractViolation("decoder prefix is empty")
    mask = np.zeros(prefix_rows + max(answer_length - 1, 0), dtype=bool)
    mask[prefix_rows - 1:prefix_rows - 1 + answer_length] = True
    return mask


def pos_concat(context_ids: Sequence[int], context, question, blocks: Sequence[InstanceBlock],
               placeholder_id: int) -> FusedSequence:
    """
    Build E* = context with each placeholder replaced by its instance block, then the question.

    Raises:
        ContractViolation: the number of placeholders differs from the number of blocks
    """
    ids = list(context_ids)
    e_c = token_data(context)
    e_q = token_data(question)
    if e_c is not None and e_c.shape[0] != len(ids):
        raise ValueError(f"context has {len(ids)} ids but {e_c.shape[0]} embedding rows")
    placeholders = [i for i, t in enumerate(ids) if t == placeholder_id]
    if len(placeholders) != len(blocks):
        raise ContractViolation(
            f"context holds {len(placeholders)} series placeholders for {len(blocks)} instances"
        )

    pieces: List[Tensor] = []
    segments: List[str] = []

    def add(piece: Optional[Tensor], origin: str) -> None:
        if piece is None or piece.shape[0] == 0:
            return
        pieces.append(piece)
        segments.extend([origin] * piece.shape[0])

    start = 0
    for k, position in enumerate(placeholders):
        if position > start:
            add(e_c[start:position], "context")
        block = blocks[k]
        add(token_data(block.stats), f"stats_prompt:{k}")
        add(token_data(block.numeric), f"numeric:{k}")
        add(token_data(block.visual), f"visual:{k}")
        start = position + 1
    if start < len(ids):
        add(e_c[start:], "context")
    add(e_q, "question")

    if not pieces:
        raise ContractViolation("fused sequence would be empty")
    return FusedSequence(concat(pieces, axis=0), segments)


# --- Decoder ---

class ToyDecoder(Module):
    """Causal transformer over [prefix ; answer] rows; logits use the shared embedding table."""

    def __init__(self, dim: int, heads: int, blocks: int, max_positions: int, rng: np.random.Generator):
        self.max_positions = max_positions
        self.positions = Parameter(xavier_uniform(rng, (max_positions, dim), max_positions, dim))
        self.blocks = [TransformerBlock(dim, heads, rng, causal=True) for _ in range(blocks)]
        self.norm = LayerNorm(dim)

    def forward(self, inputs: Tensor, output_table: Tensor) -> Tensor:
        rows = inputs.shape[0]
        if rows > self.max_positions:
            raise ContractViolation(f"sequence of {rows} rows exceeds max_positions={self.max_positions}")
        h = inputs + self.positions[:rows]
        for block in self.blocks:
            h = block(h)
        return self.norm(h) @ output_table.transpose()


def _prefix(fused) -> Tensor:
    prefix = fused.embeddings if isinstance(fused, FusedSequence) else fused
    if prefix.shape[0] == 0:
        raise ContractViolation("decoder prefix is empty")
    return prefix


def lm_loss(decoder: ToyDecoder, output_table: Tensor, fused, answer_ids: Sequence[int]) -> Tensor:
    """-sum_b log P(A_b | A_<b, E*) with ground-truth prefixes."""
    answer = np.asarray(answer_ids, dtype=np.int64)
    if answer.size == 0:
        raise ContractViolation("answer must not be empty")
    vocab_size = output_table.shape[0]
    if answer.min() < 0 or answer.max() >= vocab_size:
        raise ContractViolation(f"answer token outside vocabulary of size {vocab_size}")

    prefix = _prefix(fused)
    inputs = prefix if answer.size == 1 else concat([prefix, take(output_table, answer[:-1])], axis=0)
    logits = decoder(inputs, output_table)
    positions = np.flatnonzero(answer_mask(prefix.shape[0], answer.size))
    log_probs = log_softmax(logits[positions], axis=1)
    return -(log_probs[np.arange(answer.size), answer].sum())


def generate(decoder: ToyDecoder, output_table: Tensor, fused, vocab: TextVocab, max_len: int) -> str:
    """Greedy decoding until <eos> or ``max_len`` tokens."""
    ids: List[int] = []
    if max_len <= 0:
        return ""
    with no_grad():
        prefix = _prefix(fused)
        for _ in range(max_len):
            if prefix.shape[0] + len(ids) > decoder.max_positions:
                break
            inputs = prefix if not ids else concat([prefix, take(output_table, ids)], axis=0)
            logits = decoder(inputs, output_table)
            row = np.flatnonzero(answer_mask(prefix.shape[0], len(ids) + 1))[-1]
            next_id = int(np.argmax(logits.data[row]))
            if next_id == vocab.eos_id:
                break
            ids.append(next_id)
    return vocab.decode(ids)


def total_loss(lm, pa, ddi, lambda1: float = 0.02, lambda2: float = 0.2):
    """L = L_LM + lambda1 * L_PA + lambda2 * L_DDI."""
    for name, value in (("L_LM", lm), ("L_PA", pa), ("L_DDI", ddi)):
        raw = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(raw)):
            raise NumericalFailureError(f"loss component {name} is not finite", name)
    return lm + lambda1 * pa + lambda2 * ddi


# --- Ablation toggles ---

@dataclass(frozen=True)
class ModuleToggles:
    pa: bool = True
    ddi: bool = True
    cth: bool = True
    numeric_visual: bool = True
    numeric_caption: bool = True
    disentangle: bool = True
    quantize: bool = True
    numeric: bool = True

    @classmethod
    def from_tag(cls, tag: str) -> "ModuleToggles":
        if tag not in ABLATION_TAGS:
            raise ConfigurationError(f"unknown ablation tag {tag!r}; expected one of {ABLATION_TAGS}")
        return {
            "full": cls(),
            "no_pa": cls(pa=False),
            "no_ddi": cls(ddi=False),
            "no_cth": cls(cth=False),
            "no_nva": cls(numeric_visual=False),
            "no_nca": cls(numeric_caption=False),
            "no_md": cls(disentangle=False),
            "no_vq": cls(quantize=False),
            "no_num": cls(numeric=False, pa=False, ddi=False),
        }[tag]

    @property
    def uses_codebooks(self) -> bool:
        return self.numeric and self.ddi and self.disentangle and self.quantize


# --- Model ---

@dataclass
class PreparedSeries:
    bundle: PatchBundle
    prompt: str
    prompt_ids: List[int]
    caption_ids: List[List[int]]


@dataclass
class PreparedSample:
    sample: QASample
    context_ids: List[int]
    question_ids: List[int]
    answer_ids: List[int]
    series: List[PreparedSeries]


@dataclass
class InstanceTrace:
    """Per-instance intermediate tokens kept for codebook updates and diagnostics."""

    visual: Tensor
    numeric: Optional[Tensor] = None
    caption: Optional[Tensor] = None
    numeric_tokens: Optional[DisentangledTokens] = None
    visual_tokens: Optional[DisentangledTokens] = None


@dataclass
class SampleForward:
    fused: FusedSequence
    pa: Tensor
    ddi: Tensor
    traces: List[InstanceTrace] = field(default_factory=list)
    ddi_parts: List[DDILosses] = field(default_factory=list)


@dataclass
class SampleLosses:
    total: Tensor
    lm: Tensor
    pa: Tensor
    ddi: Tensor
    forward: SampleForward

    def assignments(self) -> List[DisentangledTokens]:
        found = []
        for trace in self.forward.traces:
            for tokens in (trace.numeric_tokens, trace.visual_tokens):
                if tokens is not None and tokens.code_indices.shape[1]:
                    found.append(tokens)
        return found


class MadiModel(Module):
    def __init__(self, config: RunConfig, vocab: Optional[TextVocab] = None):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.vocab = vocab or TextVocab.build()
        d = config.embed_dim
        self.text = TextEmbedder(self.vocab, d, rng)
        self.numeric_encoder = NumericEncoder(
            config.patch_size, d, rng, config.max_patches, config.blocks, config.heads
        )
        self.visual_encoder = VisualEncoder(
            config.pixel_patch, d, rng, config.max_patches, config.blocks, config.heads
        )
        self.hierarchy = CodebookHierarchy(
            d, config.latent_dim, config.codebook_size, config.levels, rng, decay=config.ema_decay
        )
        self.projector = SharedProjector(d, config.latent_dim, rng)
        self.interaction = UniqueInteraction(d, config.heads, rng)
        self.highlighter = CriticalTokenHighlighter(d, config.highlight_queries, rng)
        self.decoder = ToyDecoder(d, config.heads, config.decoder_blocks, config.max_positions, rng)

    # preparation is pure numpy and safe to run on worker threads

    def prepare_sample(self, sample: QASample) -> PreparedSample:
        series = []
        for instance in sample.series:
            bundle = expand(instance.values, self.config.patch_size, self.config.pixel_patch)
            prompt = stats_prompt(bundle.normalized)
            series.append(PreparedSeries(
                bundle=bundle,
                prompt=prompt,
                prompt_ids=self.vocab.encode(prompt),
                caption_ids=[self.vocab.encode(c) for c in bundle.captions],
            ))
        question_ids = self.vocab.encode(sample.question)
        if not question_ids:
            raise ContractViolation("question must not be empty")
        return PreparedSample(
            sample=sample,
            context_ids=self.vocab.encode(sample.context),
            question_ids=question_ids,
            answer_ids=self.vocab.encode(sample.answer, strict=True) + [self.vocab.eos_id],
            series=series,
        )

    def prepare_samples(self, samples: Sequence[QASample], workers: int = 4) -> List[PreparedSample]:
        if workers <= 1 or len(samples) < 2:
            return [self.prepare_sample(s) for s in samples]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(self.prepare_sample, samples))

    # forward

    def disentangle(self, tokens: Tensor, toggles: ModuleToggles) -> DisentangledTokens:
        return rvq_forward(tokens, self.hierarchy) if toggles.quantize else self.projector(tokens)

    def encode_instance(self, series: PreparedSeries, toggles: ModuleToggles) -> InstanceTrace:
        trace = InstanceTrace(visual=self.visual_encoder(series.bundle.pixel_patches).data)
        if toggles.numeric:
            trace.numeric = self.numeric_encoder(series.bundle.numeric_patches).data
            if toggles.pa and toggles.numeric_caption:
                trace.caption = self.text.encode_caption_ids(series.caption_ids).data
        return trace

    def fuse(self, prepared: PreparedSample, toggles: ModuleToggles) -> SampleForward:
        cfg = self.config
        question = self.text.embed_ids(prepared.question_ids).data
        pooled = self.highlighter.pool_question(question) if toggles.cth else None
        zero = Tensor(np.zeros((), dtype=question.dtype))
        l_pa, l_ddi = zero, zero
        blocks, traces, parts = [], [], []

        for series in prepared.series:
            trace = self.encode_instance(series, toggles)
            e_n, e_v = trace.numeric, trace.visual
            fused_n, fused_v = e_n, e_v
            if e_n is not None:
                if toggles.pa:
                    alignment = AlignmentConfig(cfg.tau, toggles.numeric_visual, toggles.numeric_caption)
                    l_pa = l_pa + pa_loss(e_n, e_v, trace.caption, alignment)
                if toggles.ddi and toggles.disentangle:
                    trace.numeric_tokens = self.disentangle(e_n, toggles)
                    trace.visual_tokens = self.disentangle(e_v, toggles)
                    losses = ddi_loss(trace.numeric_tokens, trace.visual_tokens, cfg.alpha, cfg.beta, cfg.tau)
                    parts.append(losses)
                    l_ddi = l_ddi + losses.total
                    fused_n, fused_v = self.interaction(
                        e_n, e_v, trace.numeric_tokens.unique, trace.visual_tokens.unique
                    )
                elif toggles.ddi:
                    fused_n, fused_v = self.interaction(e_n, e_v, e_n, e_v)
            if toggles.cth:
                if e_n is not None:
                    fused_n = self.highlighter(e_n, fused_n, pooled, "numeric")
                fused_v = self.highlighter(e_v, fused_v, pooled, "visual")
            stats = self.text.embed_ids(series.prompt_ids).data
            blocks.append(InstanceBlock(stats, fused_n, fused_v))
            traces.append(trace)

        context = self.text.embed_ids(prepared.context_ids).data
        fused = pos_concat(prepared.context_ids, context, question, blocks, self.vocab.ts_id)
        return SampleForward(fused, l_pa, l_ddi, traces, parts)

    def sample_losses(self, prepared: PreparedSample, toggles: ModuleToggles) -> SampleLosses:
        forward = self.fuse(prepared, toggles)
        l_lm = lm_loss(self.decoder, self.text.embedding.weight, forward.fused, prepared.answer_ids)
        total = total_loss(
            l_lm,
            forward.pa,
            forward.ddi,
            self.config.lambda1 if toggles.pa else 0.0,
            self.config.lambda2 if toggles.ddi else 0.0,
        )
        return SampleLosses(total=total, lm=l_lm, pa=forward.pa, ddi=forward.ddi, forward=forward)

    def answer(self, prepared: PreparedSample, toggles: ModuleToggles, max_len: Optional[int] = None) -> str:
        max_len = self.config.max_answer_tokens if max_len is None else max_len
        with no_grad():
            forward = self.fuse(prepared, toggles)
            return generate(self.decoder, self.text.embedding.weight, forward.fused, self.vocab, max_len)

    def stage_one_frozen(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if name.startswith(STAGE_ONE_FROZEN)]


def build_model(config: RunConfig, vocab: Optional[TextVocab] = None) -> MadiModel:
    set_default_dtype(config.dtype)
    return MadiModel(config, vocab)
