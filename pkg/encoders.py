"""
Per-modality encoders producing one D-dimensional token row per patch.

- TextVocab / tokenize: closed template vocabulary shared by captions, prompts and answers
- NumericEncoder: linear blocks over [patch ; position] followed by bidirectional transformer blocks
- VisualEncoder: flattened pixel patches projected to D plus positions, then transformer blocks
- TextEmbedder: the embedding table shared with the decoder; caption mean-pooling and text embedding
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

import datagen
from diffcore import Module, Parameter, Tensor, concat, gelu, take, xavier_uniform
from errors import ContractViolation
from layers import Embedding, Linear, TransformerBlock

logger = logging.getLogger(__name__)

PAD, UNK, TS, EOS = "<pad>", "<unk>", "<ts>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, TS, EOS)
PUNCTUATION = tuple(".,:;?!=|[]-+()")
MODALITIES = ("numeric", "visual", "caption", "text")

TOKEN_PATTERN = re.compile(r"<[a-z]+>|[a-z]+|\d|[^\sa-z\d]")

# words the caption and statistics-prompt formats emit
FORMAT_WORDS = ("t", "max", "min", "mean", "std", "offset", "scaling", "length", "left", "right")


def tokenize(text: str) -> List[str]:
    return TOKEN_PATTERN.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    previous = None
    for token in tokens:
        if previous is not None and previous.isalpha() and token.isalpha():
            out += " "
        out += token
        previous = token
    return out


class TextVocab:
    """Dense token ids over a closed vocabulary; unknown tokens map to <unk>."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("vocabulary tokens must be unique")
        missing = [t for t in SPECIAL_TOKENS if t not in tokens]
        if missing:
            raise ContractViolation(f"vocabulary lacks special tokens {missing}")
        self.tokens = list(tokens)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, extra_texts: Iterable[str] = ()) -> "TextVocab":
        texts = [datagen.CONTEXT_TEMPLATE, datagen.PAIR_CONTEXT_TEMPLATE, *datagen.QUESTION_TEMPLATES.values(),
                 *datagen.ANSWER_WORDS, *FORMAT_WORDS, *extra_texts]
        words = sorted({t for text in texts for t in tokenize(text) if t.isalpha()})
        return cls([*SPECIAL_TOKENS, *[str(d) for d in range(10)], *PUNCTUATION, *words])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def ts_id(self) -> int:
        return self.index[TS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, text: str, strict: bool = False) -> List[int]:
        ids = []
        for token in tokenize(text):
            if token in self.index:
                ids.append(self.index[token])
            elif strict:
                raise ContractViolation(f"token {token!r} is not in the vocabulary")
            else:
                ids.append(self.index[UNK])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        tokens = [self.tokens[i] for i in ids if self.tokens[i] not in (PAD, EOS)]
        return detokenize(tokens)


@dataclass
class TokenMatrix:
    data: Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractViolation(f"unknown modality {self.modality!r}")
        if self.data.ndim != 2:
            raise ContractViolation(f"token matrix must be 2-D, got shape {self.data.shape}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def token_data(tokens) -> Tensor:
    return tokens.data if isinstance(tokens, TokenMatrix) else tokens


class NumericEncoder(Module):
    def __init__(self, patch_size: int, dim: int, rng: np.random.Generator, max_positions: int = 64,
                 blocks: int = 2, heads: int = 4):
        self.patch_size = patch_size
        self.dim = dim
        self.max_positions = max_positions
        self.positions = Parameter(xavier_uniform(rng, (max_positions, dim), max_positions, dim))
        self.input = Linear(patch_size + dim, dim, rng)
        self.hidden = Linear(dim, dim, rng)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(blocks)]

    def forward(self, numeric_patches) -> TokenMatrix:
        patches = np.asarray(numeric_patches)
        if patches.ndim != 2 or patches.shape[1] != self.patch_size:
            raise ValueError(f"numeric patches must be (N, {self.patch_size}), got {patches.shape}")
        count = patches.shape[0]
        if not 1 <= count <= self.max_positions:
            raise ValueError(f"patch count {count} outside [1, {self.max_positions}]")

        x = Tensor(patches.astype(self.positions.dtype))
        h = self.input(concat([x, self.positions[:count]], axis=1))
        h = self.hidden(gelu(h))
        for block in self.blocks:
            h = block(h)
        return TokenMatrix(h, "numeric")


class VisualEncoder(Module):
    def __init__(self, pixel_patch: int, dim: int, rng: np.random.Generator, max_positions: int = 64,
                 blocks: int = 2, heads: int = 4):
        self.pixel_patch = pixel_patch
        self.dim = dim
        self.max_positions = max_positions
        self.projection = Linear(pixel_patch * pixel_patch, dim, rng)
        self.positions = Parameter(xavier_uniform(rng, (max_positions, dim), max_positions, dim))
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(blocks)]

    def forward(self, pixel_patches) -> TokenMatrix:
        patches = np.asarray(pixel_patches)
        if patches.ndim != 3 or patches.shape[1:] != (self.pixel_patch, self.pixel_patch):
            raise ValueError(
                f"pixel patches must be (N, {self.pixel_patch}, {self.pixel_patch}), got {patches.shape}"
            )
        count = patches.shape[0]
        if not 1 <= count <= self.max_positions:
            raise ValueError(f"patch count {count} outside [1, {self.max_positions}]")

        flat = Tensor(patches.reshape(count, -1).astype(self.positions.dtype))
        h = self.projection(flat) + self.positions[:count]
        for block in self.blocks:
            h = block(h)
        return TokenMatrix(h, "visual")


class TextEmbedder(Module):
    """Owns the token embedding table; the decoder reads the same table as its output matrix."""

    def __init__(self, vocab: TextVocab, dim: int, rng: np.random.Generator):
        self.vocab = vocab
        self.embedding = Embedding(len(vocab), dim, rng)

    def embed_ids(self, ids: Sequence[int], modality: str = "text") -> TokenMatrix:
        return TokenMatrix(self.embedding(np.asarray(ids, dtype=np.int64)), modality)

    def embed_text(self, text: str) -> TokenMatrix:
        ids = self.vocab.encode(text)
        if not ids:
            raise ContractViolation("embed_text needs non-empty text")
        return self.embed_ids(ids)

    def encode_caption_ids(self, caption_ids: Sequence[Sequence[int]]) -> TokenMatrix:
        """Mean-pool each caption's token embeddings into one row per patch."""
        if not caption_ids:
            raise ContractViolation("no captions to encode")
        lengths = [len(ids) for ids in caption_ids]
        if min(lengths) == 0:
            raise ContractViolation("every caption needs at least one token")
        pooling = np.zeros((len(caption_ids), sum(lengths)), dtype=self.embedding.weight.dtype)
        start = 0
        for row, n in enumerate(lengths):
            pooling[row, start:start + n] = 1.0 / n
            start += n
        flat_ids = np.concatenate([np.asarray(ids, dtype=np.int64) for ids in caption_ids])
        return TokenMatrix(Tensor(pooling) @ take(self.embedding.weight, flat_ids), "caption")

    def encode_caption(self, captions: Sequence[str]) -> TokenMatrix:
        return self.encode_caption_ids([self.vocab.encode(c) for c in captions])
