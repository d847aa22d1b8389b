"""
Critical-token highlighting.

The question is pooled into H summary rows; each modality is then read twice, once by the
pooled question and once by modality-specific learned queries. The two readings are summed
and prepended to the modality's tokens, which are kept in full.
"""

import numpy as np

from diffcore import Module, Parameter, Tensor, concat, xavier_uniform
from encoders import token_data
from errors import ConfigurationError, ContractViolation
from layers import MultiHeadAttention


class CriticalTokenHighlighter(Module):
    def __init__(self, dim: int, queries: int, rng: np.random.Generator, heads: int = 1):
        if queries < 1:
            raise ConfigurationError(f"highlight query count must be at least 1, got {queries}")
        self.queries = queries
        self.dim = dim
        self.question_queries = Parameter(xavier_uniform(rng, (queries, dim), queries, dim))
        self.numeric_queries = Parameter(xavier_uniform(rng, (queries, dim), queries, dim))
        self.visual_queries = Parameter(xavier_uniform(rng, (queries, dim), queries, dim))
        self.question_pool = MultiHeadAttention(dim, heads, rng)
        self.numeric_question = MultiHeadAttention(dim, heads, rng)
        self.numeric_intrinsic = MultiHeadAttention(dim, heads, rng)
        self.visual_question = MultiHeadAttention(dim, heads, rng)
        self.visual_intrinsic = MultiHeadAttention(dim, heads, rng)

    def pool_question(self, question) -> Tensor:
        e_q = token_data(question)
        if e_q.shape[0] == 0:
            raise ContractViolation("cannot pool an empty question")
        return self.question_pool(self.question_queries, e_q)

    def highlight(self, tokens, pooled_question: Tensor, modality: str) -> Tensor:
        """H^o = CrossAttn(pooled question, E^o) + CrossAttn(Q^o, E^o)."""
        e = token_data(tokens)
        if modality == "numeric":
            question_branch, intrinsic_branch, queries = self.numeric_question, self.numeric_intrinsic, self.numeric_queries
        elif modality == "visual":
            question_branch, intrinsic_branch, queries = self.visual_question, self.visual_intrinsic, self.visual_queries
        else:
            raise ContractViolation(f"highlighting applies to numeric or visual tokens, not {modality!r}")
        return question_branch(pooled_question, e) + intrinsic_branch(queries, e)

    def forward(self, tokens, fused_tokens, pooled_question: Tensor, modality: str) -> Tensor:
        return prepend(self.highlight(tokens, pooled_question, modality), fused_tokens)


def prepend(highlighted, tokens) -> Tensor:
    h, e = token_data(highlighted), token_data(tokens)
    if h.shape[0] == 0:
        raise ContractViolation("at least one highlighted row is required")
    if h.shape[1] != e.shape[1]:
        raise ValueError(f"highlighted rows have dimension {h.shape[1]}, tokens have {e.shape[1]}")
    return concat([h, e], axis=0)
