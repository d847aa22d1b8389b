"""Unit tests for question-guided critical-token highlighting."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from diffcore import Tensor, finite_diff_check
from encoders import TokenMatrix
from errors import ConfigurationError, ContractViolation
from highlighting import CriticalTokenHighlighter, prepend


class TestCriticalTokenHighlighter:
    """Pooling, highlighting and prepending."""

    def test_pooled_question_has_one_row_per_query(self, rng):
        highlighter = CriticalTokenHighlighter(8, 3, rng)
        pooled = highlighter.pool_question(Tensor(rng.normal(size=(7, 8))))
        assert pooled.shape == (3, 8)

    def test_highlight_is_sum_of_both_branches(self, rng):
        highlighter = CriticalTokenHighlighter(8, 2, rng)
        tokens = Tensor(rng.normal(size=(5, 8)))
        pooled = highlighter.pool_question(Tensor(rng.normal(size=(4, 8))))

        highlighted = highlighter.highlight(tokens, pooled, "numeric")

        expected = (highlighter.numeric_question(pooled, tokens).data
                    + highlighter.numeric_intrinsic(highlighter.numeric_queries, tokens).data)
        np.testing.assert_allclose(highlighted.data, expected, atol=1e-12)

    def test_question_changes_highlight(self, rng):
        highlighter = CriticalTokenHighlighter(8, 2, rng)
        tokens = Tensor(rng.normal(size=(5, 8)))
        first = highlighter.pool_question(Tensor(rng.normal(size=(3, 8))))
        second = highlighter.pool_question(Tensor(rng.normal(size=(3, 8))))
        assert not np.allclose(
            highlighter.highlight(tokens, first, "visual").data,
            highlighter.highlight(tokens, second, "visual").data,
        )

    def test_forward_prepends_and_keeps_all_tokens(self, rng):
        highlighter = CriticalTokenHighlighter(8, 2, rng)
        tokens = TokenMatrix(Tensor(rng.normal(size=(6, 8))), "numeric")
        fused = Tensor(rng.normal(size=(6, 8)))
        pooled = highlighter.pool_question(Tensor(rng.normal(size=(2, 8))))

        out = highlighter(tokens, fused, pooled, "numeric")

        assert out.shape == (8, 8)
        np.testing.assert_array_equal(out.data[2:], fused.data)

    def test_gradient_reaches_learned_queries(self, rng):
        highlighter = CriticalTokenHighlighter(4, 2, rng)
        tokens = Tensor(rng.normal(size=(3, 4)))
        question = Tensor(rng.normal(size=(2, 4)))

        def loss():
            pooled = highlighter.pool_question(question)
            return (highlighter.highlight(tokens, pooled, "numeric") ** 2).mean()

        error = finite_diff_check(loss, [highlighter.numeric_queries, highlighter.question_queries])
        assert error < 1e-3

    def test_rejects_other_modalities(self, rng):
        highlighter = CriticalTokenHighlighter(4, 1, rng)
        pooled = highlighter.pool_question(Tensor(rng.normal(size=(2, 4))))
        with pytest.raises(ContractViolation):
            highlighter.highlight(Tensor(rng.normal(size=(3, 4))), pooled, "caption")

    def test_empty_question(self, rng):
        highlighter = CriticalTokenHighlighter(4, 1, rng)
        with pytest.raises(ContractViolation):
            highlighter.pool_question(Tensor(np.zeros((0, 4))))

    def test_query_count_must_be_positive(self, rng):
        with pytest.raises(ConfigurationError):
            CriticalTokenHighlighter(4, 0, rng)


class TestPrepend:
    def test_order(self):
        out = prepend(Tensor(np.ones((1, 2))), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, [[1, 1], [0, 0], [0, 0]])

    def test_needs_a_highlighted_row(self):
        with pytest.raises(ContractViolation):
            prepend(Tensor(np.zeros((0, 2))), Tensor(np.zeros((2, 2))))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            prepend(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))
