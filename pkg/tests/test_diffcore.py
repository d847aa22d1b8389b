"""Unit tests for the differentiation core, modules and optimizer."""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from diffcore import (
    AdamW,
    ComputationTape,
    Module,
    Parameter,
    Tensor,
    backward,
    concat,
    cosine_lr,
    finite_diff_check,
    gelu,
    layer_norm,
    log_softmax,
    no_grad,
    softmax,
    stop_gradient,
    straight_through,
)
from errors import ContractViolation, NumericalFailureError
from layers import Linear, MultiHeadAttention, TransformerBlock
from patch_alignment import infonce


class TestBackward:
    """Exact gradients on small hand-checkable functions."""

    def test_square(self):
        """f(x) = x*x at x=3 has gradient 6."""
        x = Parameter(np.array(3.0))

        backward(x * x)

        assert float(x.grad[0]) == pytest.approx(6.0)

    def test_stop_gradient_halts_one_factor(self):
        """sum(sg(x) * x) at (1, 2) has gradient (1, 2), not (2, 4)."""
        x = Parameter(np.array([1.0, 2.0]))

        backward((stop_gradient(x) * x).sum())

        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_linear_map(self):
        """sum(W v) with W of ones and v=(1,2) gives [[1,2],[1,2]]."""
        W = Parameter(np.ones((2, 2)))
        v = Tensor(np.array([1.0, 2.0]))

        backward((W @ v).sum())

        np.testing.assert_array_equal(W.grad, [[1.0, 2.0], [1.0, 2.0]])

    def test_shared_node_accumulates(self):
        """A tensor used twice receives the sum of both paths."""
        x = Parameter(np.array([2.0, -1.0]))
        y = x * 3.0

        backward((y + y * y).sum())

        np.testing.assert_allclose(x.grad, 3.0 + 2 * 9.0 * x.data)

    def test_returns_leaf_map(self):
        a = Parameter(np.array([1.0]))
        b = Parameter(np.array([4.0]))

        grads = backward((a * b).sum())

        assert set(grads) == {id(a), id(b)}
        np.testing.assert_array_equal(grads[id(a)], [4.0])

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ContractViolation):
            backward(x * 2.0)

    def test_no_grad_builds_no_graph(self):
        x = Parameter(np.ones(2))
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert backward(y) == {}

    def test_non_finite_forward_is_reported(self):
        x = Parameter(np.array([0.0]))
        with pytest.raises(NumericalFailureError) as excinfo:
            x.log()
        assert excinfo.value.op_name == "log"

    def test_straight_through_copies_gradient(self):
        """Forward emits the quantized values; backward passes the gradient unchanged."""
        x = Parameter(np.array([0.2, 0.7]))
        q = np.array([0.0, 1.0])

        out = straight_through(x, q)
        backward((out * Tensor(np.array([3.0, 5.0]))).sum())

        np.testing.assert_array_equal(out.data, q)
        np.testing.assert_array_equal(x.grad, [3.0, 5.0])

    def test_getitem_scatters_gradient(self):
        x = Parameter(np.arange(6.0).reshape(3, 2))

        backward(x[np.array([0, 0, 2]), np.array([1, 1, 0])].sum())

        np.testing.assert_array_equal(x.grad, [[0.0, 2.0], [0.0, 0.0], [1.0, 0.0]])


class TestComputationTape:
    """Tape recording and bit-exact replay."""

    def test_records_primitives_in_order(self, rng):
        x = Parameter(rng.normal(size=(3, 4)))
        with ComputationTape() as tape:
            softmax(x @ x.transpose(), axis=1).sum()
        assert tape.ops == ["transpose", "matmul", "softmax", "sum"]

    def test_replay_is_bit_exact(self, rng):
        x = Parameter(rng.normal(size=(4, 5)))
        w = Parameter(rng.normal(size=(5, 3)))
        with ComputationTape() as tape:
            h = layer_norm(gelu(x @ w))
            concat([h, stop_gradient(h)], axis=0).mean()
        assert tape.verify_replay()

    def test_replay_follows_new_leaf_values(self, rng):
        x = Parameter(rng.normal(size=3))
        with ComputationTape() as tape:
            (x * 2.0).sum()
        x.data = x.data + 1.0
        replayed = tape.replay()
        assert replayed[-1] == pytest.approx(float(np.sum(x.data * 2.0)))

    def test_tape_inactive_outside_block(self):
        x = Parameter(np.ones(2))
        with ComputationTape() as tape:
            x.sum()
        (x * 2.0).sum()
        assert len(tape.nodes) == 1


class TestFiniteDiffCheck:
    """Central-difference oracle."""

    def test_quadratic(self):
        x = Parameter(np.array([3.0]))
        error = finite_diff_check(lambda: (x * x).sum(), [x], epsilon=1e-3)
        assert error < 1e-6

    def test_infonce_random_embeddings(self, rng):
        """InfoNCE on random 4x8 embeddings with tau=1."""
        anchors = Parameter(rng.normal(size=(4, 8)))
        positives = Tensor(rng.normal(size=(4, 8)))
        error = finite_diff_check(lambda: infonce(anchors, positives, 1.0), [anchors])
        assert error < 1e-3

    def test_stop_gradient_only_input_has_zero_analytic_gradient(self):
        x = Parameter(np.array([1.0, 2.0]))
        backward((stop_gradient(x) * 2.0).sum() + (x * 0.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_attention_block(self, rng):
        block = TransformerBlock(8, 2, rng, causal=True)
        x = Tensor(rng.normal(size=(5, 8)))
        params = [block.attention.query.weight, block.feed_forward.up.bias, block.norm1.weight]
        error = finite_diff_check(lambda: (block(x) ** 2).mean(), params)
        assert error < 1e-3

    def test_log_softmax_cross_entropy(self, rng):
        logits = Parameter(rng.normal(size=(3, 6)))
        labels = np.array([0, 5, 2])
        error = finite_diff_check(lambda: -log_softmax(logits, axis=1)[np.arange(3), labels].sum(), [logits])
        assert error < 1e-3

    def test_non_deterministic_function_rejected(self):
        x = Parameter(np.array([1.0]))
        counter = iter(range(100))
        with pytest.raises(ContractViolation):
            finite_diff_check(lambda: (x * float(next(counter))).sum(), [x])

    def test_epsilon_must_be_positive(self):
        x = Parameter(np.array([1.0]))
        with pytest.raises(ContractViolation):
            finite_diff_check(lambda: x.sum(), [x], epsilon=0.0)


class TestModule:
    """Parameter discovery and state round trips."""

    def test_named_parameters_walk_submodules_and_lists(self, rng):
        class Stack(Module):
            def __init__(self):
                self.layers = [Linear(2, 3, rng), Linear(3, 1, rng, bias=False)]
                self.scale = Parameter(np.ones(1))

        names = [name for name, _ in Stack().named_parameters()]

        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "scale"]

    def test_state_dict_round_trip(self, rng):
        source = MultiHeadAttention(4, 2, rng)
        target = MultiHeadAttention(4, 2, np.random.default_rng(99))

        target.load_state_dict(source.state_dict())

        for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_load_state_dict_rejects_wrong_shape(self, rng):
        layer = Linear(2, 2, rng)
        state = layer.state_dict()
        state["weight"] = np.zeros((3, 2))
        with pytest.raises(ValueError, match="weight"):
            layer.load_state_dict(state)

    def test_zero_out_attention_is_zero_at_init(self, rng):
        attention = MultiHeadAttention(4, 2, rng, zero_out=True)
        out = attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_forward_is_deterministic(self, rng):
        block = TransformerBlock(8, 2, rng)
        x = Tensor(rng.normal(size=(4, 8)))
        np.testing.assert_array_equal(block(x).data, block(x).data)


class TestAdamW:
    """Decoupled weight decay and bias-corrected moments."""

    def test_zero_gradient_only_decays(self):
        p = Parameter(np.array([2.0, -4.0]))
        optimizer = AdamW([("p", p)], lr=0.1, weight_decay=0.01)

        optimizer.step({"p": np.zeros(2)})

        np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.01))

    def test_first_step_moves_by_lr(self):
        """With bias correction the first update is lr * g / (|g| + eps)."""
        p = Parameter(np.array([1.0]))
        optimizer = AdamW([("p", p)], lr=0.01, weight_decay=0.0)

        optimizer.step({"p": np.array([0.5])})

        assert p.data[0] == pytest.approx(1.0 - 0.01, abs=1e-7)
        assert optimizer.state.first_moment["p"][0] == pytest.approx(0.05)
        assert optimizer.state.step == 1

    def test_constant_gradient_update_converges_to_lr(self):
        p = Parameter(np.array([0.0]))
        optimizer = AdamW([("p", p)], lr=1e-3, weight_decay=0.0)
        previous = p.data.copy()
        for _ in range(200):
            optimizer.step({"p": np.array([3.0])})
            update = previous - p.data
            previous = p.data.copy()
        assert update[0] == pytest.approx(1e-3, rel=1e-3)

    def test_frozen_parameters_are_bit_identical(self):
        a = Parameter(np.array([1.0, 2.0]))
        b = Parameter(np.array([3.0]))
        optimizer = AdamW([("a", a), ("b", b)], lr=0.1)

        optimizer.step({"a": np.ones(2), "b": np.ones(1)}, frozen=["a"])

        np.testing.assert_array_equal(a.data, [1.0, 2.0])
        assert b.data[0] != 3.0

    def test_parameter_released_after_freezing_takes_a_full_first_step(self):
        """Bias correction counts a parameter's own updates, so a late starter moves by lr."""
        late = Parameter(np.array([1.0]))
        early = Parameter(np.array([1.0]))
        optimizer = AdamW([("late", late), ("early", early)], lr=0.01, weight_decay=0.0)
        grads = {"late": np.array([0.5]), "early": np.array([0.5])}
        for _ in range(5):
            optimizer.step(grads, frozen=["late"])

        optimizer.step(grads)

        assert late.data[0] == pytest.approx(1.0 - 0.01, abs=1e-7)
        assert optimizer.state.updates == {"late": 1, "early": 6}
        assert optimizer.state.step == 6

    def test_shape_mismatch_names_parameter(self):
        p = Parameter(np.ones(2))
        optimizer = AdamW([("encoder.weight", p)])
        with pytest.raises(ValueError, match="encoder.weight"):
            optimizer.step({"encoder.weight": np.ones(3)})

    def test_missing_gradient_rejected(self):
        optimizer = AdamW([("a", Parameter(np.ones(1))), ("b", Parameter(np.ones(1)))])
        with pytest.raises(ContractViolation):
            optimizer.step({"a": np.ones(1)})

    def test_defaults_to_parameter_grads(self):
        p = Parameter(np.array([1.0]))
        backward((p * p).sum())
        optimizer = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        optimizer.step()
        assert p.data[0] < 1.0


class TestCosineSchedule:
    def test_warmup_then_decay(self):
        lrs = [cosine_lr(step, 100, 1e-3, 0.02) for step in range(100)]
        assert lrs[0] == pytest.approx(5e-4)
        assert lrs[1] == pytest.approx(1e-3)
        assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))
        assert lrs[-1] == pytest.approx(1e-3 * 0.5 * (1 + math.cos(math.pi * 97 / 98)))

    def test_no_warmup(self):
        assert cosine_lr(0, 10, 0.5, 0.0) == pytest.approx(0.5)
