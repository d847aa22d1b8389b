"""
Minimal reverse-mode differentiation core.

Every encoder, loss and optimizer in the pipeline is built on the primitives here:
- Tensor: numpy-backed value with an optional gradient buffer
- Function subclasses: recorded primitives with an exact backward rule
- ComputationTape: ordered record of the primitives executed inside a ``with`` block
- backward / finite_diff_check: gradient computation and its numerical oracle
- Module / Parameter: named parameter containers
- AdamW + cosine_lr: the optimizer and learning-rate schedule
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractViolation, NumericalFailureError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used for new tensors and parameters."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def current_tape() -> Optional["ComputationTape"]:
    return getattr(_state, "tape", None)


@contextmanager
def no_grad():
    """Disable graph construction for gradients (inference and numeric probing)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# --- Tensor ---

class Tensor:
    """A real-valued array that can take part in reverse-mode differentiation."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _ctx=None):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            array = data
        else:
            array = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx = _ctx

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op_name(self) -> str:
        return self._ctx.name if self._ctx is not None else "leaf"

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def backward(self) -> Dict[int, np.ndarray]:
        return backward(self)

    # arithmetic
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, other)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False): return Sum.apply(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims: bool = False): return Mean.apply(self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes) if axes else None)
    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def abs(self): return Abs.apply(self)
    def sqrt(self): return Sqrt.apply(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: Optional[str] = None):
        array = np.array(data, dtype=_DEFAULT_DTYPE, copy=True)
        super().__init__(np.ascontiguousarray(array), requires_grad=True, name=name)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or _DEFAULT_DTYPE))


# --- Tape ---

class ComputationTape:
    """
    Ordered record of the primitives executed while the tape is active.

    Use as a context manager; tapes are thread-local, so independent tapes may run on
    independent threads.
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self._previous = None

    def __enter__(self):
        self._previous = current_tape()
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._previous
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    @property
    def ops(self) -> List[str]:
        return [node.op_name for node in self.nodes]

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded primitive in order from the current leaf values."""
        values: Dict[int, np.ndarray] = {}
        replayed = []
        for node in self.nodes:
            ctx = node._ctx
            inputs = [values.get(id(parent), parent.data) for parent in ctx.parents]
            result = np.asarray(ctx.forward(*inputs, **ctx.options), dtype=node.data.dtype)
            values[id(node)] = result
            replayed.append(result)
        return replayed

    def verify_replay(self) -> bool:
        """True when replaying reproduces every recorded forward value bit-for-bit."""
        return all(np.array_equal(value, node.data) for value, node in zip(self.replay(), self.nodes))


# --- Primitive machinery ---

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(a % len(shape) for a in axes))
        for a in axes:
            grad = np.expand_dims(grad, a)
    return np.array(np.broadcast_to(grad, shape))


class Function:
    """A differentiable primitive. Subclasses implement ``forward`` and ``backward``."""

    name = "op"
    differentiable = True

    def __init__(self, *parents: Tensor, **options):
        self.parents = parents
        self.options = options

    def forward(self, *arrays, **options) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **options) -> Tensor:
        anchor = next((t.data.dtype for t in inputs if isinstance(t, Tensor)), np.dtype(_DEFAULT_DTYPE))
        tensors = [as_tensor(t, dtype=anchor) for t in inputs]
        ctx = cls(*tensors, **options)
        out_dtype = np.result_type(*[t.data.dtype for t in tensors])
        data = np.asarray(ctx.forward(*[t.data for t in tensors], **options), dtype=out_dtype)
        if not np.all(np.isfinite(data)):
            raise NumericalFailureError(f"non-finite value produced by {cls.name}", cls.name)
        requires_grad = cls.differentiable and _grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(data, requires_grad=requires_grad, _ctx=ctx)
        tape = current_tape()
        if tape is not None:
            tape.record(out)
        return out


class Add(Function):
    name = "add"

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "multiply"

    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    name = "divide"

    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Neg(Function):
    name = "negate"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    name = "pow"

    def forward(self, x, exponent):
        self.x = x
        return x ** exponent

    def backward(self, grad):
        p = self.options["exponent"]
        return (grad * p * self.x ** (p - 1),)


class MatMul(Function):
    name = "matmul"

    def forward(self, x, y):
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        x, y = self.x, self.y
        x2 = x[None, :] if x.ndim == 1 else x
        y2 = y[:, None] if y.ndim == 1 else y
        g = grad
        if x.ndim == 1:
            g = np.expand_dims(g, -2)
        if y.ndim == 1:
            g = np.expand_dims(g, -1)
        gx = np.matmul(g, np.swapaxes(y2, -1, -2))
        gy = np.matmul(np.swapaxes(x2, -1, -2), g)
        gx = _unbroadcast(gx, x2.shape).reshape(x.shape)
        gy = _unbroadcast(gy, y2.shape).reshape(y.shape)
        return gx, gy


class Exp(Function):
    name = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.x = x
        return np.abs(x)

    def backward(self, grad):
        return (grad * np.sign(self.x),)


class Gelu(Function):
    """tanh approximation of GELU."""

    name = "gelu"
    _k = math.sqrt(2.0 / math.pi)

    def forward(self, x):
        self.x = x
        self.t = np.tanh(self._k * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * self._k * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.options["axis"], self.options["keepdims"]),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        out = np.mean(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        full = _expand_reduced(grad, self.shape, self.options["axis"], self.options["keepdims"])
        return (full / self.count,)


class Softmax(Function):
    """Softmax with max-subtraction; masked entries get probability 0."""

    name = "softmax"

    def forward(self, x, axis=-1, mask=None):
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        axis = self.options["axis"]
        return (self.out * (grad - np.sum(grad * self.out, axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        logsum = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        out = shifted - logsum
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        axis = self.options["axis"]
        return (grad - self.probs * np.sum(grad, axis=axis, keepdims=True),)


class LayerNormalize(Function):
    """Standardize along the last axis (affine part lives in layers.LayerNorm)."""

    name = "layer_norm"

    def forward(self, x, eps=1e-5):
        mu = np.mean(x, axis=-1, keepdims=True)
        var = np.var(x, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat

    def backward(self, grad):
        xhat = self.xhat
        g_mean = np.mean(grad, axis=-1, keepdims=True)
        gx_mean = np.mean(grad * xhat, axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - xhat * gx_mean),)


class L2Normalize(Function):
    """Row normalization with the norm floored at ``floor``."""

    name = "l2_normalize"

    def forward(self, x, floor=1e-12):
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        self.clamped = norm <= floor
        self.norm = np.maximum(norm, floor)
        self.out = x / self.norm
        return self.out

    def backward(self, grad):
        y = self.out
        projected = (grad - y * np.sum(grad * y, axis=-1, keepdims=True)) / self.norm
        return (np.where(self.clamped, grad / self.norm, projected),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis = self.options["axis"]
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=axis))


class GetItem(Function):
    name = "slice"

    def forward(self, x, index=None):
        self.shape = x.shape
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.options["index"], grad)
        return (full,)


class Take(Function):
    """Row gather ``table[ids]`` (embedding lookup)."""

    name = "take"

    def forward(self, table, ids=None):
        self.shape = table.shape
        return table[np.asarray(ids, dtype=np.int64)]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, np.asarray(self.options["ids"], dtype=np.int64), grad)
        return (full,)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=None):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class StopGradient(Function):
    """sg[x]: identity forward, zero gradient upstream."""

    name = "stop_gradient"
    differentiable = False

    def forward(self, x):
        return x.copy()

    def backward(self, grad):
        return (None,)


class StraightThrough(Function):
    """Forward emits the quantized values; backward copies the gradient to the input."""

    name = "straight_through"

    def forward(self, x, quantized=None):
        quantized = np.asarray(quantized)
        if quantized.shape != x.shape:
            raise ValueError(f"quantized shape {quantized.shape} does not match input {x.shape}")
        return quantized.copy()

    def backward(self, grad):
        return (grad,)


# --- Functional helpers ---

def stop_gradient(x) -> Tensor:
    return StopGradient.apply(x)


def straight_through(x: Tensor, quantized: np.ndarray) -> Tensor:
    return StraightThrough.apply(x, quantized=quantized)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNormalize.apply(x, eps=eps)


def l2_normalize(x: Tensor, floor: float = 1e-12) -> Tensor:
    return L2Normalize.apply(x, floor=floor)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def take(table: Tensor, ids) -> Tensor:
    return Take.apply(table, ids=np.asarray(ids, dtype=np.int64))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    return l2_normalize(a) @ l2_normalize(b).transpose()


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of matching rows."""
    return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)


# --- Backward ---

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Propagate gradients from a scalar loss to every reachable tensor that requires grad.

    Each reachable tensor's ``grad`` is overwritten with its exact gradient. Returns a map
    from ``id(parameter)`` to gradient for every reachable leaf.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: Dict[int, np.ndarray] = {}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad
        if node._ctx is None:
            leaf_grads[id(node)] = grad
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NumericalFailureError(
                    f"non-finite gradient produced by {node._ctx.name}", node._ctx.name
                )
            parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return leaf_grads


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """
    Compare analytic gradients of ``f`` against central differences.

    Args:
        f: zero-argument callable rebuilding the scalar loss from the current parameter values
        params: tensors whose every coordinate is perturbed
        epsilon: perturbation size

    Returns:
        max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")

    loss = f()
    repeat = f()
    if not np.array_equal(loss.data, repeat.data):
        raise ContractViolation("f is not deterministic: repeated evaluation changed the loss")

    for p in params:
        p.grad = None
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            for idx in np.ndindex(p.data.shape):
                original = p.data[idx]
                p.data[idx] = original + epsilon
                plus = float(f().data)
                p.data[idx] = original - epsilon
                minus = float(f().data)
                p.data[idx] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                exact = float(grad[idx])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                worst = max(worst, error)
    return worst


# --- Modules ---

def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container that discovers Parameters, sub-Modules and buffers through its attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in vars(self):
            self._buffers = {}
        self._buffers[name] = value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk_parameters(f"{prefix}{name}", value)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).get("_buffers", {}).items():
            yield f"{prefix}{name}", value
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"parameter {name}: expected shape {p.data.shape}, got {value.shape}")
            p.data = np.ascontiguousarray(value.astype(p.data.dtype, copy=True))
        for name, _ in list(self.named_buffers()):
            if name in state:
                self._set_buffer(name, np.array(state[name], copy=True))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest and head in vars(self) and isinstance(vars(self)[head], Module):
            vars(self)[head]._set_buffer(rest, value)
            return
        if rest and head in vars(self) and isinstance(vars(self)[head], (list, tuple)):
            index, _, tail = rest.partition(".")
            vars(self)[head][int(index)]._set_buffer(tail, value)
            return
        current = self._buffers[dotted]
        if current.shape != value.shape:
            raise ValueError(f"buffer {dotted}: expected shape {current.shape}, got {value.shape}")
        self._buffers[dotted] = value.astype(current.dtype)


def _walk_parameters(name: str, value) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_parameters(f"{name}.{i}", item)


# --- Optimizer ---

@dataclass
class OptimizerState:
    """Per-parameter AdamW moments and update counts plus the global step counter."""

    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    decoupled: bool = True
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    # bias correction runs on each parameter's own count; frozen steps do not advance it
    updates: Dict[str, int] = field(default_factory=dict)


class AdamW:
    """AdamW with bias correction and (optionally) decoupled weight decay."""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, decoupled: bool = True):
        self.params: Dict[str, Parameter] = dict(named_params)
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, decoupled=decoupled)
        for name, p in self.params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)
            self.state.updates[name] = 0

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None, lr: Optional[float] = None,
             frozen: Iterable[str] = ()) -> Dict[str, Parameter]:
        """
        Apply one update.

        Args:
            grads: gradient per parameter name; defaults to each parameter's ``grad``
                (missing gradients count as zero)
            lr: learning rate for this step (schedule value); defaults to the base rate
            frozen: parameter names left bit-identical by this step
        """
        state = self.state
        if grads is None:
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in self.params.items()}
        missing = [name for name in self.params if name not in grads]
        if missing:
            raise ContractViolation(f"no gradient supplied for parameters: {', '.join(missing[:5])}")

        frozen = set(frozen)
        lr = state.lr if lr is None else lr
        beta1, beta2 = state.betas
        state.step += 1

        for name, p in self.params.items():
            if name in frozen:
                continue
            g = np.asarray(grads[name])
            if g.shape != p.data.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
            g = g.astype(p.data.dtype, copy=False)
            state.updates[name] = state.updates.get(name, 0) + 1
            t = state.updates[name]
            if not state.decoupled and state.weight_decay:
                g = g + state.weight_decay * p.data
            m = state.first_moment[name]
            v = state.second_moment[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            if state.decoupled and state.weight_decay:
                p.data *= (1.0 - lr * state.weight_decay)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        return self.params


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.02) -> float:
    """Linear warmup over ``ceil(warmup_ratio * total)`` steps, then cosine decay to zero."""
    if total_steps <= 0:
        return base_lr
    warmup = math.ceil(warmup_ratio * total_steps)
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
