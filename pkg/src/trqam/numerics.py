"""Small reverse-mode autodiff, MLPs, Adam and gradient clipping.

Everything runs in float64. Parameters of a network live in a single flat
array (:class:`ParamVector`) laid out layer by layer: the weight matrix of
shape ``(n_out, n_in)`` in row-major order, followed by the bias of length
``n_out``. A layer computes ``x @ W.T + b``.

The autodiff tape only knows a closed set of primitives: affine maps,
the three activations, addition/subtraction, elementwise products (which
includes scaling by constants), ``sum``, ``mean`` and ``sqnorm``. Any other
numpy operation applied to a :class:`Var` raises :class:`UnsupportedOpError`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    FormatError,
    InvalidArchitectureError,
    NonFiniteGradientError,
    ShapeError,
    UnsupportedOpError,
)

ACTIVATIONS = ("gelu", "tanh", "relu")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def count_params(layer_sizes: Sequence[int]) -> int:
    return int(sum(n_in * n_out + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])))


def _check_layer_sizes(layer_sizes) -> tuple[int, ...]:
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 2 or any(n <= 0 for n in sizes):
        raise InvalidArchitectureError(f"layer_sizes needs >=2 positive entries, got {list(layer_sizes)}")
    return sizes


@dataclass(frozen=True)
class ParamVector:
    """Flat, read-only parameter store of an MLP."""

    layer_sizes: tuple[int, ...]
    values: np.ndarray = field(repr=False)
    activation: str = "gelu"

    def __post_init__(self):
        sizes = _check_layer_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise InvalidArchitectureError(f"unknown activation {self.activation!r}")
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != count_params(sizes):
            raise ShapeError(f"expected {count_params(sizes)} values for {list(sizes)}, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteGradientError("parameter vector contains non-finite entries")
        values.flags.writeable = False
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "values", values)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``values`` for every layer."""
        out, offset = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.values[offset : offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = self.values[offset : offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.layer_sizes, values, self.activation)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def mlp_init(layer_sizes: Sequence[int], activation: str = "gelu", seed: int = 0) -> ParamVector:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    sizes = _check_layer_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ParamVector(sizes, np.concatenate(chunks), activation)


# ---------------------------------------------------------------------------
# activations (shared by the plain forward pass and the tape)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z / _SQRT2))
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return (z > 0.0).astype(np.float64)


def mlp_forward(params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.in_dim:
        raise ShapeError(f"input has last dimension {h.shape[-1]}, network expects {params.in_dim}")
    layers = params.layers()
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = _act(params.activation, h)
    return h


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """A node of the reverse-mode tape.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps the cotangent
    of this node to the cotangent contribution of ``node``.
    """

    __slots__ = ("value", "parents", "requires_grad", "grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(p for p in parents if p[0].requires_grad)
        self.requires_grad = bool(requires_grad or self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # ndarray (op) Var lands here; only the traced arithmetic is allowed
        op = _UFUNC_OPS.get(ufunc.__name__)
        if op is None or method != "__call__" or kwargs or len(inputs) != 2:
            raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} is not a supported primitive")
        return op(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy function {func.__name__!r} is not a supported primitive")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnsupportedOpError("division by a traced value is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, _):
        raise UnsupportedOpError("power is not a supported primitive; use mul or sqnorm")

    def __matmul__(self, _):
        raise UnsupportedOpError("matmul is not a supported primitive; use affine")

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if not isinstance(x, (np.ndarray, float, int, np.floating, np.integer)):
        raise UnsupportedOpError(f"cannot trace a value of type {type(x).__name__}")
    return Var(x)


def leaf(value) -> Var:
    return Var(value, requires_grad=True)


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value + b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value - b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))),
    )


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value * b.value,
        ((a, lambda g: _unbroadcast(g * b.value, a.shape)), (b, lambda g: _unbroadcast(g * a.value, b.shape))),
    )


_UFUNC_OPS = {"add": add, "subtract": sub, "multiply": mul}


def affine(x, w, b) -> Var:
    x, w, b = _as_var(x), _as_var(w), _as_var(b)
    xv = x.value

    def grad_w(g):
        if xv.ndim == 1:
            return np.outer(g, xv)
        return g.T @ xv

    return Var(
        xv @ w.value.T + b.value,
        ((x, lambda g: g @ w.value), (w, grad_w), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def activation(name: str, x) -> Var:
    if name not in ACTIVATIONS:
        raise UnsupportedOpError(f"unknown activation {name!r}")
    x = _as_var(x)
    z = x.value
    return Var(_act(name, z), ((x, lambda g: g * _act_grad(name, z)),))


def gelu(x) -> Var:
    return activation("gelu", x)


def tanh(x) -> Var:
    return activation("tanh", x)


def relu(x) -> Var:
    return activation("relu", x)


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def vsum(x, axis=None) -> Var:
    x = _as_var(x)
    return Var(x.value.sum(axis=axis), ((x, lambda g: _expand(g, x.shape, axis)),))


def mean(x, axis=None) -> Var:
    x = _as_var(x)
    n = x.value.size if axis is None else x.shape[axis]
    return Var(x.value.mean(axis=axis), ((x, lambda g: _expand(g, x.shape, axis) / n),))


def sqnorm(x, axis=None) -> Var:
    """Sum of squares, over everything or along ``axis``."""
    x = _as_var(x)
    xv = x.value
    return Var((xv * xv).sum(axis=axis), ((x, lambda g: 2.0 * _expand(g, x.shape, axis) * xv),))


def backward(root: Var, seed=None) -> None:
    """Accumulate ``d(seed . root)/d(leaf)`` into ``leaf.grad`` for every reachable leaf."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib


def mlp_graph(params: ParamVector, x, leaves=None) -> Var:
    """Trace the network on ``x``. ``leaves`` are the traced ``(W, b)`` pairs, if any."""
    h = _as_var(x)
    if h.shape[-1] != params.in_dim:
        raise ShapeError(f"input has last dimension {h.shape[-1]}, network expects {params.in_dim}")
    layers = leaves if leaves is not None else params.layers()
    for i, (w, b) in enumerate(layers):
        h = affine(h, w, b)
        if i < len(layers) - 1:
            h = activation(params.activation, h)
    return h


def grad_params(params: ParamVector, loss_fn: Callable) -> tuple[float, np.ndarray]:
    """Value and exact gradient of a scalar loss built from the network.

    ``loss_fn`` receives ``net``, a callable mapping an input array (or traced
    value) to the traced network output, and must return a scalar :class:`Var`.
    """
    leaves = [(leaf(w), leaf(b)) for w, b in params.layers()]
    loss = loss_fn(lambda x: mlp_graph(params, x, leaves))
    if not isinstance(loss, Var):
        raise UnsupportedOpError(
            f"loss_fn returned {type(loss).__name__}; the loss must be built from traced primitives"
        )
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.requires_grad:
        backward(loss)
    chunks = []
    for w, b in leaves:
        chunks.append(np.zeros(w.value.size) if w.grad is None else w.grad.reshape(-1))
        chunks.append(np.zeros(b.value.size) if b.grad is None else b.grad.reshape(-1))
    return float(loss.value.reshape(-1)[0]), np.concatenate(chunks)


def vjp_input(params: ParamVector, x, cotangent) -> np.ndarray:
    """``cotangent^T d(net)/dx`` for one input or row-wise over a batch."""
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has last dimension {x.shape[-1]}, network expects {params.in_dim}")
    if cotangent.shape != x.shape[:-1] + (params.out_dim,):
        raise ShapeError(f"cotangent shape {cotangent.shape} does not match output {x.shape[:-1] + (params.out_dim,)}")
    xv = leaf(x)
    out = mlp_graph(params, xv)
    backward(out, cotangent)
    return np.zeros_like(x) if xv.grad is None else xv.grad


# ---------------------------------------------------------------------------
# optimization


def global_norm(grads: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(grads))))


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("gradient contains non-finite entries")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: ParamVector, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    n = params.values.size
    return OptimizerState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: OptimizerState, params: ParamVector, grads) -> tuple[OptimizerState, ParamVector]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.m.shape or grads.size != params.values.size:
        raise ShapeError(f"gradient shape {grads.shape} does not match parameters {params.values.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, params.with_values(new_values)


# ---------------------------------------------------------------------------
# binary format: b"TRQP", u32 version, u32 layer count, u32 sizes..., f64 payload

PARAM_MAGIC = b"TRQP"
PARAM_VERSION = 1


def params_to_bytes(params: ParamVector) -> bytes:
    header = PARAM_MAGIC + struct.pack("<II", PARAM_VERSION, len(params.layer_sizes))
    header += struct.pack(f"<{len(params.layer_sizes)}I", *params.layer_sizes)
    return header + params.values.astype("<f8").tobytes()


def params_from_bytes(blob: bytes, activation: str = "gelu") -> ParamVector:
    if len(blob) < 12 or blob[:4] != PARAM_MAGIC:
        raise FormatError("not a parameter file (bad magic)")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported parameter format version {version}")
    offset = 12 + 4 * n_layers
    if len(blob) < offset:
        raise FormatError("truncated header")
    sizes = struct.unpack_from(f"<{n_layers}I", blob, 12)
    if (len(blob) - offset) % 8:
        raise FormatError("payload is not a whole number of f64 values")
    payload = np.frombuffer(blob, dtype="<f8", offset=offset)
    try:
        return ParamVector(sizes, payload.astype(np.float64), activation)
    except (ShapeError, InvalidArchitectureError) as exc:
        raise FormatError(f"corrupt parameter payload: {exc}") from exc


def save_params(path, params: ParamVector) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, activation: str = "gelu") -> ParamVector:
    return params_from_bytes(Path(path).read_bytes(), activation)
