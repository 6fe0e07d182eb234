"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float64 arrays of rank <= 2. Every op builds a node with a
backward closure; ``backward`` walks the graph in reverse topological order
from a scalar output. The op set is exactly what the bundled networks need:
affine layers, the usual activations, a row-wise softmax, concatenation,
embedding lookup, an LSTM cell, and the special functions (log-gamma via
Lanczos, digamma/trigamma via recurrence plus asymptotic series) that the
Beta log-density requires.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives arrays whose shapes it cannot combine."""


# When False, ops compute values only and build no graph. Used by rollout
# and evaluation paths where gradients are never needed.
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} > 2 not supported")
    return a


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.shape != ():
            raise ShapeError("backward() requires a scalar output, got shape "
                             f"{self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(1.0)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents=parents, backward_fn=backward_fn)


def constant(x) -> Tensor:
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce g back to `shape` after numpy broadcasting in the forward pass
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))
    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))
    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))
    return _make(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s)
    return _make(out, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _make(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))
    return _make(out, (a,), bwd)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))
    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out))
    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)
    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out)
    return _make(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # stable: max(x,0) + log1p(exp(-|x|))
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = _sigmoid_values(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * sig)
    return _make(out, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * inside)
    return _make(out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax for rank-2 input (or a single row for rank-1)."""
    x = a.data
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    else:
        squeeze = False
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = p[0] if squeeze else p

    def bwd(g):
        if a.requires_grad:
            gp = g[None, :] if squeeze else g
            dot = (gp * p).sum(axis=1, keepdims=True)
            grad = p * (gp - dot)
            a._accumulate(grad[0] if squeeze else grad)
    return _make(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    ndims = {d.ndim for d in datas}
    if len(ndims) != 1:
        raise ShapeError(f"concat rank mismatch: {[d.shape for d in datas]}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    return _make(out, tuple(tensors), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of ``table`` (vocab x dim) by integer ids (any 1-d array)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-d, got shape {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding id out of range for vocab {table.data.shape[0]}")
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table._accumulate(acc)
    return _make(out, (table,), bwd)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _make(out, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(reduce_sum(a), 1.0 / n)


def select_columns(a: Tensor, onehot: np.ndarray) -> Tensor:
    """Per-row weighted pick: returns (B,) of sum(a * onehot, axis=1)."""
    if a.data.ndim != 2 or onehot.shape != a.data.shape:
        raise ShapeError(f"select_columns shapes {a.data.shape} vs {onehot.shape}")
    out = (a.data * onehot).sum(axis=1)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * onehot)
    return _make(out, (a,), bwd)


# --- special functions -------------------------------------------------

# Lanczos approximation, g=7, n=9 (double precision)
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])


def _lgamma_scalar(x: float) -> float:
    if x <= 0.0 and x == math.floor(x):
        return math.inf
    if x < 0.5:
        # reflection: ln|Gamma(x)| = ln(pi/|sin(pi x)|) - ln Gamma(1-x)
        return math.log(math.pi / abs(math.sin(math.pi * x))) - _lgamma_scalar(1.0 - x)
    x -= 1.0
    s = _LANCZOS_COEF[0]
    for i in range(1, 9):
        s += _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return 0.5 * math.log(2.0 * math.pi) + (x + 0.5) * math.log(t) - t + math.log(s)


_lgamma_vec = np.vectorize(_lgamma_scalar, otypes=[np.float64])


def lgamma_values(x: np.ndarray) -> np.ndarray:
    return _lgamma_vec(np.asarray(x, dtype=np.float64))


def _digamma_scalar(x: float) -> float:
    if x <= 0.0 and x == math.floor(x):
        return math.nan
    if x < 0.0:
        # reflection: psi(1-x) - psi(x) = pi / tan(pi x)
        return _digamma_scalar(1.0 - x) - math.pi / math.tan(math.pi * x)
    acc = 0.0
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    # de Moivre series: ln x - 1/(2x) - sum B_2n/(2n x^2n)
    series = (math.log(x) - 0.5 * inv
              - inv2 * (1.0 / 12.0
                        - inv2 * (1.0 / 120.0
                                  - inv2 * (1.0 / 252.0
                                            - inv2 * (1.0 / 240.0
                                                      - inv2 * (1.0 / 132.0))))))
    return acc + series


_digamma_vec = np.vectorize(_digamma_scalar, otypes=[np.float64])


def digamma_values(x: np.ndarray) -> np.ndarray:
    return _digamma_vec(np.asarray(x, dtype=np.float64))


def _trigamma_scalar(x: float) -> float:
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1.0 + 0.5 * inv
                    + inv2 * (1.0 / 6.0
                              - inv2 * (1.0 / 30.0
                                        - inv2 * (1.0 / 42.0
                                                  - inv2 * (1.0 / 30.0)))))
    return acc + series


_trigamma_vec = np.vectorize(_trigamma_scalar, otypes=[np.float64])


def trigamma_values(x: np.ndarray) -> np.ndarray:
    return _trigamma_vec(np.asarray(x, dtype=np.float64))


def lgamma(a: Tensor) -> Tensor:
    out = lgamma_values(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * digamma_values(a.data))
    return _make(out, (a,), bwd)


def digamma(a: Tensor) -> Tensor:
    out = digamma_values(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * trigamma_values(a.data))
    return _make(out, (a,), bwd)


# --- recurrent cell -----------------------------------------------------

def recurrent_cell(x: Tensor, h: Tensor, c: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM cell update for a batch: x (B,m), h/c (B,n) -> (h', c').

    Composed from primitives so the backward pass needs no dedicated rule.
    Parameter dict keys: W x{i,f,o,c}, Wh{i,f,o,c}, b{i,f,o,c}.
    """
    def gate(wx, wh, b, act):
        return act(add(add(matmul(x, p[wx]), matmul(h, p[wh])), p[b]))

    i = gate("Wxi", "Whi", "bi", sigmoid)
    f = gate("Wxf", "Whf", "bf", sigmoid)
    o = gate("Wxo", "Who", "bo", sigmoid)
    c_tilde = gate("Wxc", "Whc", "bc", tanh)
    c_new = add(mul(f, c), mul(i, c_tilde))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_param_shapes(input_dim: int, hidden_dim: int) -> dict[str, tuple]:
    shapes = {}
    for gate_name in ("i", "f", "o", "c"):
        shapes[f"Wx{gate_name}"] = (input_dim, hidden_dim)
        shapes[f"Wh{gate_name}"] = (hidden_dim, hidden_dim)
        shapes[f"b{gate_name}"] = (hidden_dim,)
    return shapes


# --- parameter store -----------------------------------------------------

class ParamStore:
    """Named trainable tensors with flatten/unflatten for vector algebra."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def get_flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector length {vec.shape} != parameter count {self.size}")
        i = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[i:i + n].reshape(t.data.shape).copy()
            i += n

    def grad_flat(self) -> np.ndarray:
        parts = []
        for t in self._params.values():
            if t.grad is None:
                parts.append(np.zeros(t.data.size))
            else:
                parts.append(t.grad.ravel().copy())
        return np.concatenate(parts) if parts else np.zeros(0)

    def init_uniform(self, name: str, shape: tuple, fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict):
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r} shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()


CHECKPOINT_FORMAT = "movesd-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamStore, kind: str, meta: dict | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "params": [
            {"name": name, "shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in params.items()
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> tuple[dict, dict, str]:
    """Returns (state_dict, meta, kind). Rejects unknown format/version."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')} in {path}")
    state = {}
    for entry in doc["params"]:
        state[entry["name"]] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return state, doc.get("meta", {}), doc.get("kind", "")


# --- optimizer ------------------------------------------------------------

class Adam:
    """Adam over a ParamStore. ``maximize=True`` ascends the objective."""

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 maximize: bool = False):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.maximize = maximize
        self.t = 0
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)

    def step(self):
        g = self.params.grad_flat()
        if self.maximize:
            g = -g
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        self.params.set_flat(self.params.get_flat() - self.lr * mhat / (np.sqrt(vhat) + self.eps))


# --- gradient checking ----------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-6,
               coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward grads and central differences.

    ``fn`` must rebuild the scalar objective from the current parameter
    values on every call. Relative error per coordinate is
    |g_ad - g_fd| / max(1, |g_fd|). ``coords`` caps how many coordinates
    are probed (a uniform sample without replacement); by default every
    coordinate is checked.
    """
    params.zero_grad()
    out = fn()
    if not np.isfinite(out.item()):
        raise FloatingPointError("objective is non-finite at the current parameters")
    out.backward()
    g_ad = params.grad_flat()

    theta = params.get_flat()
    if coords is None or coords >= theta.size:
        indices = range(theta.size)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(theta.size, size=coords, replace=False)
    worst = 0.0
    for i in indices:
        orig = theta[i]
        theta[i] = orig + eps
        params.set_flat(theta)
        with no_grad():
            f_plus = fn().item()
        theta[i] = orig - eps
        params.set_flat(theta)
        with no_grad():
            f_minus = fn().item()
        theta[i] = orig
        g_fd = (f_plus - f_minus) / (2 * eps)
        rel = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
        if rel > worst:
            worst = rel
    params.set_flat(theta)
    return worst
