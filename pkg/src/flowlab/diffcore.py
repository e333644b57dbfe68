"""Minimal reverse-mode autodiff over dense float64 tensors.

This is the numeric substrate for the whole lab: a small computation-graph
engine (micrograd-style, but tensor-valued and numpy-backed), a named
parameter store with deterministic iteration order, a bias-corrected Adam
optimizer, and counter-based random streams so that parallel rollouts stay
reproducible.

Everything runs in float64; only checkpoint files downcast to float32.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DiffcoreError(ValueError):
    """Contract violation inside the autodiff/optimizer layer."""


def _flat64(x) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    return a.reshape(-1), a.shape


class Tensor:
    """A dense float64 tensor that records how it was computed.

    Storage is a flat value buffer plus a shape tuple; `data` exposes the
    shaped (zero-copy) view that ops work with. `grad` is allocated lazily
    by `backward` and always matches `values` in length.
    """

    __slots__ = ("shape", "values", "grad", "_parents", "_bwd")

    def __init__(self, data, _parents: tuple = (), _bwd: Callable | None = None):
        self.values, self.shape = _flat64(data)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._bwd = _bwd

    @property
    def data(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    @property
    def grad_data(self) -> np.ndarray | None:
        return None if self.grad is None else self.grad.reshape(self.shape)

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.values.size)
        self.grad.reshape(self.shape).__iadd__(g)

    def item(self) -> float:
        if self.values.size != 1:
            raise DiffcoreError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- operator sugar; python scalars broadcast, Tensor-Tensor needs compatible shapes --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b for same-shape tensors, matrix + row vector (bias), or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data + s, (a,))
        out._bwd = lambda g: a._acc(g)
        return out
    if a.shape == b.shape:
        out = Tensor(a.data + b.data, (a, b))

        def bwd(g):
            a._acc(g)
            b._acc(g)

        out._bwd = bwd
        return out
    if len(a.shape) == 2 and b.shape == (a.shape[1],):
        out = Tensor(a.data + b.data[None, :], (a, b))

        def bwd_bias(g):
            a._acc(g)
            b._acc(g.sum(axis=0))

        out._bwd = bwd_bias
        return out
    raise DiffcoreError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s, (a,))
        out._bwd = lambda g: a._acc(g * s)
        return out
    if a.shape != b.shape:
        raise DiffcoreError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g):
        a._acc(g * b.data)
        b._acc(g * a.data)

    out._bwd = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,n) @ (n,p) or (m,n) @ (n,)."""
    if len(a.shape) != 2 or len(b.shape) not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DiffcoreError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))
    if len(b.shape) == 2:

        def bwd(g):
            a._acc(g @ b.data.T)
            b._acc(a.data.T @ g)

    else:

        def bwd(g):
            a._acc(np.outer(g, b.data))
            b._acc(a.data.T @ g)

    out._bwd = bwd
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p, (a,))
    out._bwd = lambda g: a._acc(g * p * a.data ** (p - 1.0))
    return out


def square(a: Tensor) -> Tensor:
    return power(a, 2.0)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, (a,))
    out._bwd = lambda g: a._acc(g * e)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))
    out._bwd = lambda g: a._acc(g / a.data)
    return out


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    out = Tensor(r, (a,))
    out._bwd = lambda g: a._acc(g * 0.5 / r)
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, (a,))
    out._bwd = lambda g: a._acc(g * (1.0 - t * t))
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, (a,))
    out._bwd = lambda g: a._acc(g * s * (1.0 - s))
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1+e^x) = max(x,0) + log1p(e^{-|x|}) keeps both tails finite
    x = a.data
    v = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = 1.0 / (1.0 + np.exp(-x))
    out = Tensor(v, (a,))
    out._bwd = lambda g: a._acc(g * s)
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), (a,))
    out._bwd = lambda g: a._acc(np.full(a.shape, g.reshape(-1)[0]))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor(a.data.mean(), (a,))
    out._bwd = lambda g: a._acc(np.full(a.shape, g.reshape(-1)[0] / n))
    return out


def sum_rows(a: Tensor) -> Tensor:
    """(m,n) -> (m,) row sums."""
    if len(a.shape) != 2:
        raise DiffcoreError(f"sum_rows expects a matrix, got {a.shape}")
    out = Tensor(a.data.sum(axis=1), (a,))
    out._bwd = lambda g: a._acc(np.repeat(g[:, None], a.shape[1], axis=1))
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Column-concatenate matrices of equal row count."""
    parts = list(parts)
    if not parts or any(len(p.shape) != 2 for p in parts):
        raise DiffcoreError("concat_cols expects a non-empty list of matrices")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise DiffcoreError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=1)):
            p._acc(gp)

    out._bwd = bwd
    return out


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if len(a.shape) != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise DiffcoreError(f"slice_cols: bad range [{lo},{hi}) for shape {a.shape}")
    out = Tensor(a.data[:, lo:hi].copy(), (a,))

    def bwd(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        a._acc(full)

    out._bwd = bwd
    return out


def rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a matrix (embedding lookup); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(table.shape) != 2:
        raise DiffcoreError("rows expects a matrix table")
    out = Tensor(table.data[idx], (table,))

    def bwd(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        table._acc(full)

    out._bwd = bwd
    return out


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a matrix a."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(a.shape) != 2 or idx.shape != (a.shape[0],):
        raise DiffcoreError("take_per_row: need (m,n) tensor and (m,) index")
    ar = np.arange(a.shape[0])
    out = Tensor(a.data[ar, idx], (a,))

    def bwd(g):
        full = np.zeros(a.shape)
        full[ar, idx] = g
        a._acc(full)

    out._bwd = bwd
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (ties -> a)."""
    if a.shape != b.shape:
        raise DiffcoreError(f"minimum: shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b))

    def bwd(g):
        a._acc(g * take_a)
        b._acc(g * ~take_a)

    out._bwd = bwd
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside the band."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), (a,))
    out._bwd = lambda g: a._acc(g * inside)
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax for (m,K) logits."""
    if len(a.shape) != 2:
        raise DiffcoreError("log_softmax_rows expects a matrix")
    z = a.data - a.data.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(ls)
    out = Tensor(ls, (a,))
    out._bwd = lambda g: a._acc(g - p * g.sum(axis=1, keepdims=True))
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo(out: Tensor) -> list[Tensor]:
    # iterative post-order; rollout graphs get deep enough that recursion is unsafe
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, store: "ParamStore | None" = None) -> None:
    """Reverse accumulation from a scalar output.

    Gradients on every node reachable from `out` are recomputed from scratch
    (no cross-call accumulation). When `store` is given, parameters that do
    not participate in the graph get exact zero gradients.
    """
    if out.values.size != 1:
        raise DiffcoreError(f"backward requires a scalar output, got shape {out.shape}")
    order = _topo(out)
    for t in order:
        t.grad = None
    out._acc(np.ones(out.shape))
    for t in reversed(order):
        if t._bwd is not None:
            t._bwd(t.grad.reshape(t.shape))
    if store is not None:
        for _, p in store.items():
            if p.grad is None:
                p.grad = np.zeros(p.values.size)


# ---------------------------------------------------------------------------
# parameters + optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors; iteration is always lexicographic by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array) -> Tensor:
        if name in self._params:
            raise DiffcoreError(f"duplicate parameter name '{name}'")
        t = as_tensor(array) if not isinstance(array, Tensor) else array
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Detached copies of all parameter arrays, keyed by name."""
        return {name: p.data.copy() for name, p in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        for name, p in self.items():
            if name not in arrays:
                raise DiffcoreError(f"missing array for parameter '{name}'")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise DiffcoreError(
                    f"shape mismatch for '{name}': stored {a.shape}, expected {p.shape}"
                )
            p.values[:] = a.reshape(-1)


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one slot pair per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> ParamStore:
    """One Adam update over every parameter in the store (in place)."""
    for name, p in store.items():
        if p.grad is None:
            raise DiffcoreError(f"missing gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in store.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros(p.values.size))
        v = state.v.setdefault(name, np.zeros(p.values.size))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return store


def grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.dot(p.grad, p.grad))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _part_key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise DiffcoreError("stream path parts must be non-negative")
        return int(part) & 0xFFFFFFFF
    raise DiffcoreError(f"unsupported stream path part {part!r}")


class RngStream:
    """Counter-based random stream.

    Identity is (seed, path); two streams with the same identity produce
    identical draw sequences, so work can be farmed out per (stage, group,
    member) path and remain schedule-independent. `child` derives a new
    independent stream without touching this one. Streams are single-owner:
    never share one instance across concurrent tasks.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    @property
    def stream_id(self) -> tuple[int, ...]:
        return tuple(_part_key(p) for p in self.path)

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.path + parts)

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def normal(self, *shape: int) -> np.ndarray:
        return self._generator().standard_normal(shape if shape else ())

    def uniform(self, *shape: int) -> np.ndarray:
        return self._generator().random(shape if shape else ())

    def integers(self, low: int, high: int, *shape: int) -> np.ndarray:
        return self._generator().integers(low, high, size=shape if shape else None)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


def gaussian_draw(stream: RngStream, n: int) -> np.ndarray:
    """Draw n standard normals from the stream (n = 0 gives an empty array)."""
    if n < 0:
        raise DiffcoreError("gaussian_draw: n must be >= 0")
    if n == 0:
        return np.empty(0)
    return stream.normal(n)
