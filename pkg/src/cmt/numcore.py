"""
Dense float64 tensors with reverse-mode autodiff, AdamW and a splittable RNG.

numpy does the array arithmetic; the graph, the local gradient rules and the
optimizer live here. Every op builds a node only when grad mode is on and at
least one input requires grad, so inference under ``no_grad()`` allocates no
graph at all.
"""

from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A graph node holding a float64 array.

    Leaves created with ``requires_grad=True`` are parameters; ``grad`` is
    accumulated on them by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(g.shape[:-1] + (b.shape[0],))
                ga = _unbroadcast(ga, a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make(out, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing and integer-array gathering (the latter backs embedding lookup)."""
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1) if a.data.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinear primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map.

    ``eps`` is tiny on purpose: float64 headroom lets the normalized output
    keep unit variance to ~1e-9 for any non-degenerate row.
    """
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [a]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _make(out, parents, bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _make(x * cdf, (a,), bw)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements; differentiable in both inputs."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(np.asarray((diff * diff).sum() / n), (pred, target), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` has shape (..., C) and ``targets`` the leading shape (...).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    c = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ContractError(f"cross_entropy: target outside [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat_logp = logp.reshape(-1, c)
    flat_t = targets.reshape(-1)
    n = max(flat_t.size, 1)
    loss = -flat_logp[np.arange(flat_t.size), flat_t].sum() / n

    def bw(g):
        p = np.exp(logp).reshape(-1, c)
        p[np.arange(flat_t.size), flat_t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), bw)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity of the rows of a (n, k) and b (p, k) -> (n, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} are incompatible")
    na = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), eps)
    nb = np.maximum(np.linalg.norm(b.data, axis=1, keepdims=True), eps)
    ah, bh = a.data / na, b.data / nb
    s = ah @ bh.T

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            gah = g @ bh
            ga = (gah - ah * (gah * ah).sum(axis=1, keepdims=True)) / na
        if b.requires_grad:
            gbh = g.T @ ah
            gb = (gbh - bh * (gbh * bh).sum(axis=1, keepdims=True)) / nb
        return ga, gb

    return _make(s, (a, b), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling twice without :func:`zero_grad` adds the gradients up; training
    loops reset first. Returns ``{leaf: leaf.grad}``.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_of(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradients of ``root`` w.r.t. ``leaves`` (zeros where unreachable)."""
    saved = [p.grad for p in leaves]
    zero_grad(leaves)
    backward(root)
    out = [np.zeros_like(p.data) if p.grad is None else p.grad for p in leaves]
    for p, s in zip(leaves, saved):
        p.grad = s
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    __slots__ = ("step", "m", "v")

    def __init__(self, shape):
        self.step = 0
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: list[AdamState] | None,
                   lr: float = 1e-4, betas=(0.9, 0.999), weight_decay: float = 0.01, eps: float = 1e-8):
    """One AdamW update. Pure: returns ``(new_params, new_state)``."""
    if lr < 0:
        raise ContractError("lr must be >= 0")
    if len(params) != len(grads):
        raise DimensionError(f"optimizer_step: {len(params)} params vs {len(grads)} grads")
    if state is None:
        state = [AdamState(p.shape) for p in params]
    b1, b2 = betas
    new_params, new_state = [], []
    for p, g, s in zip(params, grads, state):
        if p.shape != g.shape:
            raise DimensionError(f"optimizer_step: param {p.shape} vs grad {g.shape}")
        ns = AdamState.__new__(AdamState)
        ns.step = s.step + 1
        ns.m = b1 * s.m + (1 - b1) * g
        ns.v = b2 * s.v + (1 - b2) * g * g
        mhat = ns.m / (1 - b1 ** ns.step)
        vhat = ns.v / (1 - b2 ** ns.step)
        q = p - lr * weight_decay * p
        new_params.append(q - lr * mhat / (np.sqrt(vhat) + eps))
        new_state.append(ns)
    return new_params, new_state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        return [g * scale for g in grads], total
    return list(grads), total


class AdamW:
    """Stateful wrapper over :func:`optimizer_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 weight_decay: float = 0.01, clip_norm: float | None = 0.5):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = [AdamState(p.shape) for p in self.params]
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm:
            grads, self.last_grad_norm = clip_grad_norm(grads, self.clip_norm)
        new, self.state = optimizer_step([p.data for p in self.params], grads, self.state,
                                         self.lr, self.betas, self.weight_decay)
        for p, d in zip(self.params, new):
            # rebind rather than mutate so earlier snapshots stay valid
            p.data = d


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class RngStream:
    """Counter-based (Philox) stream keyed by ``(seed, stream_id)``.

    ``child(k)`` derives an independent stream, so work split across episodes
    or workers draws the same numbers regardless of execution order.
    """

    def __init__(self, seed: int, stream_id: int | tuple = ()):
        self.seed = int(seed)
        ids = stream_id if isinstance(stream_id, tuple) else (stream_id,)
        self.stream_id = tuple(_key(k) for k in ids)
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.stream_id)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(_key(k) for k in keys))

    def derive_seed(self) -> int:
        """A 63-bit integer seed fixed by this stream's identity (not its position)."""
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.stream_id)
        return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))

    @property
    def counter(self) -> int:
        return int(self.gen.bit_generator.state["state"]["counter"][0])

    def __getattr__(self, name):
        # uniform / normal / integers / random / choice / permutation ...
        return getattr(self.gen, name)


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    # stable string hash (Python's hash() is salted per process)
    h = 1469598103934665603
    for ch in str(k).encode():
        h = ((h ^ ch) * 1099511628211) & (2**64 - 1)
    return h


# ---------------------------------------------------------------------------
# tensor serialization
# ---------------------------------------------------------------------------


def write_tensors(fh, named: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write ``(name, shape, little-endian float64 data)`` records."""
    fh.write(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensors(fh) -> list[tuple[str, np.ndarray]]:
    def take(n):
        b = fh.read(n)
        if len(b) != n:
            raise EOFError("truncated tensor block")
        return b

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}I", take(4 * nd)) if nd else ()
        n = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        out.append((name, arr))
    return out
