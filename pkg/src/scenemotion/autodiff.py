"""Reverse-mode automatic differentiation over float64 numpy arrays.

Tensors are immutable. Operations are recorded on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient; a tape lives
for a single evaluation and is discarded after :meth:`Tape.backward`.

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # fresh op outputs: skip the defensive copy, keep the finiteness check
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"operation produced non-finite values (shape {arr.shape})")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p: float): return power(self, p)
    def __getitem__(self, key): return slice_(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return max_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self): return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients:
    """Gradients of one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _add(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._store:
            self._store[key] = (t, self._store[key][1] + g)
        else:
            self._store[key] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._store[id(t)][1]

    def get(self, t: Tensor, default=None):
        hit = self._store.get(id(t))
        return default if hit is None else hit[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def __len__(self) -> int:
        return len(self._store)


class Tape:
    """Records primitive operations for one evaluation; confined to one thread."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, parents, vjp))
        self._produced.add(id(out))

    def backward(self, root: Tensor) -> Gradients:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves = Gradients()
        if not root.requires_grad:
            return leaves
        # records are appended in execution order, so reversal is a valid topological order
        for out, parents, vjp in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self._produced:
                    pending[key] = pending[key] + pg if key in pending else pg
                else:
                    leaves._add(parent, pg)
        if id(root) not in self._produced:  # root is itself a leaf
            leaves._add(root, np.ones_like(root.data))
        return leaves


def backward(tape: Tape, root: Tensor) -> Gradients:
    return tape.backward(root)


def _emit(arr: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _emit(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _emit(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _emit(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0  # subgradient 0 at the kink
    return _emit(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive input")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def where(mask, a, b) -> Tensor:
    """Masked select: ``a`` where ``mask`` holds, else ``b`` (bit-exact, no arithmetic)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    try:
        shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: incompatible shapes {mask.shape}, {a.shape}, {b.shape}") from None
    m = np.broadcast_to(mask, shape)
    return _emit(np.where(m, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(m, g, 0.0), a.shape),
                            _unbroadcast(np.where(m, 0.0, g), b.shape)))


def masked_select(a, mask) -> Tensor:
    """Flat vector of the entries of ``a`` where ``mask`` is true."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_select: mask {mask.shape} vs tensor {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[mask] = g
        return (full,)
    return _emit(a.data[mask], (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., n) @ (n, m): one flat GEMM instead of numpy's per-matrix loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def vjp_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        return _emit(out, (a, b), vjp_flat)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return _emit(out, (a, b), vjp)


# ---------------------------------------------------------------- reductions

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)
    return _emit(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        i = int(np.argmax(flat))

        def vjp_all(g):
            full = np.zeros(flat.size)
            full[i] = float(np.asarray(g).reshape(-1)[0])
            return (full.reshape(a.shape),)
        out = flat[i]
        return _emit(np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out), (a,), vjp_all)
    ax = axis % a.ndim
    arg = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, arg, axis=ax)

    def vjp(g):
        full = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, arg, gk, axis=ax)
        return (full,)
    return _emit(out if keepdims else np.squeeze(out, ax), (a,), vjp)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _emit(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l2_norm(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gk * a.data / safe,)
    return _emit(n if keepdims else np.squeeze(n, axis), (a,), vjp)


def cosine_similarity(a, b, axis=-1, eps: float = 1e-12) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if (na <= eps).any() or (nb <= eps).any():
        raise NonFiniteError("cosine_similarity of a zero vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def vjp(g):
        gk = np.expand_dims(g, axis)
        ga = gk * (b.data / (na * nb) - c * a.data / (na * na)) if a.requires_grad else None
        gb = gk * (a.data / (na * nb) - c * b.data / (nb * nb)) if b.requires_grad else None
        return ga, gb
    return _emit(np.squeeze(c, axis), (a, b), vjp)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g) if _has_array_index(key) else full.__setitem__(key, g)
        return (full,)
    return _emit(np.array(out), (a,), vjp)


def _has_array_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat along {axis}: shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))
    return _emit(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def gather(a, idx) -> Tensor:
    """Index-select rows: ``a`` is (N, D) or (B, N, D); ``idx`` integer array.

    Unbatched: output ``idx.shape + (D,)``.  Batched: ``idx`` has leading
    dim B and output is ``idx.shape + (D,)`` with row lookups per batch item.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim == 2:
        n, d = a.shape
        flat = idx.reshape(-1)
    elif a.ndim == 3:
        if idx.shape[0] != a.shape[0]:
            raise ShapeError(f"gather: batch mismatch {a.shape} vs index {idx.shape}")
        b, n, d = a.shape
        offs = (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))
        flat = (idx + offs).reshape(-1)
        n = b * n
    else:
        raise ShapeError(f"gather: expected 2-D or 3-D source, got {a.shape}")
    if flat.size and (flat.min() < 0 or flat.max() >= n):
        raise ShapeError(f"gather: index out of range for source {a.shape}")
    src = a.data.reshape(n, d)

    def vjp(g):
        g2 = g.reshape(-1, d)
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        return (np.asarray(scatter @ g2).reshape(a.shape),)
    return _emit(src[flat].reshape(idx.shape + (d,)), (a,), vjp)


def index_select(a, idx) -> Tensor:
    return gather(a, idx)


# ---------------------------------------------------------------- composites

def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def minimum_reduce(a, axis=None, keepdims=False) -> Tensor:
    return scale(max_(scale(a, -1.0), axis, keepdims), -1.0)


def clip01(a) -> Tensor:
    return sub(relu(a), relu(sub(a, 1.0)))


def normalize(a, axis=-1, eps: float = 1e-12) -> Tensor:
    return div(a, add(l2_norm(a, axis=axis, keepdims=True), eps))


# ---------------------------------------------------------------- generic entry

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "power": power, "relu": relu, "abs": abs_, "exp": exp, "log": log, "sqrt": sqrt,
    "sum": sum_, "mean": mean, "max": max_, "concat": concat, "gather": gather,
    "index_select": index_select, "softmax": softmax, "log_softmax": log_softmax,
    "l2_norm": l2_norm, "cosine_similarity": cosine_similarity, "sigmoid": sigmoid,
    "tanh": tanh, "sin": sin, "cos": cos, "slice": slice_, "reshape": reshape,
    "transpose": transpose, "swapaxes": swapaxes, "masked_select": masked_select,
    "where": where,
}


def forward(op: str, inputs: Sequence, *args, **kwargs) -> Tensor:
    """Apply primitive ``op`` by name; ``concat`` takes the list itself."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(list(inputs), *args, **kwargs)
    return fn(*inputs, *args, **kwargs)


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[..., Tensor], point, h: float = 1e-5,
               n_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    The error per coordinate is |a - n| / max(1, |a|, |n|).  ``n_coords`` limits
    the check to that many randomly chosen coordinates per input.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(p.data, requires_grad=True) for p in pts]
    with Tape() as tape:
        out = f(*leaves)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    grads = tape.backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad: list[tuple[int, int]] = []
    for k, leaf in enumerate(leaves):
        analytic = grads.get(leaf)
        analytic = np.zeros(leaf.shape) if analytic is None else analytic
        base = leaf.data.reshape(-1)
        coords: Iterable[int] = range(base.size)
        if n_coords is not None and n_coords < base.size:
            coords = rng.choice(base.size, size=n_coords, replace=False)
        for c in coords:
            vals = []
            for sgn in (1.0, -1.0):
                x = base.copy()
                x[c] += sgn * h
                args = [Tensor(x.reshape(leaf.shape)) if j == k else Tensor(p.data) for j, p in enumerate(leaves)]
                try:
                    vals.append(float(f(*args).data.reshape(-1)[0]))
                except NonFiniteError:
                    vals.append(np.nan)
            if not np.all(np.isfinite(vals)):
                bad.append((k, int(c)))
                continue
            num = (vals[0] - vals[1]) / (2.0 * h)
            ana = float(analytic.reshape(-1)[c])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    if bad:
        raise GradCheckError(f"non-finite function values at perturbed coordinates (input, index): {bad}")
    return worst
