"""Reverse-mode automatic differentiation over numpy arrays.

Every learnable block in the package compiles to the small op set below
(gather/scatter by index map, matmul, elementwise add/mul, logistic,
softmax, max-reduce, concatenate, plus a few everyday helpers).  Each op
carries a hand-written vector-Jacobian product, so the whole backward
pass is auditable and checkable against finite differences.

Values are stored at whatever dtype the caller supplies: f32 for
training, f64 when `grad_check` replays a block for verification.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "ParamStore",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "gather",
    "scatter_add",
    "concat",
    "reshape",
    "transpose",
    "sigmoid",
    "softmax",
    "relu",
    "exp",
    "log",
    "smooth_l1",
    "segment_max",
    "reduce_sum",
]


class Var:
    """A node in the computation tape: a value plus how to push gradients back."""

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(out, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(out, (a, b), vjp)


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Var:
    """Matrix product with numpy broadcasting on leading axes."""
    a, b = as_var(a), as_var(b)
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Var(out, (a, b), vjp)


def _index_add(num_rows: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum `values` rows into a fresh (num_rows, ...) array at `rows`.

    Uses one bincount pass per call; bins accumulate in input order, so the
    reduction is deterministic for a fixed row ordering.
    """
    tail = values.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    if width == 0 or len(rows) == 0:
        return np.zeros((num_rows,) + tail, dtype=values.dtype)
    flat = values.reshape(len(rows), width)
    idx = (rows[:, None] * width + np.arange(width)[None, :]).ravel()
    out = np.bincount(idx, weights=flat.ravel().astype(np.float64, copy=False),
                      minlength=num_rows * width)
    return out.reshape((num_rows,) + tail).astype(values.dtype, copy=False)


def gather(a, rows) -> Var:
    """Select rows of `a` (first axis) by an integer index map."""
    a = as_var(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = a.value[rows]

    def vjp(g):
        return (_index_add(a.value.shape[0], rows, g),)

    return Var(out, (a,), vjp)


def scatter_add(a, rows, num_rows: int) -> Var:
    """Accumulate rows of `a` into a fresh (num_rows, ...) array at `rows`.

    Accumulation follows the order of `rows`, which keeps reductions
    deterministic for a fixed input ordering.
    """
    a = as_var(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((num_rows,) + a.value.shape[1:], dtype=a.value.dtype)
    np.add.at(out, rows, a.value)

    def vjp(g):
        return (g[rows],)

    return Var(out, (a,), vjp)


def concat(parts, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, tuple(parts), vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return Var(out, (a,), vjp)


def transpose(a, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Var(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sigmoid(a) -> Var:
    a = as_var(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Var(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Var(out, (a,), vjp)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def smooth_l1(a, beta: float) -> Var:
    """Huber-style penalty: 0.5 x^2/beta inside |x|<beta, |x|-0.5 beta outside."""
    a = as_var(a)
    x = a.value
    absx = np.abs(x)
    quad = absx < beta
    out = np.where(quad, 0.5 * x * x / beta, absx - 0.5 * beta)

    def vjp(g):
        return (g * np.where(quad, x / beta, np.sign(x)),)

    return Var(out, (a,), vjp)


def segment_max(a, segment_ids, num_segments: int) -> Var:
    """Max-reduce rows of `a` over contiguous sorted segments.

    Gradients flow to the first occurrence of each segment maximum.
    """
    a = as_var(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.full((num_segments,) + a.value.shape[1:], -np.inf, dtype=a.value.dtype)
    np.maximum.at(out, segment_ids, a.value)
    empty = ~np.isin(np.arange(num_segments), segment_ids)
    if empty.any():
        out[empty] = 0.0

    # first row per segment attaining the max, column-wise
    winner = out[segment_ids] == a.value
    n_rows = a.value.shape[0]
    row_ids = np.arange(n_rows)[:, None]
    cand = np.where(winner, row_ids, n_rows)
    first = np.full_like(out, n_rows, dtype=np.int64)
    np.minimum.at(first, segment_ids, cand)
    pick = winner & (row_ids == first[segment_ids])

    def vjp(g):
        return (g[segment_ids] * pick,)

    return Var(out, (a,), vjp)


def reduce_sum(a, axis=None) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gx = np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.value.shape).copy(),)

    return Var(out, (a,), vjp)


def backward(root: Var, seed_grad=None) -> None:
    """Accumulate gradients of `root` into every reachable node's `.grad`."""
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    if seed_grad is None:
        seed_grad = np.ones_like(root.value)
    root.grad = np.asarray(seed_grad, dtype=root.value.dtype)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if g.dtype != parent.value.dtype:
                g = g.astype(parent.value.dtype)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


class ParamStore:
    """Named learnable tensors with gradient slots.

    The single owner (the trainer) mutates values; forward passes read
    fresh leaf Vars via `leaves()` and gradients land back here through
    `accumulate()`.
    """

    def __init__(self):
        self._params: dict[str, dict] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        value = np.asarray(value, dtype=np.float32)
        self._params[name] = {
            "value": value,
            "grad": np.zeros_like(value),
            "trainable": trainable,
        }

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str) -> np.ndarray:
        return self._params[name]["value"]

    def set(self, name: str, value: np.ndarray) -> None:
        p = self._params[name]
        value = np.asarray(value, dtype=np.float32)
        if value.shape != p["value"].shape:
            raise ValueError(f"shape mismatch for {name}")
        p["value"] = value
        p["grad"] = np.zeros_like(value)

    def grad(self, name: str) -> np.ndarray:
        return self._params[name]["grad"]

    def trainable(self, name: str) -> bool:
        return self._params[name]["trainable"]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p["grad"][...] = 0.0

    def leaves(self, dtype=np.float32) -> dict[str, Var]:
        return {k: Var(p["value"].astype(dtype)) for k, p in self._params.items()}

    def accumulate(self, leaves: dict[str, Var], scale: float = 1.0) -> None:
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self._params[name]["grad"] += scale * leaf.grad.astype(np.float32)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p["value"].copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k in self._params:
                self.set(k, v)
            else:
                self.add(k, v)


def grad_check(closure, inputs: dict, eps: float = 1e-6, seed: int = 0,
               max_entries: int = 24) -> dict:
    """Compare reverse-mode gradients of `closure` against central differences.

    `closure` maps a dict of Vars to an output Var; the output is reduced
    to a scalar through a fixed random projection so one backward pass
    covers every output element.  Everything runs in f64.

    Returns a report with the max relative error over all checked entries.
    """
    rng = np.random.default_rng(seed)
    values = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}

    def run(vals):
        out = closure({k: Var(v) for k, v in vals.items()})
        return out

    probe_out = run(values)
    projection = rng.standard_normal(probe_out.value.shape)

    def scalar(vals):
        return float((run(vals).value * projection).sum())

    leaf_vars = {k: Var(v) for k, v in values.items()}
    loss = reduce_sum(mul(closure(leaf_vars), Var(projection)))
    backward(loss)
    analytic = {
        k: (np.zeros_like(values[k]) if v.grad is None else v.grad)
        for k, v in leaf_vars.items()
    }

    max_rel = 0.0
    per_input = {}
    for name, base in values.items():
        flat = base.reshape(-1)
        n = flat.size
        if n == 0:
            continue
        if n <= max_entries:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            h = eps * max(1.0, abs(orig))
            flat[c] = orig + h
            f_plus = scalar(values)
            flat[c] = orig - h
            f_minus = scalar(values)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = analytic[name].reshape(-1)[c]
            denom = max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, abs(ad - fd) / denom)
        per_input[name] = worst
        max_rel = max(max_rel, worst)

    return {"max_rel_err": max_rel, "per_input": per_input}
