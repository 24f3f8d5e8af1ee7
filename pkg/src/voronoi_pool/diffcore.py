"""Minimal reverse-mode differentiation on 2-D float64 matrices.

A :class:`Tape` records primitive operations in execution order; each node
stores a vector-Jacobian-product closure. Primitives accept either traced
:class:`Value` objects or plain arrays. When no input is traced, the
primitive simply returns a plain ``ndarray``, so numeric code can be
written once and run with or without a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BN_VAR_FLOOR = 1e-5


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


class Value:
    """An immutable matrix living on a tape (or a constant when ``tape`` is None)."""

    __slots__ = ("data", "tape", "node_id", "out_index")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None,
                 out_index: int = 0):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"Value must be at most 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node_id = node_id
        self.out_index = out_index

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 Value, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, node={self.node_id})"


@dataclass
class _Node:
    tag: str
    inputs: list[tuple[int, int] | None]  # (node_id, out_index) per input; None for constants
    vjp: Callable | None  # None for leaves
    out_shapes: list[tuple[int, int]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Records one forward pass; discard after :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data, name: str = "leaf") -> Value:
        v = Value(data)
        self.nodes.append(_Node(name, [], None, [v.shape]))
        v.tape, v.node_id = self, len(self.nodes) - 1
        return v

    def record(self, tag: str, inputs: Sequence, forward: Callable) -> Value | tuple[Value, ...]:
        """Run ``forward`` on the input arrays and register the result.

        ``forward(*arrays)`` returns ``(outputs, vjp)`` where ``outputs`` is an
        array or a tuple of arrays and ``vjp(*output_grads)`` returns one
        gradient (or None) per input.
        """
        refs = []
        arrays = []
        for x in inputs:
            if isinstance(x, Value):
                if x.tape is not None and x.tape is not self:
                    raise ValueError(f"{tag}: input belongs to a different tape")
                refs.append((x.node_id, x.out_index) if x.tape is self else None)
                arrays.append(x.data)
            else:
                refs.append(None)
                arrays.append(_as2d(x))
        outs, vjp = forward(*arrays)
        multi = isinstance(outs, tuple)
        outs_t = outs if multi else (outs,)
        values = tuple(Value(o) for o in outs_t)
        self.nodes.append(_Node(tag, refs, vjp, [v.shape for v in values]))
        nid = len(self.nodes) - 1
        for k, v in enumerate(values):
            v.tape, v.node_id, v.out_index = self, nid, k
        return values if multi else values[0]

    def backward(self, output: Value, seed=None) -> dict[int, np.ndarray]:
        """Propagate adjoints from ``output``; returns ``{leaf node_id: gradient}``."""
        if output.tape is not self:
            raise ValueError("output is not recorded on this tape")
        if seed is None:
            if output.shape != (1, 1):
                raise ShapeError(f"backward: non-scalar output {output.shape} needs a seed")
            seed = np.ones((1, 1))
        seed = _as2d(seed)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
        adj: dict[tuple[int, int], np.ndarray] = {(output.node_id, output.out_index): seed.copy()}
        grads: dict[int, np.ndarray] = {}
        for nid in range(output.node_id, -1, -1):
            node = self.nodes[nid]
            gouts = [adj.pop((nid, k), None) for k in range(len(node.out_shapes))]
            if all(g is None for g in gouts):
                continue
            if node.vjp is None:
                grads[nid] = gouts[0]
                continue
            gouts = [np.zeros(s) if g is None else g for g, s in zip(gouts, node.out_shapes)]
            gins = node.vjp(*gouts)
            for ref, g in zip(node.inputs, gins):
                if ref is None or g is None:
                    continue
                if ref in adj:
                    adj[ref] = adj[ref] + g
                else:
                    adj[ref] = np.asarray(g, dtype=np.float64)
        return grads

    def grad_of(self, grads: dict[int, np.ndarray], leaf: Value) -> np.ndarray:
        return grads.get(leaf.node_id, np.zeros(leaf.shape))


def _as2d(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Value) else x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    return arr


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Value) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs live on different tapes")
            tape = x.tape
    return tape


def _apply(tag: str, inputs: Sequence, forward: Callable):
    tape = _tape_of(inputs)
    if tape is None:
        outs, _ = forward(*[_as2d(x) for x in inputs])
        return outs
    return tape.record(tag, inputs, forward)


def data_of(x) -> np.ndarray:
    return _as2d(x)


def _same_shape(tag, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{tag}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a, b):
    def fwd(A, B):
        if A.shape[1] != B.shape[0]:
            raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} not aligned")
        return A @ B, lambda g: (g @ B.T, A.T @ g)
    return _apply("matmul", [a, b], fwd)


def transpose(a):
    return _apply("transpose", [a], lambda A: (A.T.copy(), lambda g: (g.T,)))


def add(a, b):
    def fwd(A, B):
        _same_shape("add", A, B)
        return A + B, lambda g: (g, g)
    return _apply("add", [a, b], fwd)


def sub(a, b):
    def fwd(A, B):
        _same_shape("sub", A, B)
        return A - B, lambda g: (g, -g)
    return _apply("sub", [a, b], fwd)


def mul(a, b):
    """Elementwise product."""
    def fwd(A, B):
        _same_shape("mul", A, B)
        return A * B, lambda g: (g * B, g * A)
    return _apply("mul", [a, b], fwd)


def div(a, b):
    """Elementwise quotient."""
    def fwd(A, B):
        _same_shape("div", A, B)
        Q = A / B
        return Q, lambda g: (g / B, -g * Q / B)
    return _apply("div", [a, b], fwd)


def scalar_mul(a, c: float):
    c = float(c)
    return _apply("scalar_mul", [a], lambda A: (c * A, lambda g: (c * g,)))


def smul(s, a):
    """Multiply matrix ``a`` by the 1x1 value ``s``."""
    def fwd(S, A):
        if S.shape != (1, 1):
            raise ShapeError(f"smul: scale must be 1x1, got {S.shape}")
        s0 = S[0, 0]
        return s0 * A, lambda g: (np.array([[np.sum(g * A)]]), s0 * g)
    return _apply("smul", [s, a], fwd)


def add_col(a, b):
    """Add the column vector ``b`` (n x 1) to every column of ``a`` (n x m)."""
    def fwd(A, B):
        if B.shape != (A.shape[0], 1):
            raise ShapeError(f"add_col: bias {B.shape} does not fit {A.shape}")
        return A + B, lambda g: (g, g.sum(axis=1, keepdims=True))
    return _apply("add_col", [a, b], fwd)


def pow_(a, p: float):
    p = float(p)

    def fwd(A):
        out = A ** p
        return out, lambda g: (g * p * A ** (p - 1.0),)
    return _apply("pow", [a], fwd)


def relu(a):
    def fwd(A):
        mask = A > 0
        return np.where(mask, A, 0.0), lambda g: (g * mask,)
    return _apply("relu", [a], fwd)


def minimum_const(a, c: float):
    """Elementwise ``min(a, c)``; the gradient is zero where the bound is active."""
    c = float(c)

    def fwd(A):
        mask = A < c
        return np.where(mask, A, c), lambda g: (g * mask,)
    return _apply("minimum", [a], fwd)


def _softmax(A, axis):
    e = np.exp(A - A.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(a):
    """Softmax across the columns of each row (every row sums to one)."""
    def fwd(A):
        S = _softmax(A, 1)
        return S, lambda g: (S * (g - np.sum(g * S, axis=1, keepdims=True)),)
    return _apply("softmax_rows", [a], fwd)


def softmax_cols(a):
    """Softmax down each column (every column sums to one)."""
    def fwd(A):
        S = _softmax(A, 0)
        return S, lambda g: (S * (g - np.sum(g * S, axis=0, keepdims=True)),)
    return _apply("softmax_cols", [a], fwd)


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    def fwd(A):
        cdf = 0.5 * (1.0 + erf(A / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * A * A)
        return A * cdf, lambda g: (g * (cdf + A * pdf),)
    return _apply("gelu", [a], fwd)


def batch_norm(x, gamma, beta, *, train: bool, running_mean=None, running_var=None,
               stats_out: dict | None = None):
    """Per-row (channel) normalization over all columns.

    In train mode the column statistics of ``x`` are used (biased variance,
    floored at ``BN_VAR_FLOOR``) and written into ``stats_out`` when given.
    In eval mode the running statistics are constants.
    """
    if train:
        def fwd(X, G, B):
            n = X.shape[1]
            mu = X.mean(axis=1, keepdims=True)
            xc = X - mu
            var = np.mean(xc * xc, axis=1, keepdims=True)
            active = var > BN_VAR_FLOOR
            var_f = np.where(active, var, BN_VAR_FLOOR)
            inv = 1.0 / np.sqrt(var_f)
            xh = xc * inv
            if stats_out is not None:
                stats_out["mean"] = mu.copy()
                stats_out["var"] = var.copy()
                stats_out["count"] = n

            def vjp(g):
                gxh = g * G
                gvar = np.where(active, -0.5 * np.sum(gxh * xc, axis=1, keepdims=True) * inv ** 3, 0.0)
                gx = gxh * inv - np.mean(gxh * inv, axis=1, keepdims=True) + gvar * 2.0 * xc / n
                return gx, np.sum(g * xh, axis=1, keepdims=True), g.sum(axis=1, keepdims=True)
            return G * xh + B, vjp
        return _apply("batch_norm_train", [x, gamma, beta], fwd)

    rm = _as2d(running_mean)
    rv = _as2d(running_var)
    inv = 1.0 / np.sqrt(np.maximum(rv, BN_VAR_FLOOR))

    def fwd_eval(X, G, B):
        xh = (X - rm) * inv
        return G * xh + B, lambda g: (g * G * inv, np.sum(g * xh, axis=1, keepdims=True),
                                      g.sum(axis=1, keepdims=True))
    return _apply("batch_norm_eval", [x, gamma, beta], fwd_eval)


def sum_(a):
    def fwd(A):
        shape = A.shape
        return np.array([[A.sum()]]), lambda g: (np.full(shape, g[0, 0]),)
    return _apply("sum", [a], fwd)


def mean(a):
    def fwd(A):
        shape, n = A.shape, A.size
        return np.array([[A.mean()]]), lambda g: (np.full(shape, g[0, 0] / n),)
    return _apply("mean", [a], fwd)


def trace(a):
    def fwd(A):
        if A.shape[0] != A.shape[1]:
            raise ShapeError(f"trace: matrix {A.shape} is not square")
        n = A.shape[0]
        return np.array([[np.trace(A)]]), lambda g: (g[0, 0] * np.eye(n),)
    return _apply("trace", [a], fwd)


def outer(u, v):
    """Outer product of two column vectors."""
    def fwd(U, V):
        if U.shape[1] != 1 or V.shape[1] != 1:
            raise ShapeError(f"outer: expects column vectors, got {U.shape} and {V.shape}")
        return U @ V.T, lambda g: (g @ V, g.T @ U)
    return _apply("outer", [u, v], fwd)


def diag(v):
    """Diagonal matrix from a column vector."""
    def fwd(V):
        if V.shape[1] != 1:
            raise ShapeError(f"diag: expects a column vector, got {V.shape}")
        return np.diagflat(V), lambda g: (np.diag(g).reshape(-1, 1).copy(),)
    return _apply("diag", [v], fwd)


def vec(a):
    """Column-major flatten into a column vector (first column first)."""
    def fwd(A):
        shape = A.shape
        return A.reshape(-1, 1, order="F").copy(), lambda g: (g.reshape(shape, order="F"),)
    return _apply("vec", [a], fwd)


def slice_cols(a, start: int, stop: int):
    def fwd(A):
        if not 0 <= start < stop <= A.shape[1]:
            raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {A.shape}")
        shape = A.shape

        def vjp(g):
            out = np.zeros(shape)
            out[:, start:stop] = g
            return (out,)
        return A[:, start:stop].copy(), vjp
    return _apply("slice_cols", [a], fwd)


def concat_cols(parts: Sequence):
    def fwd(*arrs):
        rows = {p.shape[0] for p in arrs}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in arrs]}")
        bounds = np.cumsum([0] + [p.shape[1] for p in arrs])
        return np.hstack(arrs), lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(arrs)))
    return _apply("concat_cols", list(parts), fwd)


def custom(tag: str, inputs: Sequence, forward: Callable):
    """Register a user-defined node; see :meth:`Tape.record` for the contract."""
    return _apply(tag, inputs, forward)


# ---------------------------------------------------------------- checking

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat parameter vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = float(f(x))
        x[i] = old - h
        fm = float(f(x))
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


ZERO_GRAD_FLOOR = 1e-6


@dataclass
class GradReport:
    """Analytic vs. numeric gradients per parameter.

    The headline error of a parameter is norm-wise,
    ``||a - n|| / max(||a||, ||n||, floor)``, where ``floor`` is
    ``ZERO_GRAD_FLOOR`` times the largest gradient norm over all parameters.
    The floor keeps parameters whose exact gradient is zero (a bias that
    batch norm cancels, say) from reporting finite-difference noise as a
    100% error. ``rel_error`` keeps the element-wise view for diagnostics.
    """

    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    rel_error: dict[str, np.ndarray]

    def tensor_errors(self) -> dict[str, float]:
        norms = {k: max(np.linalg.norm(self.analytic[k]), np.linalg.norm(self.numeric[k]))
                 for k in self.analytic}
        floor = max(ZERO_GRAD_FLOOR * max(norms.values(), default=0.0), 1e-12)
        return {k: float(np.linalg.norm(self.analytic[k] - self.numeric[k]) / max(norms[k], floor))
                for k in self.analytic}

    @property
    def max_rel_error(self) -> float:
        return max(self.tensor_errors().values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        """Parameter with the largest norm-wise error."""
        errs = self.tensor_errors()
        if not errs:
            return "", 0.0
        name = max(errs, key=errs.get)
        return name, errs[name]

    @property
    def max_elementwise_error(self) -> float:
        return max((float(e.max()) for e in self.rel_error.values() if e.size), default=0.0)

    def worst_entry(self) -> tuple[str, int, float]:
        """Name, flat index and element-wise relative error of the worst single entry."""
        best = ("", -1, -1.0)
        for name, e in self.rel_error.items():
            if e.size and e.max() > best[2]:
                best = (name, int(np.argmax(e)), float(e.max()))
        return best


def gradcheck(loss_fn: Callable[[dict], Value], params: dict[str, np.ndarray],
              h: float = 1e-5) -> GradReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict of parameter values (traced Values on the
    analytic pass, plain arrays on the numeric passes) and returns a 1x1 result.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    out = loss_fn(leaves)
    grads = tape.backward(out)
    analytic = {k: tape.grad_of(grads, leaf) for k, leaf in leaves.items()}

    numeric = {}
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        shape = _as2d(base).shape

        def f(flat, name=name, shape=shape):
            trial = dict(params)
            trial[name] = flat.reshape(shape)
            return data_of(loss_fn(trial))[0, 0]
        numeric[name] = finite_difference_gradient(f, _as2d(base).ravel(), h).reshape(shape)
    rel = {k: relative_error(analytic[k], numeric[k]) for k in params}
    return GradReport(analytic, numeric, rel)
