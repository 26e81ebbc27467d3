"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records every operation in execution order; `backward` walks the
records in reverse and accumulates gradients into `Tensor.grad`. Operations
run outside any active tape are forward-only, which is what inference paths
(k-means init, label extraction) use.

Everything is double precision. Logarithm and division arguments are clamped
to a small positive floor so count-model likelihoods stay finite when
predicted means or dispersions collapse toward zero early in training; the
backward pass treats clamped entries as constants (zero derivative).
"""

from __future__ import annotations

import hashlib

import numpy as np
import scipy.sparse as _sp
from scipy.special import digamma as _digamma, expit as _expit, gammaln as _gammaln

EPS = 1e-10  # floor for log / division / rsqrt arguments


class ShapeError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# core types


class Tensor:
    """A shaped float64 array, optionally trainable, with a gradient slot."""

    __slots__ = ("values", "trainable", "grad", "name")

    def __init__(self, values, trainable=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.trainable = bool(trainable)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, trainable={self.trainable}{tag})"

    # operator sugar; non-Tensor operands are untracked constants
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(negate(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_const(self, 1.0 / other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs are recorded before consumers."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _record(out, inputs, backward_fn):
    if _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(tape, loss, trainables=None):
    """Accumulate gradients of a scalar `loss` into every tensor on `tape`.

    Tensors listed in `trainables` are guaranteed a gradient array afterwards
    (zeros when the loss does not reach them). Gradients of tensors touched by
    the tape are reset before the walk, so one call computes one clean pass.
    """
    if loss.values.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.values.shape}")
    seen = set()
    for node in tape.nodes:
        for t in (node.out, *node.inputs):
            if id(t) not in seen:
                seen.add(id(t))
                t.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        parts = node.backward_fn(g)
        for t, p in zip(node.inputs, parts):
            if p is None:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            t.grad += p
    if trainables is not None:
        for t in trainables:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)


class SparseMatrix:
    """COO-style sparse matrix with unique (row, col) entries."""

    __slots__ = ("rows", "cols", "row_idx", "col_idx", "data", "_csr", "_csc")

    def __init__(self, rows, cols, row_idx, col_idx, data):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_idx = np.asarray(row_idx, dtype=np.int64)
        self.col_idx = np.asarray(col_idx, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        if not (self.row_idx.shape == self.col_idx.shape == self.data.shape):
            raise ShapeError("entry arrays must share one length")
        if self.data.size:
            if self.row_idx.min(initial=0) < 0 or self.row_idx.max(initial=0) >= rows:
                raise ShapeError("row index out of range")
            if self.col_idx.min(initial=0) < 0 or self.col_idx.max(initial=0) >= cols:
                raise ShapeError("col index out of range")
            flat = self.row_idx * cols + self.col_idx
            if np.unique(flat).size != flat.size:
                raise ValueError("duplicate (row, col) entry")
        self._csr = None
        self._csc = None

    @classmethod
    def from_scipy(cls, mat):
        coo = mat.tocoo()
        return cls(coo.shape[0], coo.shape[1], coo.row, coo.col, coo.data)

    @property
    def csr(self):
        if self._csr is None:
            self._csr = _sp.csr_matrix(
                (self.data, (self.row_idx, self.col_idx)), shape=(self.rows, self.cols)
            )
        return self._csr

    @property
    def csc(self):
        if self._csc is None:
            self._csc = self.csr.T.tocsr()  # transpose for the backward product
        return self._csc

    def to_dense(self):
        return self.csr.toarray()


class RngState:
    """Counter-based Philox stream; same seed and call sequence, same draws."""

    __slots__ = ("seed", "counter", "_gen")

    def __init__(self, seed):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag):
        """Derive an independent stream keyed by (seed, tag)."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return RngState(int.from_bytes(digest[:8], "little"))

    def uniform_open(self, shape):
        """I.i.d. draws strictly inside (0, 1)."""
        self.counter += 1
        return self._gen.uniform(2.0**-53, 1.0, size=shape)

    def normal(self, shape, scale=1.0):
        self.counter += 1
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low, high, shape):
        self.counter += 1
        return self._gen.uniform(low, high, size=shape)

    def gamma(self, shape_param, scale):
        self.counter += 1
        return self._gen.gamma(shape_param, scale)

    def poisson(self, lam):
        self.counter += 1
        return self._gen.poisson(lam)

    def integers(self, low, high, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def choice_weighted(self, n, weights):
        self.counter += 1
        w = np.asarray(weights, dtype=np.float64)
        return int(self._gen.choice(n, p=w / w.sum()))


def sample_uniform(rng, shape):
    """Uniform (0,1) draws as a non-trainable Tensor."""
    return Tensor(rng.uniform_open(shape))


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _require_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    out = Tensor(a.values + b.values)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)),
    )


def sub(a, b):
    out = Tensor(a.values - b.values)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.values.shape), -_unbroadcast(g, b.values.shape)),
    )


def mul(a, b):
    out = Tensor(a.values * b.values)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        ),
    )


def div(a, b, floor=EPS):
    """Elementwise a / max(b, floor); denominators are positive by contract."""
    bc = np.maximum(b.values, floor)
    out = Tensor(a.values / bc)
    mask = b.values >= floor

    def back(g):
        return (
            _unbroadcast(g / bc, a.values.shape),
            _unbroadcast(np.where(mask, -g * a.values / (bc * bc), 0.0), b.values.shape),
        )

    return _record(out, (a, b), back)


def add_const(a, c):
    out = Tensor(a.values + c)
    return _record(out, (a,), lambda g: (g,))


def mul_const(a, c):
    out = Tensor(a.values * c)
    return _record(out, (a,), lambda g: (g * c,))


def negate(a):
    out = Tensor(-a.values)
    return _record(out, (a,), lambda g: (-g,))


def square(a):
    out = Tensor(a.values * a.values)
    return _record(out, (a,), lambda g: (2.0 * a.values * g,))


def matmul(a, b):
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul shapes {a.values.shape} x {b.values.shape}")
    out = Tensor(a.values @ b.values)
    return _record(out, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a):
    out = Tensor(a.values.T)
    return _record(out, (a,), lambda g: (g.T,))


def spmm(a, b, values=None):
    """Sparse-dense product a @ b.

    When `values` is given it must be a Tensor holding the entry values of
    `a` (same order as a.data); the product then uses those values and the
    backward pass also accumulates the per-entry gradient into `values`.
    """
    if a.cols != b.values.shape[0]:
        raise ShapeError(f"spmm shapes ({a.rows}x{a.cols}) x {b.values.shape}")
    if values is None:
        csr = a.csr
        out = Tensor(csr @ b.values)
        csr_t = a.csc
        return _record(out, (b,), lambda g: (csr_t @ g,))
    if values.values.shape != a.data.shape:
        raise ShapeError("entry value tensor does not match sparsity pattern")
    csr = _sp.csr_matrix(
        (values.values, (a.row_idx, a.col_idx)), shape=(a.rows, a.cols)
    )
    out = Tensor(csr @ b.values)
    csr_t = csr.T.tocsr()

    def back(g):
        gv = np.einsum("ij,ij->i", g[a.row_idx], b.values[a.col_idx])
        return (csr_t @ g, gv)

    return _record(out, (b, values), back)


def spmm_tensor(a, b):
    """Product a @ b for a dense tape tensor `a` whose forward values are sparse.

    The forward pass routes through CSR so the cost scales with the nonzeros
    of `a` (the sampled graph keeps roughly K entries per row). The backward
    pass is that of an ordinary dense matmul: zero entries of `a` still
    receive gradient, which the adaptive-graph path relies on.
    """
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"spmm_tensor shapes {a.values.shape} x {b.values.shape}")
    csr = _sp.csr_matrix(a.values)
    out = Tensor(np.asarray(csr @ b.values))
    csr_t = csr.T.tocsr()
    return _record(out, (a, b), lambda g: (g @ b.values.T, np.asarray(csr_t @ g)))


def override_forward(values, a):
    """Straight-through splice: forward emits `values`, backward is identity in `a`.

    This is sg(values - a) + a without the floating-point round trip, so the
    forward output is bit-exact (sampled adjacencies must stay binary).
    """
    out = Tensor(values)
    if out.values.shape != a.values.shape:
        raise ShapeError(
            f"override_forward shapes {out.values.shape} vs {a.values.shape}"
        )
    _require_finite(out.values, "override_forward")
    return _record(out, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a):
    out = Tensor(np.maximum(a.values, 0.0))
    return _record(out, (a,), lambda g: (np.where(a.values > 0.0, g, 0.0),))


def sigmoid(a):
    y = _expit(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a, floor=EPS):
    """Natural log of max(a, floor); clamped entries get zero derivative."""
    xc = np.maximum(a.values, floor)
    out = Tensor(_require_finite(np.log(xc), "log"))
    mask = a.values >= floor
    return _record(out, (a,), lambda g: (np.where(mask, g / xc, 0.0),))


def lgamma(a):
    xc = np.maximum(a.values, EPS)
    out = Tensor(_require_finite(_gammaln(xc), "lgamma"))
    mask = a.values >= EPS
    return _record(out, (a,), lambda g: (np.where(mask, g * _digamma(xc), 0.0),))


def softplus(a):
    out = Tensor(np.logaddexp(0.0, a.values))
    return _record(out, (a,), lambda g: (g * _expit(a.values),))


def sqrt(a):
    xc = np.maximum(a.values, 1e-30)
    y = np.sqrt(xc)
    out = Tensor(y)
    mask = a.values >= 1e-30
    return _record(out, (a,), lambda g: (np.where(mask, 0.5 * g / y, 0.0),))


def rsqrt(a):
    """x^(-1/2) with the EPS floor; used for degree normalization."""
    xc = np.maximum(a.values, EPS)
    y = 1.0 / np.sqrt(xc)
    out = Tensor(y)
    mask = a.values >= EPS
    return _record(out, (a,), lambda g: (np.where(mask, -0.5 * g * y / xc, 0.0),))


def reciprocal(a):
    xc = np.maximum(a.values, EPS)
    y = 1.0 / xc
    out = Tensor(y)
    mask = a.values >= EPS
    return _record(out, (a,), lambda g: (np.where(mask, -g * y * y, 0.0),))


def clamp_min(a, floor):
    out = Tensor(np.maximum(a.values, floor))
    mask = a.values >= floor
    return _record(out, (a,), lambda g: (np.where(mask, g, 0.0),))


def clamp(a, lo, hi):
    """Two-sided clip; clamped entries are constants in the backward pass."""
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: [{lo}, {hi}]")
    out = Tensor(np.clip(a.values, lo, hi))
    mask = (a.values >= lo) & (a.values <= hi)
    return _record(out, (a,), lambda g: (np.where(mask, g, 0.0),))


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "lgamma": lgamma,
    "softplus": softplus,
    "square": square,
    "negate": negate,
    "add_const": add_const,
    "mul_const": mul_const,
}


def elementwise(kind, a, c=None):
    """Dispatch by kind; `c` is the scalar for add_const / mul_const."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("add_const", "mul_const"):
        return fn(a, c)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and structure


def total_sum(a):
    out = Tensor(a.values.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.values.shape).copy(),))


def mean(a):
    n = a.values.size
    out = Tensor(a.values.sum() / n)
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.values.shape).copy(),))


def row_sum(a):
    out = Tensor(a.values.sum(axis=1, keepdims=True))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.values.shape).copy(),))


def row_max_const(a):
    """Per-row max as a plain array (no gradient); for log-sum-exp shifts."""
    return a.values.max(axis=1, keepdims=True)


def row_softmax(a, temperature):
    """Tempered softmax per row, computed with max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.values / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def back(g):
        inner = (y * g).sum(axis=1, keepdims=True)
        return ((y * g - y * inner) / temperature,)

    return _record(out, (a,), back)


def stop_gradient(a):
    """Forward identity that contributes no gradient to its input."""
    return Tensor(a.values.copy())


def diag_part(a):
    n, m = a.values.shape
    if n != m:
        raise ShapeError(f"diag_part needs a square matrix, got {a.values.shape}")
    out = Tensor(np.diagonal(a.values).reshape(n, 1))

    def back(g):
        full = np.zeros_like(a.values)
        np.fill_diagonal(full, g[:, 0])
        return (full,)

    return _record(out, (a,), back)
