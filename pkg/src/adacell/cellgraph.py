"""Cell-graph construction and the differentiable adaptive neighbor sampler.

Two graph sources feed the model. A plain Euclidean KNN graph over the input
features bootstraps training. After that the graph is resampled every epoch
from the current embedding: RBF similarities get Gumbel noise, each row keeps
its top-K entries in the forward pass, and the tempered row softmax carries
the gradient (straight-through). Symmetrization happens on the hard matrix so
the committed graph is undirected and exactly binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from . import autodiff as ad

DIAG_MASK = -1e9  # added to the similarity diagonal; keeps self out of top-K
SIGMA_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# graph containers


@dataclass
class BinaryAdjacency:
    """Undirected 0/1 graph: symmetric, zero diagonal, stored sparse."""

    n: int
    edges: ad.SparseMatrix

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "BinaryAdjacency":
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ad.ShapeError(f"adjacency must be square, got {a.shape}")
        if not np.isin(a, (0.0, 1.0)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.trace(a) != 0:
            raise ValueError("adjacency diagonal must be zero")
        r, c = np.nonzero(a)
        return cls(a.shape[0], ad.SparseMatrix(a.shape[0], a.shape[0], r, c, a[r, c]))

    def to_dense(self) -> np.ndarray:
        return self.edges.to_dense()

    def degrees(self) -> np.ndarray:
        return np.asarray(self.edges.csr.sum(axis=1)).ravel().astype(np.int64)

    @property
    def edge_count(self) -> int:
        return self.edges.data.size // 2


@dataclass
class AdaptiveAdjacency:
    """One epoch's sampled graph.

    `hard` is the committed symmetric binary graph, `soft` the row-stochastic
    matrix carrying the gradient, and `straight_through` the tensor whose
    forward values equal `hard` while its backward pass is that of `soft`.
    `directed` keeps the pre-symmetrization row selections for diagnostics.
    """

    hard: BinaryAdjacency
    soft: ad.Tensor
    straight_through: ad.Tensor
    directed: np.ndarray


class NormalizedAdjacency:
    """Symmetrically normalized operator D^{-1/2}(A + I)D^{-1/2}.

    Matrix powers used by the graph convolution kernel are cached on demand;
    power 0 is the identity. Propagation loops should prefer repeated
    `operator` application, which stays sparse, over the cached powers.
    """

    def __init__(self, operator: ad.SparseMatrix, k_order: int):
        self.operator = operator
        self.k_order = int(k_order)
        self._powers = [sp.identity(operator.rows, format="csr"), operator.csr]

    def power(self, k: int) -> sp.csr_matrix:
        if k < 0:
            raise ValueError(f"power must be nonnegative, got {k}")
        while len(self._powers) <= k:
            self._powers.append((self._powers[-1] @ self.operator.csr).tocsr())
        return self._powers[k]

    @property
    def powers(self) -> list:
        return [self.power(k) for k in range(self.k_order + 1)]


@dataclass
class DegreeHistogram:
    degrees: np.ndarray
    mean: float
    std: float
    min: int
    max: int
    bins: list = field(default_factory=list)  # [lo, hi, count], width 5

    def as_dict(self) -> dict:
        return {
            "degrees": [int(d) for d in self.degrees],
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "bins": [[int(lo), int(hi), int(c)] for lo, hi, c in self.bins],
        }


# ---------------------------------------------------------------------------
# construction


def knn_graph(features: np.ndarray, k: int) -> BinaryAdjacency:
    """Mutual-ized Euclidean KNN graph: directed top-k, then reciprocal edges.

    Distance ties break toward the smaller node index; self is excluded.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ad.ShapeError(f"feature matrix must be 2-d, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    n = x.shape[0]
    if k >= n:
        raise ValueError(f"k must be < number of cells ({k} >= {n})")
    d2 = cdist(x, x, metric="sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    directed = np.zeros((n, n))
    directed[np.repeat(np.arange(n), k), order.ravel()] = 1.0
    return symmetrize(directed)


def rbf_similarity(z: ad.Tensor, sigma: float) -> ad.Tensor:
    """Gaussian similarity exp(-||z_i - z_j||^2 / (2 sigma^2)), diagonal masked.

    The mask pushes the diagonal far below any kernel value so a node never
    samples itself; gradients to the diagonal are zeroed by the mask multiply.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = z.shape[0]
    sq = ad.row_sum(ad.square(z))
    d2 = ad.sub(ad.add(sq, ad.transpose(sq)), ad.mul_const(ad.matmul(z, ad.transpose(z)), 2.0))
    d2 = ad.relu(d2)  # cancellation can leave tiny negatives; keep the exponent <= 0
    s = ad.exp(ad.mul_const(d2, -1.0 / (2.0 * sigma * sigma)))
    off = ad.Tensor(1.0 - np.eye(n))
    return ad.add(ad.mul(s, off), ad.Tensor(DIAG_MASK * np.eye(n)))


def median_sigma(z_values: np.ndarray) -> float:
    """Bandwidth from the median heuristic: 2 sigma^2 = median pairwise sq dist."""
    z = np.asarray(z_values, dtype=np.float64)
    d2 = cdist(z, z, metric="sqeuclidean")
    off = d2[~np.eye(z.shape[0], dtype=bool)]
    if off.size == 0:
        return SIGMA_FLOOR
    return max(float(np.sqrt(np.median(off) / 2.0)), SIGMA_FLOOR)


def sample_gumbel(rng: ad.RngState, shape) -> ad.Tensor:
    """Standard Gumbel draws via inverse CDF, G = -ln(-ln U), U in (0,1)."""
    u = rng.uniform_open(shape)
    return ad.Tensor(-np.log(-np.log(u)))


def gumbel_topk_adjacency(s: ad.Tensor, k: int, tau: float, rng: ad.RngState) -> AdaptiveAdjacency:
    """Sample a symmetric binary graph whose gradient path is a row softmax.

    Perturb similarities with Gumbel noise, keep each row's top-k entries as
    hard neighbors (ties to the smaller column), and splice the symmetrized
    hard matrix onto the tempered softmax so downstream gradients flow into s.
    """
    n = s.shape[0]
    if s.values.ndim != 2 or s.shape[1] != n:
        raise ad.ShapeError(f"similarity matrix must be square, got {s.shape}")
    if k >= n:
        raise ValueError(f"k must be < number of cells ({k} >= {n})")
    noisy = ad.add(s, sample_gumbel(rng, (n, n)))
    y = ad.row_softmax(noisy, tau)
    top = np.argsort(-noisy.values, axis=1, kind="stable")[:, :k]
    directed = np.zeros((n, n))
    directed[np.repeat(np.arange(n), k), top.ravel()] = 1.0
    hard = symmetrize(directed)
    st = ad.override_forward(hard.to_dense(), y)
    return AdaptiveAdjacency(hard=hard, soft=y, straight_through=st, directed=directed)


def symmetrize(a) -> BinaryAdjacency:
    """min(A + A^T, 1) with the diagonal forced to zero."""
    dense = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise ad.ShapeError(f"adjacency must be square, got {dense.shape}")
    if not np.isin(dense, (0.0, 1.0)).all():
        raise ValueError("symmetrize expects a 0/1 matrix")
    out = np.minimum(dense + dense.T, 1.0)
    np.fill_diagonal(out, 0.0)
    return BinaryAdjacency.from_dense(out)


def normalize_adjacency(a: BinaryAdjacency, k_order: int) -> NormalizedAdjacency:
    """Add self loops and apply symmetric degree normalization."""
    if k_order < 0:
        raise ValueError(f"k_order must be nonnegative, got {k_order}")
    a_hat = (a.edges.csr + sp.identity(a.n, format="csr")).tocsr()
    dinv = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())
    op = sp.diags(dinv) @ a_hat @ sp.diags(dinv)
    return NormalizedAdjacency(ad.SparseMatrix.from_scipy(op.tocsr()), k_order)


def normalize_adjacency_tensor(st: ad.Tensor) -> ad.Tensor:
    """Differentiable counterpart of normalize_adjacency for sampled graphs.

    Takes the straight-through adjacency, adds self loops, and rescales by
    rsqrt degrees on the tape so the normalization itself backpropagates.
    """
    n = st.shape[0]
    a_hat = ad.add(st, ad.Tensor(np.eye(n)))
    dinv = ad.rsqrt(ad.row_sum(a_hat))
    return ad.mul(ad.mul(a_hat, dinv), ad.transpose(dinv))


def degree_stats(a: BinaryAdjacency) -> DegreeHistogram:
    """Per-node degrees with fixed width-5 bins for distribution diagnostics."""
    deg = a.degrees()
    edges = np.arange(0, deg.max() + 6, 5)
    counts, _ = np.histogram(deg, bins=edges)
    bins = [[int(lo), int(lo) + 5, int(c)] for lo, c in zip(edges[:-1], counts)]
    return DegreeHistogram(
        degrees=deg,
        mean=float(deg.mean()),
        std=float(deg.std()),
        min=int(deg.min()),
        max=int(deg.max()),
        bins=bins,
    )
