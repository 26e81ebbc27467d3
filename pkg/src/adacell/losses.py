"""Training objectives: graph reconstruction, count likelihood, contrastive
guidance, and the self-training clustering divergence.

All terms are built on the tape so one backward pass covers every parameter,
including the sampled graph. The count likelihood is evaluated entirely in
log space; branch selection between zero and positive counts happens through
constant masks so no entry ever sees the other branch's gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .cellgraph import BinaryAdjacency
from .model import Embedding

LOG_FLOOR = 1e-30  # probability floors inside logs; far below any live value
Q_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Mixing coefficients for the composite objectives."""

    graph: float = 0.3
    zinb: float = 1.0
    contrastive: float = 0.01
    kl: float = 1.5

    def __post_init__(self):
        for name in ("graph", "zinb", "contrastive", "kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class ClusterState:
    """Cluster centers plus the latest soft/target assignments."""

    centers: ad.Tensor  # C x D, trainable
    q: ad.Tensor | None = None
    p: np.ndarray | None = None
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]


@dataclass
class Temperatures:
    tau: float = 1.0
    tau_c: float = 0.7

    def __post_init__(self):
        if self.tau <= 0 or self.tau_c <= 0:
            raise ValueError("temperatures must be positive")


def graph_recon_loss(a: BinaryAdjacency, a_tilde: ad.Tensor) -> ad.Tensor:
    """Mean squared difference between the sampled graph and its decode."""
    target = a.to_dense()
    if target.shape != a_tilde.shape:
        raise ad.ShapeError(
            f"adjacency {target.shape} vs reconstruction {a_tilde.shape}"
        )
    return ad.mean(ad.square(ad.sub(a_tilde, ad.Tensor(target))))


def zinb_nll_matrix(x: np.ndarray, pi: ad.Tensor, mu: ad.Tensor, theta: ad.Tensor) -> ad.Tensor:
    """Entrywise negative log-likelihood of the zero-inflated count model.

    Zero counts mix the dropout mass with the count model's own zero
    probability through a log-sum-exp; positive counts take the negative
    binomial log pmf plus the no-dropout log weight.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != pi.shape:
        raise ad.ShapeError(f"counts {x.shape} vs parameters {pi.shape}")
    if (x < 0).any() or np.mod(x, 1).any():
        raise ValueError("counts must be nonnegative integers")

    ln_pi = ad.log(pi, floor=LOG_FLOOR)
    ln_1mpi = ad.log(ad.add_const(ad.negate(pi), 1.0), floor=LOG_FLOOR)
    theta_mu = ad.add(theta, mu)
    ln_ratio_theta = ad.sub(ad.log(theta, floor=LOG_FLOOR), ad.log(theta_mu, floor=LOG_FLOOR))
    ln_ratio_mu = ad.sub(ad.log(mu, floor=LOG_FLOOR), ad.log(theta_mu, floor=LOG_FLOOR))
    nb_zero = ad.mul(theta, ln_ratio_theta)  # theta ln(theta/(theta+mu))

    # x = 0: -ln(pi + (1-pi) p_nb(0)) as -logaddexp(ln pi, ln(1-pi)+ln p_nb(0))
    b = ad.add(ln_1mpi, nb_zero)
    zero_nll = ad.negate(ad.add(b, ad.softplus(ad.sub(ln_pi, b))))

    # x > 0: negative binomial log pmf with the (1-pi) component weight
    xt = ad.Tensor(x)
    ll_pos = ad.add(ln_1mpi, ad.lgamma(ad.add(theta, xt)))
    ll_pos = ad.sub(ll_pos, ad.lgamma(theta))
    ll_pos = ad.sub(ll_pos, ad.Tensor(gammaln(x + 1.0)))
    ll_pos = ad.add(ll_pos, ad.mul(theta, ln_ratio_theta))
    ll_pos = ad.add(ll_pos, ad.mul(xt, ln_ratio_mu))

    mask0 = ad.Tensor((x == 0).astype(np.float64))
    maskp = ad.Tensor((x > 0).astype(np.float64))
    return ad.add(ad.mul(mask0, zero_nll), ad.mul(maskp, ad.negate(ll_pos)))


def zinb_nll(x: np.ndarray, pi: ad.Tensor, mu: ad.Tensor, theta: ad.Tensor) -> ad.Tensor:
    """Mean entrywise NLL over all cells and genes."""
    return ad.mean(zinb_nll_matrix(x, pi, mu, theta))


def _unit_rows(z: ad.Tensor) -> ad.Tensor:
    norms = ad.clamp_min(ad.sqrt(ad.row_sum(ad.square(z))), NORM_FLOOR)
    return ad.div(z, norms, floor=NORM_FLOOR)


def contrastive_loss(z1: ad.Tensor, z2: ad.Tensor, tau_c: float) -> ad.Tensor:
    """One-directional InfoNCE over cosine similarities.

    Anchors are rows of z1; each is pulled toward its same-index row in z2
    against the whole of z2 (positive included in the denominator).
    """
    if z1.shape != z2.shape:
        raise ad.ShapeError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    if z1.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 rows")
    if tau_c <= 0:
        raise ValueError(f"tau_c must be positive, got {tau_c}")
    logits = ad.mul_const(ad.matmul(_unit_rows(z1), ad.transpose(_unit_rows(z2))), 1.0 / tau_c)
    shift = ad.row_max_const(logits)  # constant shift, gradient-exact for LSE
    lse = ad.add(ad.log(ad.row_sum(ad.exp(ad.sub(logits, ad.Tensor(shift))))), ad.Tensor(shift))
    return ad.mean(ad.sub(lse, ad.diag_part(logits)))


def soft_assign(emb: Embedding, centers: ad.Tensor) -> ad.Tensor:
    """Student-t soft cluster responsibilities q_ic from embedding distances."""
    z = emb.z if isinstance(emb, Embedding) else emb
    sq_z = ad.row_sum(ad.square(z))
    sq_c = ad.transpose(ad.row_sum(ad.square(centers)))
    cross = ad.matmul(z, ad.transpose(centers))
    d2 = ad.sub(ad.add(sq_z, sq_c), ad.mul_const(cross, 2.0))
    kernel = ad.reciprocal(ad.add_const(ad.relu(d2), 1.0))
    return ad.div(kernel, ad.row_sum(kernel))


def target_distribution(q_values: np.ndarray) -> np.ndarray:
    """Sharpened targets p from soft assignments; constant under differentiation."""
    q = np.asarray(q_values, dtype=np.float64)
    freq = q.sum(axis=0)
    w = q * q / np.maximum(freq, Q_FLOOR)
    return w / w.sum(axis=1, keepdims=True)


def kl_cluster_loss(p: np.ndarray, q: ad.Tensor) -> ad.Tensor:
    """Sum over cells and clusters of p ln(p/q); zero-p terms contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != q.shape:
        raise ad.ShapeError(f"target {p.shape} vs assignment {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        p_log_p = float(np.where(p > 0, p * np.log(np.maximum(p, Q_FLOOR)), 0.0).sum())
    cross = ad.total_sum(ad.mul(ad.Tensor(p), ad.log(q, floor=Q_FLOOR)))
    return ad.add_const(ad.negate(cross), p_log_p)


def total_loss(phase: str, lg, lzinb, lcg, lkl, w: LossWeights) -> ad.Tensor:
    """Weighted combination; the cluster phase adds the KL term."""
    if phase not in ("pretrain", "cluster"):
        raise ValueError(f"unknown phase {phase!r}")
    out = ad.add(
        ad.add(ad.mul_const(lg, w.graph), ad.mul_const(lzinb, w.zinb)),
        ad.mul_const(lcg, w.contrastive),
    )
    if phase == "cluster":
        if lkl is None:
            raise ValueError("cluster phase requires the KL term")
        out = ad.add(out, ad.mul_const(lkl, w.kl))
    return out
