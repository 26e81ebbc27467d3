"""Two-phase optimization over the adaptive cell graph.

Phase one learns embeddings by reconstructing the sampled graph and the raw
counts; phase two adds center-based self-training on top of the same per-epoch
body. Each epoch embeds the previous graph, resamples a new graph from that
embedding, embeds again, and aligns the two embeddings contrastively — the
consecutive graphs act as the two views of the data. All randomness flows
through named child streams of one seed, so a run is a pure function of
(data, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.spatial.distance

from . import autodiff as ad
from . import cellgraph as cg
from . import losses, model, storage
from .ingest import PreprocessedData

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 200


class TrainerError(RuntimeError):
    """Non-finite loss or gradient; training cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; `clusters` is the one field without a default."""

    clusters: int
    k: int = 15
    m: int = 1500
    k_order: int = 3
    widths: tuple = (512, 256, 128)
    t1: int = 1000
    t2: int = 300
    lr_pre: float = 1e-2
    lr_formal: float = 5e-4
    lambda_graph: float = 0.3
    lambda_zinb: float = 1.0
    lambda_contrastive: float = 0.01
    lambda_kl: float = 1.5
    tau: float = 1.0
    tau_c: float = 0.7
    seed: int = 0
    p_refresh_interval: int = 1
    disable_contrastive: bool = False
    disable_adaptive_graph: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        for name in ("clusters", "k", "m", "k_order", "p_refresh_interval"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("t1", "t2", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
        for name in ("lr_pre", "lr_formal", "tau", "tau_c"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths!r}")
        for name in ("lambda_graph", "lambda_zinb", "lambda_contrastive", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)!r}")

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            graph=self.lambda_graph,
            zinb=self.lambda_zinb,
            contrastive=0.0 if self.disable_contrastive else self.lambda_contrastive,
            kl=self.lambda_kl,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            out[f] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass
class AdamState:
    """First/second moment arrays per parameter name, plus the step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, named: dict) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.values) for n, t in named.items()},
            v={n: np.zeros_like(t.values) for n, t in named.items()},
        )


def adam_step(named: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction.

    All gradients are validated before any parameter moves, so a bad gradient
    aborts with every parameter still at its last committed value.
    """
    for name, tensor in named.items():
        g = grads[name]
        if g.shape != tensor.values.shape:
            raise ad.ShapeError(
                f"gradient shape {g.shape} vs parameter {name!r} {tensor.values.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainerError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, tensor in named.items():
        g = grads[name]
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        tensor.values = tensor.values - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# k-means


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.spatial.distance.cdist(a, b, "sqeuclidean")


def _seed_centers(z: np.ndarray, c: int, rng: ad.RngState) -> np.ndarray:
    """D^2-weighted seeding; duplicates carry zero weight and are never re-picked."""
    n = z.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = ((z - z[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        if d2.sum() > 0:
            nxt = rng.choice_weighted(n, d2)
        else:
            nxt = int(rng.integers(0, n))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((z - z[nxt]) ** 2).sum(axis=1))
    return z[chosen].astype(np.float64, copy=True)


def kmeans(z, c: int, restarts: int = KMEANS_RESTARTS, rng: ad.RngState | None = None):
    """Lloyd's algorithm, best of `restarts` by within-cluster sum of squares."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"cluster count must be in [1, {n}], got {c}")
    if rng is None:
        rng = ad.RngState(0)
    best = None
    for _ in range(restarts):
        centers = _seed_centers(z, c, rng)
        labels = None
        for _ in range(KMEANS_MAX_ITER):
            d2 = _sqdist(z, centers)
            new_labels = d2.argmin(axis=1)
            for empty in np.flatnonzero(np.bincount(new_labels, minlength=c) == 0):
                farthest = int(d2[np.arange(n), new_labels].argmax())
                centers[empty] = z[farthest]
                d2[:, empty] = ((z - z[farthest]) ** 2).sum(axis=1)
                new_labels = d2.argmin(axis=1)
            if labels is not None and (new_labels == labels).all():
                break
            labels = new_labels
            for ci in range(c):
                centers[ci] = z[labels == ci].mean(axis=0)
        wcss = float(((z - centers[labels]) ** 2).sum())
        if best is None or wcss < best[0]:
            best = (wcss, centers, labels)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# traces and checkpoints


@dataclass
class TrainingTrace:
    """One record per completed epoch, JSON-lines on disk."""

    records: list = field(default_factory=list)

    def append(self, **fields) -> None:
        self.records.append(dict(fields))

    def write_jsonl(self, path) -> None:
        text = "".join(storage.canonical_json(r) + "\n" for r in self.records)
        storage.atomic_write_text(path, text)


def write_checkpoint(path, params, cfg: TrainConfig, phase: str, epoch: int,
                     centers: ad.Tensor | None = None) -> None:
    arrays = {name: t.values for name, t in params.named().items()}
    if centers is not None:
        arrays["centers"] = centers.values
    storage.save_arrays(
        path,
        arrays,
        meta={
            "config_hash": storage.config_hash(cfg.to_dict()),
            "phase": phase,
            "epoch": epoch,
        },
    )


# ---------------------------------------------------------------------------
# the per-epoch body shared by both phases


@dataclass
class EpochResult:
    tape: ad.Tape
    total: ad.Tensor
    loss_graph: ad.Tensor
    loss_zinb: ad.Tensor
    loss_contrastive: ad.Tensor | None
    loss_kl: ad.Tensor | None
    graph: cg.AdaptiveAdjacency
    q: ad.Tensor | None
    p: np.ndarray | None


def _epoch_forward(params, x_t, data, cfg, graph, op_prev, rng_graph, phase,
                   centers=None, p_const=None, refresh_p=True) -> EpochResult:
    with ad.Tape() as tape:
        z_prev = model.encode(x_t, op_prev, params.encoder)
        if cfg.disable_adaptive_graph:
            new_graph = graph  # the initial KNN graph, all training long
            z_new = z_prev  # identity views: both sides of the contrast match
        else:
            sigma = cg.median_sigma(z_prev.z.values)
            s = cg.rbf_similarity(z_prev.z, sigma)
            new_graph = cg.gumbel_topk_adjacency(s, cfg.k, cfg.tau, rng_graph)
            op_new = cg.normalize_adjacency_tensor(new_graph.straight_through)
            z_new = model.encode(x_t, op_new, params.encoder)
        a_tilde = model.decode_adjacency(z_new)
        lg = losses.graph_recon_loss(new_graph.hard, a_tilde)
        pi, mu, theta = model.zinb_head(z_new, data.size_factors, params.zinb)
        lz = losses.zinb_nll(data.x_raw, pi, mu, theta)
        if cfg.disable_contrastive:
            lcg = ad.Tensor(np.zeros(()))  # term absent; constant keeps the sum shape
        else:
            lcg = losses.contrastive_loss(z_prev.z, z_new.z, cfg.tau_c)
        q = lkl = None
        if phase == "cluster":
            q = losses.soft_assign(z_new, centers)
            if refresh_p or p_const is None:
                p_const = losses.target_distribution(q.values)
            lkl = losses.kl_cluster_loss(p_const, q)
        total = losses.total_loss(phase, lg, lz, lcg, lkl, cfg.weights())
    return EpochResult(tape, total, lg, lz, lcg, lkl, new_graph, q, p_const)


def _apply_update(result: EpochResult, params, centers, state, lr, phase, epoch,
                  checkpoint_dir, cfg) -> None:
    named = dict(params.named())
    if centers is not None:
        named["centers"] = centers
    try:
        if not math.isfinite(float(result.total.values)):
            raise TrainerError(
                f"non-finite loss {float(result.total.values)!r} "
                f"in {phase} epoch {epoch}"
            )
        trainables = list(named.values())
        ad.backward(result.tape, result.total, trainables)
        adam_step(named, {n: t.grad for n, t in named.items()}, state, lr)
    except TrainerError:
        # parameters are untouched past a bad gradient, so this snapshot is
        # the last fully committed state
        if checkpoint_dir is not None:
            write_checkpoint(
                f"{checkpoint_dir}/checkpoint-aborted.bin",
                params, cfg, phase, epoch, centers,
            )
        raise
    for name, tensor in named.items():
        if not np.isfinite(tensor.values).all():
            raise TrainerError(f"non-finite parameter {name!r} after {phase} epoch {epoch}")


def _checkpoint_abort(exc, params, centers, phase, epoch, checkpoint_dir, cfg):
    # a domain error during the forward pass leaves params at the last
    # committed state, so the snapshot taken here is still good
    if checkpoint_dir is not None:
        write_checkpoint(f"{checkpoint_dir}/checkpoint-aborted.bin",
                         params, cfg, phase, epoch, centers)
    raise TrainerError(
        f"non-finite forward pass in {phase} epoch {epoch}: {exc}"
    ) from exc


def _degree_fields(hard: cg.BinaryAdjacency) -> dict:
    h = cg.degree_stats(hard)
    return {
        "degree_mean": h.mean,
        "degree_std": h.std,
        "degree_min": int(h.min),
        "degree_max": int(h.max),
    }


def _loss_fields(result: EpochResult) -> dict:
    def val(t):
        return None if t is None else float(t.values)

    return {
        "loss_total": val(result.total),
        "loss_graph": val(result.loss_graph),
        "loss_zinb": val(result.loss_zinb),
        "loss_contrastive": val(result.loss_contrastive),
        "loss_kl": val(result.loss_kl),
    }


def _initial_graph(data: PreprocessedData, cfg: TrainConfig) -> cg.AdaptiveAdjacency:
    knn = cg.knn_graph(data.x_log, cfg.k)
    return cg.AdaptiveAdjacency(hard=knn, soft=None, straight_through=None, directed=None)


# ---------------------------------------------------------------------------
# phases


def pretrain(data: PreprocessedData, cfg: TrainConfig, rng: ad.RngState,
             trace: TrainingTrace | None = None, checkpoint_dir=None):
    """Phase one. Returns (params, final graph, final embedding)."""
    if trace is None:
        trace = TrainingTrace()
    x_t = ad.Tensor(data.x_log)
    n_genes = data.x_raw.shape[1]
    params = model.ModelParams.init(
        rng.child("init"), data.x_log.shape[1], n_genes, cfg.k_order, cfg.widths
    )
    rng_graph = rng.child("graph")
    graph = _initial_graph(data, cfg)
    op_prev = cg.normalize_adjacency(graph.hard, cfg.k_order)
    state = AdamState.for_params(params.named())
    for epoch in range(cfg.t1):
        try:
            result = _epoch_forward(
                params, x_t, data, cfg, graph, op_prev, rng_graph, "pretrain"
            )
        except ad.NumericDomainError as exc:
            _checkpoint_abort(exc, params, None, "pretrain", epoch,
                              checkpoint_dir, cfg)
        _apply_update(result, params, None, state, cfg.lr_pre, "pretrain", epoch,
                      checkpoint_dir, cfg)
        graph = result.graph
        op_prev = cg.normalize_adjacency(graph.hard, cfg.k_order)
        trace.append(
            phase="pretrain", epoch=epoch, label_change=None,
            **_loss_fields(result), **_degree_fields(graph.hard),
        )
    embedding = model.encode(x_t, op_prev, params.encoder)
    return params, graph, embedding


def train_cluster(params, graph, data: PreprocessedData, cfg: TrainConfig,
                  rng: ad.RngState, trace: TrainingTrace | None = None,
                  checkpoint_dir=None):
    """Phase two. Returns (params, ClusterState, final graph)."""
    if trace is None:
        trace = TrainingTrace()
    x_t = ad.Tensor(data.x_log)
    op_prev = cg.normalize_adjacency(graph.hard, cfg.k_order)
    embedding = model.encode(x_t, op_prev, params.encoder)
    centers_np, labels = kmeans(
        embedding.z.values, cfg.clusters, KMEANS_RESTARTS, rng.child("kmeans")
    )
    centers = ad.Tensor(centers_np, trainable=True, name="centers")
    named = dict(params.named())
    named["centers"] = centers
    state = AdamState.for_params(named)
    rng_graph = rng.child("graph")
    p_const = None
    for epoch in range(cfg.t2):
        try:
            result = _epoch_forward(
                params, x_t, data, cfg, graph, op_prev, rng_graph, "cluster",
                centers=centers, p_const=p_const,
                refresh_p=(epoch % cfg.p_refresh_interval == 0),
            )
        except ad.NumericDomainError as exc:
            _checkpoint_abort(exc, params, centers, "cluster", epoch,
                              checkpoint_dir, cfg)
        p_const = result.p
        _apply_update(result, params, centers, state, cfg.lr_formal, "cluster",
                      epoch, checkpoint_dir, cfg)
        graph = result.graph
        op_prev = cg.normalize_adjacency(graph.hard, cfg.k_order)
        new_labels = result.q.values.argmax(axis=1)
        label_change = float((new_labels != labels).mean())
        labels = new_labels
        trace.append(
            phase="cluster", epoch=epoch, label_change=label_change,
            **_loss_fields(result), **_degree_fields(graph.hard),
        )
    final_embedding = model.encode(x_t, op_prev, params.encoder)
    q_final = losses.soft_assign(final_embedding, centers)
    cluster = losses.ClusterState(
        centers=centers, q=q_final, p=p_const,
        labels=q_final.values.argmax(axis=1),
    )
    return params, cluster, graph


@dataclass
class TrainResult:
    params: model.ModelParams
    cluster: losses.ClusterState
    trace: TrainingTrace
    initial_graph: cg.BinaryAdjacency
    final_graph: cg.AdaptiveAdjacency
    embedding: model.Embedding


def run_training(data: PreprocessedData, cfg: TrainConfig,
                 checkpoint_dir=None, trace: TrainingTrace | None = None) -> TrainResult:
    """Both phases end to end under one seed."""
    rng = ad.RngState(cfg.seed)
    if trace is None:
        trace = TrainingTrace()
    initial = cg.knn_graph(data.x_log, cfg.k)
    params, graph, _ = pretrain(data, cfg, rng, trace, checkpoint_dir)
    params, cluster, graph = train_cluster(
        params, graph, data, cfg, rng, trace, checkpoint_dir
    )
    x_t = ad.Tensor(data.x_log)
    op = cg.normalize_adjacency(graph.hard, cfg.k_order)
    embedding = model.encode(x_t, op, params.encoder)
    return TrainResult(params, cluster, trace, initial, graph, embedding)
