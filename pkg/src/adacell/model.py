"""Topology-adaptive graph autoencoder and the count-model parameter head.

The encoder stacks three graph convolution layers whose kernels mix powers
0..K_order of the normalized adjacency; widths taper M -> 512 -> 256 -> 128
with a linear final layer so embeddings keep their sign. The adjacency
decoder is a sigmoid Gram matrix. The count head maps embeddings back through
two ReLU layers and three parallel linear maps into the dropout, mean, and
dispersion parameters of a zero-inflated negative binomial, with per-cell
size factors scaling the mean so raw counts are modeled directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cellgraph import NormalizedAdjacency

ENCODER_WIDTHS = (512, 256, 128)
ZINB_HIDDEN = (256, 512)
MU_CLAMP = 15.0
THETA_FLOOR = 1e-4


@dataclass
class Embedding:
    z: ad.Tensor

    @property
    def values(self):
        return self.z.values


def glorot(rng: ad.RngState, fan_in: int, fan_out: int, name: str) -> ad.Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.child(name).uniform(-bound, bound, (fan_in, fan_out))
    return ad.Tensor(w, trainable=True, name=name)


class EncoderParams:
    """Per-layer, per-kernel-order weights; no biases in the conv layers."""

    def __init__(self, weights: list):
        self.weights = weights  # weights[l][k] : Tensor (d_{l-1} x d_l)
        for layer in weights:
            d_in, d_out = layer[0].shape
            for w in layer:
                if w.shape != (d_in, d_out):
                    raise ad.ShapeError("kernel order weights disagree on shape")
                if not np.isfinite(w.values).all():
                    raise ValueError("non-finite encoder weight")

    @classmethod
    def init(cls, rng: ad.RngState, input_dim: int, k_order: int,
             widths=ENCODER_WIDTHS) -> "EncoderParams":
        dims = (input_dim, *widths)
        layers = []
        for l in range(len(widths)):
            layers.append(
                [
                    glorot(rng, dims[l], dims[l + 1], f"layer{l + 1}.order{k}")
                    for k in range(k_order + 1)
                ]
            )
        return cls(layers)

    @property
    def k_order(self) -> int:
        return len(self.weights[0]) - 1

    def named(self) -> dict:
        return {w.name: w for layer in self.weights for w in layer}

    def trainables(self) -> list:
        return [w for layer in self.weights for w in layer]


class ZinbHeadParams:
    """Two ReLU layers widening 128 -> 256 -> 512, then three parallel heads."""

    def __init__(self, tensors: dict):
        self.tensors = tensors
        m = tensors["zinb.pi.weight"].shape[1]
        for head in ("pi", "mu", "theta"):
            if tensors[f"zinb.{head}.weight"].shape[1] != m:
                raise ad.ShapeError("head output widths disagree")

    @classmethod
    def init(cls, rng: ad.RngState, embed_dim: int, n_genes: int,
             hidden=ZINB_HIDDEN) -> "ZinbHeadParams":
        dims = (embed_dim, *hidden)
        t = {}
        for i in range(len(hidden)):
            t[f"zinb.fc{i + 1}.weight"] = glorot(rng, dims[i], dims[i + 1], f"zinb.fc{i + 1}.weight")
            t[f"zinb.fc{i + 1}.bias"] = ad.Tensor(
                np.zeros((1, dims[i + 1])), trainable=True, name=f"zinb.fc{i + 1}.bias"
            )
        for head in ("pi", "mu", "theta"):
            t[f"zinb.{head}.weight"] = glorot(rng, dims[-1], n_genes, f"zinb.{head}.weight")
            t[f"zinb.{head}.bias"] = ad.Tensor(
                np.zeros((1, n_genes)), trainable=True, name=f"zinb.{head}.bias"
            )
        return cls(t)

    def named(self) -> dict:
        return dict(self.tensors)

    def trainables(self) -> list:
        return list(self.tensors.values())


class ModelParams:
    """Encoder plus count-head parameters under one namespace."""

    def __init__(self, encoder: EncoderParams, zinb: ZinbHeadParams):
        self.encoder = encoder
        self.zinb = zinb

    @classmethod
    def init(cls, rng: ad.RngState, input_dim: int, n_genes: int, k_order: int,
             widths=ENCODER_WIDTHS) -> "ModelParams":
        widths = tuple(widths)
        encoder = EncoderParams.init(rng, input_dim, k_order, widths)
        hidden = tuple(reversed(widths))[1:]  # decode mirrors the encoder widths
        zinb = ZinbHeadParams.init(rng, widths[-1], n_genes, hidden)
        return cls(encoder, zinb)

    def named(self) -> dict:
        return {**self.encoder.named(), **self.zinb.named()}

    def trainables(self) -> list:
        return self.encoder.trainables() + self.zinb.trainables()


def _apply_operator(op, h: ad.Tensor) -> ad.Tensor:
    if isinstance(op, ad.Tensor):
        return ad.spmm_tensor(op, h)
    if isinstance(op, NormalizedAdjacency):
        return ad.spmm(op.operator, h)
    raise TypeError(f"unsupported operator type {type(op).__name__}")


def tagcn_layer(h: ad.Tensor, op, weights: list, activation: str) -> ad.Tensor:
    """One graph conv layer: activation( sum_k op^k h W_k ).

    `op` is either a NormalizedAdjacency (constant graph) or the normalized
    operator as a tape tensor (sampled graph, gradients flow into the graph).
    Powers are applied iteratively so cost stays proportional to edge count.
    """
    if activation not in ("relu", "linear"):
        raise ValueError(f"activation must be relu or linear, got {activation!r}")
    if h.shape[1] != weights[0].shape[0]:
        raise ad.ShapeError(
            f"layer input width {h.shape[1]} does not match weights {weights[0].shape}"
        )
    prop = h
    out = ad.matmul(h, weights[0])
    for w_k in weights[1:]:
        prop = _apply_operator(op, prop)
        out = ad.add(out, ad.matmul(prop, w_k))
    return ad.relu(out) if activation == "relu" else out


def encode(x: ad.Tensor, op, params: EncoderParams) -> Embedding:
    """Three stacked conv layers, ReLU twice then linear, onto N x 128."""
    h = x
    last = len(params.weights) - 1
    for l, layer_weights in enumerate(params.weights):
        act = "linear" if l == last else "relu"
        h = tagcn_layer(h, op, layer_weights, act)
    return Embedding(h)


def decode_adjacency(emb: Embedding) -> ad.Tensor:
    """Reconstructed edge probabilities: sigmoid of the embedding Gram matrix."""
    z = emb.z
    return ad.sigmoid(ad.matmul(z, ad.transpose(z)))


def zinb_head(emb: Embedding, size_factors: np.ndarray, params: ZinbHeadParams):
    """Map embeddings to (pi, mu, theta) of the count model.

    pi is a sigmoid probability, mu = size_factor * exp(clamped pre-activation)
    so library size is explicit, theta = softplus + floor keeps the dispersion
    strictly positive.
    """
    t = params.tensors
    h = emb.z
    i = 1
    while f"zinb.fc{i}.weight" in t:
        h = ad.relu(ad.add(ad.matmul(h, t[f"zinb.fc{i}.weight"]), t[f"zinb.fc{i}.bias"]))
        i += 1
    pi = ad.sigmoid(ad.add(ad.matmul(h, t["zinb.pi.weight"]), t["zinb.pi.bias"]))
    mu_pre = ad.clamp(
        ad.add(ad.matmul(h, t["zinb.mu.weight"]), t["zinb.mu.bias"]), -MU_CLAMP, MU_CLAMP
    )
    sf = ad.Tensor(np.asarray(size_factors, dtype=np.float64).reshape(-1, 1))
    mu = ad.mul(ad.exp(mu_pre), sf)
    theta = ad.add_const(
        ad.softplus(ad.add(ad.matmul(h, t["zinb.theta.weight"]), t["zinb.theta.bias"])),
        THETA_FLOOR,
    )
    return pi, mu, theta
