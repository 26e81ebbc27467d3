"""Synthetic count datasets with known labels.

Two generators: a zero-inflated NB mixture over well-separated expression
programs (ground truth for end-to-end clustering checks), and a 2-d point
cloud whose KNN graph develops hub nodes (for degree-tail experiments).
Both are pure functions of an RngState, so artifacts are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import RngState
from .ingest import CountMatrix

BASE_LOG_SIGMA = 0.5  # log-normal spread of the shared base expression
SIGNATURE_FACTOR = 8.0  # fold change on each cluster's marker block
SIGNATURE_FRACTION = 0.10  # fraction of genes in one marker block
BLOB_FRACTION = 0.7
BLOB_SIGMA = 0.01  # dense blob is ~300x tighter than the background square
BACKGROUND_HALFWIDTH = 3.0
LIFT_BASE_LOG_RATE = float(np.log(50.0))  # ~50 counts/gene in the blob
LIFT_LOADING_SCALE = 0.4
LIFT_MAX_LOG_RATE = LIFT_BASE_LOG_RATE + 3.5


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the ZINB mixture; defaults give 5 balanced clusters."""

    n_cells: int = 1000
    n_genes: int = 300
    n_clusters: int = 5
    theta_gen: float = 2.0
    pi_gen: float = 0.3
    imbalance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be positive, got {self.n_clusters}")
        if self.n_cells < self.n_clusters:
            raise ValueError(
                f"need at least one cell per cluster ({self.n_cells} cells, "
                f"{self.n_clusters} clusters)"
            )
        if self.n_clusters * self.signature_size > self.n_genes:
            raise ValueError(
                f"{self.n_clusters} disjoint marker blocks of {self.signature_size} "
                f"genes do not fit in {self.n_genes} genes"
            )
        if not self.theta_gen > 0:
            raise ValueError(f"theta_gen must be positive, got {self.theta_gen}")
        # pi_gen = 1 is degenerate (every entry dropped) but kept constructible
        # so the all-zero boundary stays testable
        if not 0.0 <= self.pi_gen <= 1.0:
            raise ValueError(f"pi_gen must be in [0, 1], got {self.pi_gen}")
        if not self.imbalance >= 1.0:
            raise ValueError(f"imbalance must be >= 1, got {self.imbalance}")

    @property
    def signature_size(self) -> int:
        return max(1, round(SIGNATURE_FRACTION * self.n_genes))

    def cluster_sizes(self) -> np.ndarray:
        """Sizes summing to n_cells whose max/min ratio approximates imbalance."""
        c = self.n_clusters
        if c == 1:
            return np.array([self.n_cells])
        weights = 1.0 + (self.imbalance - 1.0) * np.arange(c) / (c - 1)
        raw = self.n_cells * weights / weights.sum()
        sizes = np.floor(raw).astype(int)
        leftover = self.n_cells - sizes.sum()
        by_fraction = np.argsort(-(raw - np.floor(raw)), kind="stable")
        sizes[by_fraction[:leftover]] += 1
        while sizes.min() < 1:  # extreme ratios must not empty a cluster
            sizes[np.argmin(sizes)] += 1
            sizes[np.argmax(sizes)] -= 1
        return sizes


def cluster_mean_profiles(spec: SynthSpec, rng: RngState) -> np.ndarray:
    """Per-cluster mean expression: shared log-normal base, disjoint boosted blocks."""
    base = np.exp(rng.normal((spec.n_genes,), scale=BASE_LOG_SIGMA))
    profiles = np.tile(base, (spec.n_clusters, 1))
    block = spec.signature_size
    for c in range(spec.n_clusters):
        profiles[c, c * block : (c + 1) * block] *= SIGNATURE_FACTOR
    return profiles


def generate_zinb_mixture(spec: SynthSpec, rng: RngState):
    """Draw (CountMatrix, labels): dropout with prob pi_gen, else Gamma-Poisson NB."""
    sizes = spec.cluster_sizes()
    labels = np.repeat(np.arange(spec.n_clusters), sizes)
    mu = cluster_mean_profiles(spec, rng)[labels]
    nb = rng.poisson(rng.gamma(spec.theta_gen, mu / spec.theta_gen))
    dropped = rng.uniform_open(mu.shape) < spec.pi_gen
    counts = np.where(dropped, 0, nb)
    matrix = CountMatrix(
        counts=counts,
        gene_ids=[f"gene{j:05d}" for j in range(spec.n_genes)],
        cell_ids=[f"cell{i:05d}" for i in range(spec.n_cells)],
    )
    return matrix, labels


def generate_longtail_points(n: int, rng: RngState) -> np.ndarray:
    """n x 2 points: one tight blob (70%) over a sparse uniform background.

    Background points that sit closer to the blob than to 15 of their own kind
    all link into the blob's rim, so a KNN graph on these points grows hubs.
    """
    if n < 10:
        raise ValueError(f"need at least 10 points, got {n}")
    n_blob = round(BLOB_FRACTION * n)
    blob = rng.normal((n_blob, 2), scale=BLOB_SIGMA)
    h = BACKGROUND_HALFWIDTH
    background = rng.uniform(-h, h, (n - n_blob, 2))
    return np.vstack([blob, background])


def lift_points_to_counts(points: np.ndarray, n_genes: int, rng: RngState) -> CountMatrix:
    """Embed 2-d points as Poisson counts with log-linear gene rates.

    Log-rates are affine in the coordinates, so background-scale distances
    survive the lift, while the blob's internal spacing falls below the
    Poisson noise floor. Blob neighborhoods therefore scramble and in-links
    pile onto a few cells: the count-space KNN graph grows the degree tail
    this point set exists to provoke (stronger, in fact, than in 2-d).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"expected n x 2 points, got shape {points.shape}")
    loadings = rng.normal((2, n_genes), scale=LIFT_LOADING_SCALE)
    log_rate = np.minimum(LIFT_BASE_LOG_RATE + points @ loadings, LIFT_MAX_LOG_RATE)
    counts = rng.poisson(np.exp(log_rate))
    return CountMatrix(
        counts=counts,
        gene_ids=[f"gene{j:05d}" for j in range(n_genes)],
        cell_ids=[f"cell{i:05d}" for i in range(points.shape[0])],
    )


def write_dense_csv(path, matrix: CountMatrix) -> None:
    """Counts in the dense-csv layout the loader reads back."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell_id," + ",".join(matrix.gene_ids) + "\n")
        for cell_id, row in zip(matrix.cell_ids, matrix.counts):
            fh.write(cell_id + "," + ",".join(str(int(v)) for v in row) + "\n")


def write_labels_csv(path, cell_ids, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell_id,cluster\n")
        for cell_id, label in zip(cell_ids, labels):
            fh.write(f"{cell_id},{int(label)}\n")
