"""Count-matrix loading and preprocessing.

The pipeline keeps two views of the data: log-normalized expression of the
highly variable genes drives the encoder and the graph, while the raw counts
of the same genes are what the count-likelihood head reconstructs. Library
sizes are scaled to the median so size factors have median one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse

DISPERSION_BINS = 20


class IngestError(ValueError):
    """Malformed input file or contract violation in the count data."""


@dataclass
class CountMatrix:
    counts: np.ndarray  # N x G nonnegative integers
    gene_ids: list
    cell_ids: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        n, g = self.counts.shape
        if len(self.cell_ids) != n or len(self.gene_ids) != g:
            raise IngestError(
                f"identifier lists ({len(self.cell_ids)} cells, {len(self.gene_ids)} genes) "
                f"do not match matrix shape {self.counts.shape}"
            )
        if (self.counts < 0).any():
            raise IngestError("negative count entry")
        if len(set(self.gene_ids)) != g:
            raise IngestError("gene identifiers are not unique")

    @property
    def n_cells(self):
        return self.counts.shape[0]

    @property
    def n_genes(self):
        return self.counts.shape[1]


@dataclass
class PreprocessedData:
    x_log: np.ndarray  # N x M log-normalized HVG features
    x_raw: np.ndarray  # N x M raw counts restricted to HVGs
    size_factors: np.ndarray  # N positive reals, median 1
    hvg_indices: np.ndarray  # M indices into the filtered gene list
    gene_ids: list | None = None
    cell_ids: list | None = None


def _parse_count(token: str, where: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise IngestError(f"non-numeric entry {token!r} at {where}") from None
    if value < 0:
        raise IngestError(f"negative count {token!r} at {where}")
    if value != int(value):
        raise IngestError(f"non-integer count {token!r} at {where}")
    return int(value)


def _load_dense_csv(path: Path) -> CountMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise IngestError(f"{path}: need a header row and at least one cell row")
    header = rows[0]
    width = len(rows[1])
    if len(header) == width:
        gene_ids = header[1:]  # corner label above the cell-id column
    elif len(header) == width - 1:
        gene_ids = header
    else:
        raise IngestError(
            f"{path}: header has {len(header)} fields but rows have {width}"
        )
    cell_ids, counts = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise IngestError(f"{path}: row {r} has {len(row)} fields, expected {width}")
        cell_ids.append(row[0])
        counts.append(
            [_parse_count(tok, f"{path} row {r} col {c + 2}") for c, tok in enumerate(row[1:])]
        )
    return CountMatrix(np.array(counts, dtype=np.int64), gene_ids, cell_ids)


def _load_matrix_market(path: Path) -> CountMatrix:
    try:
        mat = scipy.io.mmread(path)
    except Exception as exc:
        raise IngestError(f"{path}: {exc}") from exc
    counts = np.asarray(mat.todense() if scipy.sparse.issparse(mat) else mat)
    if (counts < 0).any():
        raise IngestError(f"{path}: negative count entry")
    if not np.equal(np.mod(counts, 1), 0).all():
        raise IngestError(f"{path}: non-integer count entry")
    folder = path.parent
    gene_ids = _read_id_file(folder / "genes.txt")
    cell_ids = _read_id_file(folder / "barcodes.txt")
    if len(cell_ids) != counts.shape[0] or len(gene_ids) != counts.shape[1]:
        raise IngestError(
            f"{path}: matrix is {counts.shape} but sidecars list "
            f"{len(cell_ids)} barcodes and {len(gene_ids)} genes"
        )
    return CountMatrix(counts.astype(np.int64), gene_ids, cell_ids)


def _read_id_file(path: Path) -> list:
    if not path.exists():
        raise IngestError(f"missing sidecar file {path}")
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def load_matrix(path, fmt: str) -> CountMatrix:
    """Read a counts file; `fmt` is 'dense-csv' or 'matrix-market'."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    if fmt == "dense-csv":
        return _load_dense_csv(path)
    if fmt == "matrix-market":
        return _load_matrix_market(path)
    raise IngestError(f"unknown format {fmt!r}; use 'dense-csv' or 'matrix-market'")


def load_labels(path) -> dict:
    """Two-column CSV cell_id,label -> mapping. A header row is optional."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise IngestError(f"{path}: row {r} has {len(row)} fields, expected 2")
            if r == 1 and row[0].lower() in ("cell_id", "cell", "barcode"):
                continue
            out[row[0]] = row[1]
    return out


def filter_zero_genes(m: CountMatrix) -> CountMatrix:
    keep = m.counts.sum(axis=0) > 0
    if not keep.any():
        raise IngestError("all genes have zero expression")
    return CountMatrix(
        m.counts[:, keep],
        [g for g, k in zip(m.gene_ids, keep) if k],
        m.cell_ids,
    )


def normalize_log(m: CountMatrix):
    """Median-library-size scaling then log1p.

    Returns (x_log, size_factors); size_factors[i] = total_i / median(total).
    """
    totals = m.counts.sum(axis=1).astype(np.float64)
    if (totals == 0).any():
        dead = m.cell_ids[int(np.argmax(totals == 0))]
        raise IngestError(f"cell {dead!r} has zero total count")
    median_total = float(np.median(totals))
    size_factors = totals / median_total
    x_log = np.log1p(m.counts * (median_total / totals)[:, None])
    return x_log, size_factors


def select_hvg(x_log: np.ndarray, m: int, n_bins: int = DISPERSION_BINS) -> np.ndarray:
    """Top-m genes by binned normalized dispersion of the log expression.

    Genes are grouped into equal-frequency bins by mean; var/mean dispersion
    is z-scored within each bin. Constant genes rank below every non-constant
    gene. Ties break toward the smaller gene index.
    """
    n_genes = x_log.shape[1]
    if m <= 0:
        raise IngestError(f"m must be positive, got {m}")
    m = min(m, n_genes)  # asking for more genes than exist keeps them all
    means = x_log.mean(axis=0)
    variances = x_log.var(axis=0)
    dispersion = variances / np.maximum(means, 1e-12)
    z = np.empty(n_genes)
    order_by_mean = np.argsort(means, kind="stable")
    # keep at least 3 genes per bin: a 2-gene bin z-scores to exactly +/-1
    # whatever the data, which turns cross-bin ranking into an index lottery
    for chunk in np.array_split(order_by_mean, min(n_bins, max(1, n_genes // 3))):
        d = dispersion[chunk]
        sd = d.std()
        z[chunk] = (d - d.mean()) / sd if sd > 0 else 0.0
    z[variances == 0] = -np.inf  # a flat gene must not outrank varying ones
    ranked = np.lexsort((np.arange(n_genes), -z))
    return np.sort(ranked[:m])


def preprocess(m: CountMatrix, n_hvg: int) -> PreprocessedData:
    """Filter dead genes, log-normalize, keep the top highly variable genes."""
    filtered = filter_zero_genes(m)
    x_log, size_factors = normalize_log(filtered)
    hvg = select_hvg(x_log, n_hvg)
    return PreprocessedData(
        x_log=x_log[:, hvg],
        x_raw=filtered.counts[:, hvg],
        size_factors=size_factors,
        hvg_indices=hvg,
        gene_ids=[filtered.gene_ids[i] for i in hvg],
        cell_ids=list(filtered.cell_ids),
    )
