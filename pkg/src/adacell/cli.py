"""Command-line pipeline: preprocess, train, eval, diag, synth.

stdout carries one machine-readable JSON document per invocation; progress
lines and errors go to stderr. Any failure prints a single-line JSON object
``{"error": ...}`` and exits nonzero.

``--threads N`` caps BLAS/OpenMP parallelism. The cap only works if the
environment variables are set before numpy loads, so this module keeps its
top-level imports stdlib-only and scans raw argv before touching the rest
of the package.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import tomli

from . import __version__

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

PROGRESS_EVERY = 20  # epochs between stderr progress lines


class CliError(ValueError):
    pass


def _apply_thread_limit(argv) -> None:
    # manual scan: argparse would import too late for BLAS to notice
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        else:
            continue
        if value.isdigit() and int(value) >= 1:
            for var in THREAD_ENV_VARS:
                os.environ[var] = value
        return


# ---------------------------------------------------------------------------
# config file + flag merging

INT_KEYS = ("clusters", "k", "m", "k_order", "t1", "t2", "seed",
            "p_refresh_interval")
FLOAT_KEYS = ("lr_pre", "lr_formal", "lambda_graph", "lambda_zinb",
              "lambda_contrastive", "lambda_kl", "tau", "tau_c")
BOOL_KEYS = ("disable_contrastive", "disable_adaptive_graph")
ALL_KEYS = INT_KEYS + FLOAT_KEYS + BOOL_KEYS + ("widths",)


def _coerce(key: str, value):
    if key in INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(f"config key '{key}' expects an integer, got {value!r}")
        return value
    if key in FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if key in BOOL_KEYS:
        if not isinstance(value, bool):
            raise CliError(f"config key '{key}' expects a boolean, got {value!r}")
        return value
    # widths
    if isinstance(value, str):
        value = [part.strip() for part in value.split(",") if part.strip()]
        try:
            value = [int(part) for part in value]
        except ValueError:
            raise CliError(f"config key 'widths' expects integers, got {value!r}") from None
    if not isinstance(value, (list, tuple)) or not value or any(
        isinstance(v, bool) or not isinstance(v, int) for v in value
    ):
        raise CliError(f"config key 'widths' expects a list of integers, got {value!r}")
    return tuple(value)


def parse_config(path=None, overrides: dict | None = None):
    """Resolve a training config: defaults, then file, then flags.

    Later sources win. Unknown keys are rejected by name; range errors come
    from the config type itself and also name the offending key.
    """
    from . import train

    merged: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise CliError(f"no such config file: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise CliError(f"bad TOML in {path}: {exc}") from None
        merged.update(doc)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in merged:
        if key not in ALL_KEYS:
            raise CliError(f"unknown config key '{key}'")
    if "clusters" not in merged:
        raise CliError("missing required key 'clusters' (--clusters or config file)")
    kwargs = {key: _coerce(key, value) for key, value in merged.items()}
    return train.TrainConfig(**kwargs)


def _config_overrides(args) -> dict:
    """Pick the config-shaped flags out of a parsed train namespace."""
    pairs = {
        "clusters": args.clusters, "seed": args.seed, "k": args.k,
        "m": args.m, "k_order": args.k_order, "widths": args.widths,
        "t1": args.t1, "t2": args.t2, "lr_pre": args.lr_pre,
        "lr_formal": args.lr_formal, "lambda_graph": args.lambda_graph,
        "lambda_zinb": args.lambda_zinb,
        "lambda_contrastive": args.lambda_contrastive,
        "lambda_kl": args.lambda_kl, "tau": args.tau, "tau_c": args.tau_c,
        "p_refresh_interval": args.p_refresh_interval,
        "disable_contrastive": args.no_contrastive,
        "disable_adaptive_graph": args.static_graph,
    }
    return {k: v for k, v in pairs.items() if v is not None}


# ---------------------------------------------------------------------------
# commands

CACHE_ARRAYS = "preprocessed.bin"
CACHE_MANIFEST = "cache-manifest.json"


def cmd_preprocess(args) -> dict:
    from . import ingest, storage

    matrix = ingest.load_matrix(args.input, args.format)
    data = ingest.preprocess(matrix, args.hvg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage.save_arrays(
        out / CACHE_ARRAYS,
        {
            "x_log": data.x_log,
            "x_raw": data.x_raw,
            "size_factors": data.size_factors,
            "hvg_indices": data.hvg_indices,
        },
        meta={"gene_ids": data.gene_ids, "cell_ids": data.cell_ids},
    )
    storage.write_json(
        out / CACHE_MANIFEST,
        {
            "source": str(args.input),
            "source_digest": storage.file_digest(args.input),
            "format": args.format,
            "hvg_requested": args.hvg,
            "n_cells": int(data.x_log.shape[0]),
            "n_features": int(data.x_log.shape[1]),
            "cache_digest": storage.file_digest(out / CACHE_ARRAYS),
        },
    )
    return {
        "command": "preprocess",
        "n_cells": int(data.x_log.shape[0]),
        "n_features": int(data.x_log.shape[1]),
        "out": str(out),
    }


def _load_cache(cache_dir):
    from . import ingest, storage

    cache_dir = Path(cache_dir)
    bin_path = cache_dir / CACHE_ARRAYS
    if not bin_path.exists():
        raise CliError(f"no preprocessed cache at {cache_dir} (run preprocess first)")
    arrays, meta = storage.load_arrays(bin_path)
    data = ingest.PreprocessedData(
        x_log=arrays["x_log"],
        x_raw=arrays["x_raw"],
        size_factors=arrays["size_factors"],
        hvg_indices=arrays["hvg_indices"].astype(int),
        gene_ids=meta.get("gene_ids"),
        cell_ids=meta.get("cell_ids"),
    )
    manifest = storage.read_json(cache_dir / CACHE_MANIFEST)
    return data, manifest


def cmd_train(args) -> dict:
    from . import cellgraph, metrics, storage, synth, train

    data, cache_manifest = _load_cache(args.cache)
    cfg = parse_config(args.config, _config_overrides(args))
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)

    resolved = cfg.to_dict()
    manifest = {
        "tool": "adacell",
        "version": __version__,
        "seed": cfg.seed,
        "config": resolved,
        "config_hash": storage.config_hash(resolved),
        "inputs": {
            "cache": str(args.cache),
            "cache_digest": storage.file_digest(Path(args.cache) / CACHE_ARRAYS),
            "n_cells": int(data.x_log.shape[0]),
            "n_features": int(data.x_log.shape[1]),
        },
        "outputs": {
            "checkpoint": "checkpoint.bin",
            "labels": "labels.csv",
            "trace": "trace.jsonl",
            "degree_report": "degree-report.json",
        },
    }
    # the manifest must exist before training so an aborted run stays auditable
    storage.write_json(run_dir / "manifest.json", manifest)

    print(
        f"train: {data.x_log.shape[0]} cells, {data.x_log.shape[1]} features, "
        f"{cfg.clusters} clusters, t1={cfg.t1} t2={cfg.t2} seed={cfg.seed}",
        file=sys.stderr,
    )

    class StreamingTrace(train.TrainingTrace):
        def append(self, **fields):
            super().append(**fields)
            if fields["epoch"] % PROGRESS_EVERY == 0:
                print(
                    f"  {fields['phase']} epoch {fields['epoch']}: "
                    f"loss={fields['loss_total']:.4f}",
                    file=sys.stderr,
                )

    result = train.run_training(
        data, cfg, checkpoint_dir=str(run_dir), trace=StreamingTrace()
    )

    train.write_checkpoint(
        run_dir / "checkpoint.bin", result.params, cfg,
        phase="cluster", epoch=cfg.t2, centers=result.cluster.centers,
    )
    cell_ids = data.cell_ids or [f"cell{i:05d}" for i in range(len(result.cluster.labels))]
    synth.write_labels_csv(run_dir / "labels.csv", cell_ids, result.cluster.labels)
    result.trace.write_jsonl(run_dir / "trace.jsonl")

    before = cellgraph.degree_stats(result.initial_graph)
    after = cellgraph.degree_stats(result.final_graph.hard)
    storage.write_json(
        run_dir / "degree-report.json",
        {
            "before": before.as_dict(),
            "after": after.as_dict(),
            "comparison": metrics.compare_degree_distributions(before, after),
        },
    )
    last = result.trace.records[-1] if result.trace.records else {}
    return {
        "command": "train",
        "run": str(run_dir),
        "epochs": cfg.t1 + cfg.t2,
        "final_loss": last.get("loss_total"),
        "n_clusters": cfg.clusters,
        "config_hash": manifest["config_hash"],
    }


def cmd_eval(args) -> dict:
    from . import ingest, metrics

    pred = ingest.load_labels(args.labels)
    truth = ingest.load_labels(args.truth)
    if set(pred) != set(truth):
        only_pred = sorted(set(pred) - set(truth))
        only_truth = sorted(set(truth) - set(pred))
        raise CliError(
            "label files cover different cells "
            f"(e.g. {(only_pred or only_truth)[0]!r} is in one file only)"
        )
    order = sorted(pred)
    report = metrics.metrics_report(
        [pred[c] for c in order], [truth[c] for c in order]
    )
    report["command"] = "eval"
    return report


def cmd_diag(args) -> dict:
    from . import storage

    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"no run manifest at {manifest_path}")
    manifest = storage.read_json(manifest_path)
    checkpoint = run_dir / manifest["outputs"]["checkpoint"]
    report = {"command": "diag", "run": str(run_dir), "config_hash": manifest["config_hash"]}
    if checkpoint.exists():
        _, meta = storage.load_arrays(checkpoint)
        if meta.get("config_hash") != manifest["config_hash"]:
            raise CliError(
                f"config hash mismatch: manifest {manifest['config_hash'][:12]} "
                f"vs checkpoint {str(meta.get('config_hash'))[:12]}"
            )
        report["checkpoint"] = {"phase": meta.get("phase"), "epoch": meta.get("epoch")}
    degree_path = run_dir / manifest["outputs"]["degree_report"]
    if degree_path.exists():
        degree = storage.read_json(degree_path)
        report["degree"] = {
            "before": {k: v for k, v in degree["before"].items() if k != "degrees"},
            "after": {k: v for k, v in degree["after"].items() if k != "degrees"},
            "comparison": degree["comparison"],
        }
    return report


SYNTH_ZINB_KEYS = ("n_cells", "n_genes", "n_clusters", "theta_gen", "pi_gen",
                   "imbalance", "seed")
SYNTH_LONGTAIL_KEYS = ("n_cells", "n_genes", "seed")


def cmd_synth(args) -> dict:
    from . import storage, synth
    from .autodiff import RngState

    try:
        with open(args.spec, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise CliError(f"no such spec file: {args.spec}") from None
    except tomli.TOMLDecodeError as exc:
        raise CliError(f"bad TOML in {args.spec}: {exc}") from None
    kind = doc.pop("kind", "zinb")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if kind == "zinb":
        for key in doc:
            if key not in SYNTH_ZINB_KEYS:
                raise CliError(f"unknown synth key '{key}'")
        spec = synth.SynthSpec(**doc)
        matrix, labels = synth.generate_zinb_mixture(spec, RngState(spec.seed))
        resolved: dict = {"kind": "zinb", **{k: getattr(spec, k) for k in SYNTH_ZINB_KEYS}}
    elif kind == "longtail":
        for key in doc:
            if key not in SYNTH_LONGTAIL_KEYS:
                raise CliError(f"unknown synth key '{key}'")
        n_cells = doc.get("n_cells", 200)
        n_genes = doc.get("n_genes", 120)
        seed = doc.get("seed", 0)
        for key, value in (("n_cells", n_cells), ("n_genes", n_genes), ("seed", seed)):
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise CliError(f"synth key '{key}' expects a nonnegative integer, got {value!r}")
        rng = RngState(seed)
        points = synth.generate_longtail_points(n_cells, rng.child("points"))
        matrix = synth.lift_points_to_counts(points, n_genes, rng.child("lift"))
        n_blob = int(round(synth.BLOB_FRACTION * n_cells))
        labels = [0] * n_blob + [1] * (n_cells - n_blob)  # 0 = blob, 1 = background
        with open(out / "points.csv", "w", encoding="utf-8") as fh:
            fh.write("cell_id,x,y\n")
            for cell_id, (px, py) in zip(matrix.cell_ids, points):
                fh.write(f"{cell_id},{float(px)!r},{float(py)!r}\n")
        resolved = {"kind": "longtail", "n_cells": n_cells, "n_genes": n_genes, "seed": seed}
    else:
        raise CliError(f"unknown synth kind {kind!r}; use 'zinb' or 'longtail'")

    synth.write_dense_csv(out / "counts.csv", matrix)
    synth.write_labels_csv(out / "labels.csv", matrix.cell_ids, labels)
    storage.write_json(
        out / "synth-manifest.json",
        {
            "spec": resolved,
            "counts_digest": storage.file_digest(out / "counts.csv"),
            "labels_digest": storage.file_digest(out / "labels.csv"),
        },
    )
    return {
        "command": "synth",
        "kind": kind,
        "out": str(out),
        "n_cells": int(matrix.counts.shape[0]),
        "n_genes": int(matrix.counts.shape[1]),
    }


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads (1 = bit-reproducible)")

    parser = argparse.ArgumentParser(
        prog="adacell",
        description="Cluster single-cell count matrices over an adaptive cell graph.",
    )
    parser.add_argument("--version", action="version", version=f"adacell {__version__}")
    parser.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared],
                       help="load counts, normalize, select variable genes")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="dense-csv",
                   choices=["dense-csv", "matrix-market"])
    p.add_argument("--hvg", type=int, default=1500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[shared],
                       help="fit the model and write cluster labels")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TOML file of config keys")
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--k-order", dest="k_order", type=int, default=None)
    p.add_argument("--widths", default=None, help="comma-separated layer widths")
    p.add_argument("--t1", type=int, default=None)
    p.add_argument("--t2", type=int, default=None)
    p.add_argument("--lr-pre", dest="lr_pre", type=float, default=None)
    p.add_argument("--lr-formal", dest="lr_formal", type=float, default=None)
    p.add_argument("--lambda-graph", dest="lambda_graph", type=float, default=None)
    p.add_argument("--lambda-zinb", dest="lambda_zinb", type=float, default=None)
    p.add_argument("--lambda-contrastive", dest="lambda_contrastive",
                   type=float, default=None)
    p.add_argument("--lambda-kl", dest="lambda_kl", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tau-c", dest="tau_c", type=float, default=None)
    p.add_argument("--p-refresh-interval", dest="p_refresh_interval",
                   type=int, default=None)
    p.add_argument("--no-contrastive", dest="no_contrastive",
                   action="store_const", const=True, default=None)
    p.add_argument("--static-graph", dest="static_graph",
                   action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared],
                       help="score predicted labels against ground truth")
    p.add_argument("--labels", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diag", parents=[shared],
                       help="summarize a finished run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("synth", parents=[shared],
                       help="generate a synthetic benchmark dataset")
    p.add_argument("--spec", required=True, help="TOML generator spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _apply_thread_limit(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not crashes
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
