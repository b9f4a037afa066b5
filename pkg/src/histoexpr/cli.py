"""Command-line pipeline driver: synth, preprocess, train, index, impute,
eval, ablate.

Exit codes: 0 ok, 2 usage, 3 io/format, 4 validation, 5 numerical.  Seeds
are mandatory wherever randomness exists.  Artifacts are byte-identical
across reruns unless --stamp embeds a creation time in container headers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import metrics, preprocess, refindex, synthgen
from .contrastive import OBJECTIVES, SMOOTHED
from .data import GeneSet, PairedDataset, gene_set_from_names, load_dataset, save_dataset
from .errors import HistoexprError, UsageError, ValidationError
from .io import (
    build_manifest,
    load_manifest,
    read_matrix,
    read_text_list,
    save_manifest,
    write_bmat,
    write_text_list,
)
from .linalg import F32, F64
from .model import EncoderSpec, TrainConfig, load_checkpoint, save_checkpoint, train

DEFAULT_ABLATION_GRID = [
    {"objective": "smoothed", "k": 10, "aggregation": "average"},
    {"objective": "smoothed", "k": 100, "aggregation": "average"},
    {"objective": "smoothed", "k": 1, "aggregation": "simple"},
    {"objective": "smoothed", "k": 50, "aggregation": "weighted"},
    {"objective": "one_hot", "k": 50, "aggregation": "average"},
    {"objective": "smoothed", "k": 50, "aggregation": "average"},
]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_split(manifest_path: str, split: str | None, require_normalized: bool):
    """Load a dataset, descending into the named split when present."""
    manifest = load_manifest(manifest_path)
    if split is not None and split in manifest.splits:
        manifest = load_manifest(manifest.split_manifest(split))
    if require_normalized and not manifest.provenance.get("normalized", False):
        raise ValidationError(
            f"{manifest_path}: expects normalized data; run preprocess first"
        )
    return load_dataset(manifest), manifest


def _resolve_sets(tokens: str, dataset: PairedDataset) -> list[GeneSet]:
    """Parse --sets: 'heg[:n]' / 'hvg[:n]' computed here, else name files."""
    sets: list[GeneSet] = []
    for token in tokens.split(","):
        token = token.strip()
        if not token:
            continue
        lowered = token.lower()
        name, _, count = lowered.partition(":")
        if name in ("heg", "hvg"):
            n = int(count) if count else 50
            if name == "heg":
                sets.append(preprocess.select_heg(dataset.expression, n))
            else:
                pre_log = np.expm1(dataset.expression.astype(F64)).astype(F32)
                sets.append(preprocess.select_hvg(pre_log, n))
            continue
        names = read_text_list(token)
        stem = Path(token).stem.upper()
        label = stem if stem in ("MG", "HEG", "HVG") else "custom"
        sets.append(gene_set_from_names(label, names, dataset.gene_names))
    if not sets:
        raise UsageError("--sets resolved to no gene sets")
    return sets


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    if "seed" not in doc:
        raise UsageError("synth config has no 'seed'; pass --seed")
    cfg = synthgen.SynthConfig.from_dict(doc)
    dataset, truth = synthgen.generate(cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"source": "synth", "config": cfg.to_dict(), "normalized": False}
    if args.stamp:
        provenance["created"] = _now()

    splits = {}
    if args.holdout:
        if not 0 < args.holdout < cfg.n_spots:
            raise ValidationError(
                f"--holdout {args.holdout} outside (0, {cfg.n_spots})"
            )
        split_rng = np.random.default_rng((cfg.seed, 1))
        perm = split_rng.permutation(cfg.n_spots)
        query_rows = np.sort(perm[: args.holdout])
        ref_rows = np.sort(perm[args.holdout :])
        for label, rows in (("reference", ref_rows), ("query", query_rows)):
            sub_prov = dict(provenance)
            sub_prov["split"] = label
            save_dataset(dataset.take(rows), out / label, provenance=sub_prov)
            splits[label] = f"{label}/manifest.json"

    write_bmat(out / "truth_z.bmat", truth.z.reshape(-1, 1))
    write_bmat(out / "truth_clean.bmat", truth.clean)
    write_bmat(out / "truth_loadings.bmat", truth.loadings.reshape(-1, 1))
    write_bmat(out / "truth_baselines.bmat", truth.baselines.reshape(-1, 1))
    write_text_list(
        out / "zonated_genes.txt",
        [dataset.gene_names[i] for i in truth.zonated.indices],
    )
    manifest_path = save_dataset(dataset, out, provenance=provenance, splits=splits)
    manifest = load_manifest(manifest_path, verify=False)
    files = {role: entry.path for role, entry in manifest.files.items()}
    files.update(
        truth_z="truth_z.bmat",
        truth_clean="truth_clean.bmat",
        truth_loadings="truth_loadings.bmat",
        truth_baselines="truth_baselines.bmat",
        zonated_genes="zonated_genes.txt",
    )
    save_manifest(
        manifest_path, build_manifest(out, files, provenance=provenance, splits=splits)
    )
    print(f"synth wrote {dataset.n_spots} spots x {dataset.n_genes} genes to {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# preprocess


def _preprocessed(dataset: PairedDataset, target_sum: float, keep: list[int] | None):
    normalized = preprocess.normalize(dataset.expression, target_sum, dataset.spot_ids)
    if keep is not None:
        normalized = normalized[:, keep]
        gene_names = [dataset.gene_names[i] for i in keep]
    else:
        gene_names = list(dataset.gene_names)
    return PairedDataset(
        features=dataset.features,
        expression=normalized,
        gene_names=gene_names,
        spot_ids=list(dataset.spot_ids),
        coords=dataset.coords,
    )


def _cmd_preprocess(args) -> int:
    manifest = load_manifest(args.inp)
    dataset = load_dataset(manifest)
    if manifest.provenance.get("normalized", False):
        raise ValidationError(f"{args.inp}: data is already normalized")

    # Gene selection runs on the reference split when one exists, so the
    # held-out query never influences the gene universe.
    if "reference" in manifest.splits:
        selection_data = load_dataset(load_manifest(manifest.split_manifest("reference")))
    else:
        selection_data = dataset

    keep = None
    hvg_names: list[str] = []
    if args.hvg > 0:
        scaled = preprocess.scale_to_total(
            selection_data.expression, args.target_sum, selection_data.spot_ids
        )
        hvg = preprocess.select_hvg(scaled, args.hvg)
        hvg_names = [selection_data.gene_names[i] for i in hvg.indices]
        keep = sorted(hvg.indices)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {
        "source": "preprocess",
        "normalized": True,
        "target_sum": args.target_sum,
        "hvg": args.hvg,
        # relative to the output tree, so artifacts don't depend on where
        # the workspace happens to be mounted
        "input_manifest": os.path.relpath(args.inp, out),
    }

    splits = {}
    for label in manifest.splits:
        sub = load_dataset(load_manifest(manifest.split_manifest(label)))
        sub_prov = dict(provenance)
        sub_prov["split"] = label
        save_dataset(_preprocessed(sub, args.target_sum, keep), out / label, provenance=sub_prov)
        splits[label] = f"{label}/manifest.json"

    processed = _preprocessed(dataset, args.target_sum, keep)
    heg = preprocess.select_heg(processed.expression, min(50, processed.n_genes))

    manifest_path = save_dataset(processed, out, provenance=provenance, splits=splits)
    files = {
        role: entry.path
        for role, entry in load_manifest(manifest_path, verify=False).files.items()
    }
    if hvg_names:
        write_text_list(out / "hvg_genes.txt", hvg_names)
        files["hvg_genes"] = "hvg_genes.txt"
    write_text_list(out / "heg_genes.txt", [processed.gene_names[i] for i in heg.indices])
    files["heg_genes"] = "heg_genes.txt"
    save_manifest(
        manifest_path, build_manifest(out, files, provenance=provenance, splits=splits)
    )
    print(
        f"preprocess wrote {processed.n_spots} spots x {processed.n_genes} genes "
        f"to {manifest_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# train / index / impute


def _train_config_from_args(args, seed: int) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        epochs=args.epochs,
        temperature=args.tau,
        objective=args.objective,
    )


def _specs_from_args(args, dataset: PairedDataset):
    hidden = tuple(int(d) for d in args.hidden.split(",") if d.strip())
    image_spec = EncoderSpec(
        input_dim=dataset.features.shape[1], hidden_dims=hidden, output_dim=args.h_dim
    )
    expr_spec = EncoderSpec(
        input_dim=dataset.n_genes, hidden_dims=hidden, output_dim=args.h_dim
    )
    return image_spec, expr_spec


def _cmd_train(args) -> int:
    dataset, _ = _load_split(args.data, "reference", require_normalized=True)
    cfg = _train_config_from_args(args, args.seed)
    image_spec, expr_spec = _specs_from_args(args, dataset)
    ckpt = train(dataset, cfg, image_spec=image_spec, expr_spec=expr_spec, workers=args.workers)
    for warning in ckpt.warnings:
        _info(f"warning: {warning}")
    content_hash = save_checkpoint(args.out, ckpt, created=_now() if args.stamp else None)
    _info(
        f"train: epochs {cfg.epochs}, loss {ckpt.loss_trace[0]:.4f} -> "
        f"{ckpt.loss_trace[-1]:.4f}"
    )
    print(f"checkpoint_hash {content_hash}")
    return 0


def _cmd_index(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    reference, _ = _load_split(args.reference, "reference", require_normalized=True)
    index = refindex.build_index(ckpt, reference, key=args.key, workers=args.workers)
    content_hash = refindex.save_index(args.out, index, created=_now() if args.stamp else None)
    print(f"index_hash {content_hash}")
    return 0


def _cmd_impute(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    index = refindex.load_index(args.index)
    queries, _ = _load_split(args.queries, "query", require_normalized=False)
    cfg = refindex.ImputationConfig(k=args.k, aggregation=args.agg)
    pred = refindex.impute(index, ckpt, queries.features, cfg, workers=args.workers)
    write_bmat(args.out, pred)
    sidecar = {
        "kind": "imputation",
        "checkpoint_hash": ckpt.content_hash,
        "index": os.path.relpath(args.index, Path(args.out).parent),
        "k": args.k,
        "aggregation": args.agg,
        "n_queries": int(pred.shape[0]),
        "n_genes": int(pred.shape[1]),
        "gene_names": index.gene_names,
    }
    with open(f"{args.out}.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"impute wrote {pred.shape[0]} x {pred.shape[1]} predictions to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval / ablate


def _cmd_eval(args) -> int:
    truth_data, _ = _load_split(args.truth, "query", require_normalized=False)
    pred = read_matrix(args.pred)
    if pred.shape != truth_data.expression.shape:
        raise ValidationError(
            f"prediction shape {pred.shape} does not match truth "
            f"{truth_data.expression.shape}"
        )
    sets = _resolve_sets(args.sets, truth_data)
    report = metrics.build_report(
        pred,
        truth_data.expression,
        truth_data.gene_names,
        sets,
        clusters=args.clusters,
        seed=args.seed,
    )
    written = metrics.write_report(report, args.out)
    for label, avg in sorted(report.set_averages.items()):
        print(
            f"set {label}: mean_r {avg.value:.4f} "
            f"({avg.n_valid} genes, {avg.n_excluded} excluded)"
        )
    print(f"clustering: ari {report.ari:.4f} nmi {report.nmi:.4f} k {report.n_clusters}")
    print(f"eval wrote {len(written)} files to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    if "reference" not in manifest.splits or "query" not in manifest.splits:
        raise ValidationError(
            f"{args.data}: ablate needs 'reference' and 'query' splits"
        )
    reference, _ = _load_split(args.data, "reference", require_normalized=True)
    queries, _ = _load_split(args.data, "query", require_normalized=False)

    grid = DEFAULT_ABLATION_GRID
    train_overrides: dict = {}
    sets_token = args.sets
    if args.grid:
        with open(args.grid, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        grid = doc.get("rows", grid)
        train_overrides = doc.get("train", {})
        sets_token = doc.get("sets", sets_token)
    sets = _resolve_sets(sets_token, queries)
    set_labels: list[str] = []
    for gs in sets:
        label, suffix = gs.label, 2
        while label in set_labels:
            label = f"{gs.label}_{suffix}"
            suffix += 1
        set_labels.append(label)

    base = {
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "temperature": args.tau,
    }
    base.update(train_overrides)

    results: dict[int, dict[str, list[float]]] = {
        i: {label: [] for label in set_labels} for i in range(len(grid))
    }
    for rep in range(args.replicates):
        seed = args.seed + rep
        ckpt_cache: dict[str, tuple] = {}
        for objective in sorted({str(row["objective"]) for row in grid}):
            cfg = TrainConfig(seed=seed, objective=objective, **base)
            _info(f"ablate: rep {rep + 1}, training objective={objective}")
            ckpt = train(reference, cfg, workers=args.workers)
            index = refindex.build_index(ckpt, reference, workers=args.workers)
            ckpt_cache[objective] = (ckpt, index)
        for i, row in enumerate(grid):
            ckpt, index = ckpt_cache[str(row["objective"])]
            icfg = refindex.ImputationConfig(
                k=int(row["k"]), aggregation=str(row["aggregation"])
            )
            pred = refindex.impute(index, ckpt, queries.features, icfg, workers=args.workers)
            per_gene = metrics.pearson_per_gene(pred, queries.expression)
            for label, gs in zip(set_labels, sets):
                results[i][label].append(metrics.set_average(per_gene, gs).value)

    lines = []
    header = ["objective", "k", "aggregation"]
    for label in set_labels:
        header += [f"{label}_mean_r", f"{label}_max_dev"]
    lines.append(",".join(header))
    for i, row in enumerate(grid):
        cells = [str(row["objective"]), str(row["k"]), str(row["aggregation"])]
        for label in set_labels:
            values = np.asarray(results[i][label])
            mean = values.mean()
            cells += [f"{mean:.6g}", f"{np.abs(values - mean).max():.6g}"]
        lines.append(",".join(cells))
    table = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histoexpr",
        description="Joint image/expression embedding and k-NN expression imputation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--config", required=True, help="JSON SynthConfig")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--holdout", type=int, default=0, help="spots held out as query split")
    p.add_argument("--stamp", action="store_true", help="embed creation time")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="normalize counts and select genes")
    p.add_argument("--in", dest="inp", required=True, help="input manifest")
    p.add_argument("--hvg", type=int, default=1000, help="0 disables HVG filtering")
    p.add_argument("--target-sum", type=float, default=1e4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train the two-tower contrastive model")
    p.add_argument("--data", required=True, help="preprocessed manifest")
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--objective", choices=OBJECTIVES, default=SMOOTHED)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--hidden", default="512", help="comma-separated hidden widths")
    p.add_argument("--h-dim", type=int, default=256, help="shared embedding dim")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stamp", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint path (.blpc)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("index", help="embed a reference set into a search index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", required=True, help="preprocessed manifest")
    p.add_argument("--key", choices=refindex.INDEX_KEYS, default=refindex.IMAGE_KEY)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stamp", action="store_true")
    p.add_argument("--out", required=True, help="index path (.blix)")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("impute", help="predict expression for query patches")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="manifest with query features")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--agg", choices=refindex.AGGREGATIONS, default=refindex.AVERAGE)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="prediction path (.bmat)")
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("eval", help="score predictions against held-out truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True, help="manifest with observed expression")
    p.add_argument("--sets", default="hvg:50,heg:50", help="comma list: heg[:n], hvg[:n], or name files")
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="objective/k/aggregation grid with replicates")
    p.add_argument("--data", required=True, help="manifest with reference+query splits")
    p.add_argument("--grid", default=None, help="JSON: rows, train overrides, sets")
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sets", default="hvg:50,heg:50")
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="results CSV")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except HistoexprError as exc:
        message = " ".join(str(exc).split())
        print(f"histoexpr: error [{type(exc).__name__}] {message}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"histoexpr: error [io] {exc}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as exc:
        print(f"histoexpr: error [format] {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
