"""Command-line pipeline gluing the package together: synthetic data,
graph construction, training, cross-validation, scoring, and the
downstream survival / explanation / overlay exports.

Every command writes a manifest.json into its output directory recording
the command, the resolved configuration, the seed, sha256 hashes of the
input files, the tool version, and a timestamp. Given the same inputs,
configuration, and seed, every output file except the manifest (whose
timestamp moves) is byte-identical across runs.

Exit codes: 0 success, 1 usage error, 2 bad data, 3 numerical failure.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    ingest,
    export_dataset,
    read_bag_table,
    zscore_apply,
    zscore_fit,
)
from .errors import DataError, NumericalError
from .explain import (
    LAMBDA_ENT,
    LAMBDA_SIZE,
    MASK_STEPS,
    aggregate_importance,
    importance_report,
    learn_feature_mask,
)
from .graph import DEFAULT_RADIUS_UM, build_radius_graph, degree_stats
from .metrics import EvalRecord, auroc, average_precision, operating_point
from .model import forward, load_checkpoint, save_checkpoint
from .overlay import (
    geojson_overlay,
    mesogram_report,
    read_bag_scores,
    read_cell_scores,
    write_bag_scores,
    write_cell_scores,
    write_geojson,
)
from .survival import (
    GROUP_HIGH,
    censor_at,
    cox_ph,
    cox_report,
    kaplan_meier,
    km_table,
    log_rank,
    records_from_bags,
)
from .synth import SynthConfig, generate
from .training import (
    POSITIVE_SUBTYPES,
    TrainConfig,
    _split_patients,
    cross_validate,
    load_train_state,
    save_train_state,
    train,
)

log = logging.getLogger("mesograph.cli")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this pipeline
    reserves 2 for bad data, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _ensure_out(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out_dir, command, config, seed, input_paths) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in input_paths},
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    with open(Path(out_dir) / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _config_from_json(cls, path):
    """Build a dataclass config from a JSON object file; JSON arrays
    become tuples so they match the dataclass defaults."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable config {path}: {e}") from None
    if not isinstance(raw, dict):
        raise DataError(f"config {path} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise DataError(f"config {path}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise DataError(f"config {path}: {e}") from None


def _load_config(cls, path, seed):
    cfg = _config_from_json(cls, path) if path else cls()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def _ingest_dir(data_dir):
    """A data directory holds the cells.csv / bags.csv pair synth writes."""
    d = Path(data_dir)
    cells, bags = d / "cells.csv", d / "bags.csv"
    for p in (cells, bags):
        if not p.is_file():
            raise DataError(f"data directory {data_dir} lacks {p.name}")
    return ingest(cells, bags), [cells, bags]


def _pool_map(fn, items, threads):
    """Order-preserving parallel map; results merge in input order, so
    the thread count never changes any output."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _check_radius(radius):
    if radius <= 0:
        raise DataError(f"radius must be positive, got {radius}")
    return float(radius)


def _prepared_graphs(ds, params, stats, radius, threads):
    if ds.d0 != params.d0:
        raise DataError(
            f"model expects {params.d0} features per cell, data has {ds.d0}"
        )
    if stats is not None:
        ds = zscore_apply(ds, stats)
    graphs = _pool_map(
        lambda bc: build_radius_graph(bc[1], radius, bc[0]), ds.bags, threads
    )
    return ds, graphs


def _json_num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def cmd_synth(args) -> int:
    cfg = _load_config(SynthConfig, args.config, args.seed)
    ds = generate(cfg)
    out = _ensure_out(args.out)
    export_dataset(ds, out / "cells.csv", out / "bags.csv")
    n_cells = sum(len(cells) for _, cells in ds.bags)
    inputs = [args.config] if args.config else []
    _write_manifest(out, "synth", dataclasses.asdict(cfg), cfg.seed, inputs)
    print(f"wrote {len(ds.bags)} bags / {n_cells} cells to {out}")
    return 0


def cmd_build_graph(args) -> int:
    radius = _check_radius(args.radius)
    ds = ingest(args.cells, args.bags)
    graphs = _pool_map(
        lambda bc: build_radius_graph(bc[1], radius, bc[0]), ds.bags, args.threads
    )
    out = _ensure_out(args.out)
    with open(out / "graph_summary.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bag_id", "n_cells", "n_edges", "deg_min", "deg_mean", "deg_max"])
        for g in graphs:
            dmin, dmean, dmax = degree_stats(g)
            w.writerow([g.bag_ref.bag_id, g.n, len(g.edges), dmin, repr(dmean), dmax])
    _write_manifest(
        out, "build-graph", {"radius_um": radius}, None, [args.cells, args.bags]
    )
    total_edges = sum(len(g.edges) for g in graphs)
    print(f"built {len(graphs)} graphs, {total_edges} edges total")
    return 0


def cmd_train(args) -> int:
    radius = _check_radius(args.radius)
    config = _load_config(TrainConfig, args.config, args.seed)
    ds, inputs = _ingest_dir(args.data)
    out = _ensure_out(args.out)
    state_path = out / "train_state.json"
    state = None
    if args.resume:
        if not state_path.is_file():
            raise DataError(f"--resume: no training state at {state_path}")
        state = load_train_state(state_path)

    # The split is a pure function of the config seed, so a resumed run
    # reconstructs exactly the sets the interrupted run used.
    rng = np.random.default_rng(config.seed)
    train_bags, val_bags = _split_patients(ds.bags, config.val_fraction, rng)
    stats = zscore_fit(train_bags)

    def norm(bags):
        return zscore_apply(Dataset(bags=bags, d0=ds.d0), stats).bags

    train_graphs = [build_radius_graph(c, radius, b) for b, c in norm(train_bags)]
    val_graphs = [build_radius_graph(c, radius, b) for b, c in norm(val_bags)]
    state = train(train_graphs, val_graphs, config, state=state)

    save_checkpoint(out / "checkpoint.json", state.best_params, radius, stats)
    save_train_state(state_path, state)
    with open(out / "history.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in state.history:
            w.writerow(
                [row["epoch"], repr(row["lr"]), repr(row["train_loss"]),
                 repr(row["val_loss"])]
            )
    snapshot = dataclasses.asdict(config)
    snapshot["radius_um"] = radius
    if args.config:
        inputs = inputs + [args.config]
    _write_manifest(out, "train", snapshot, config.seed, inputs)
    print(
        f"trained {len(state.history)} epochs "
        f"({len(train_graphs)} train / {len(val_graphs)} val bags); "
        f"best val loss {state.best_loss:.6g}"
    )
    return 0


def cmd_crossval(args) -> int:
    radius = _check_radius(args.radius)
    config = _load_config(TrainConfig, args.config, args.seed)
    ds, inputs = _ingest_dir(args.data)
    result = cross_validate(ds, config, radius_um=radius)
    out = _ensure_out(args.out)

    with open(out / "folds.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["slide_id", "skipped", "reason", "n_test_bags", "auroc",
             "average_precision", "threshold", "sensitivity", "specificity"]
        )
        for fold in result.folds:
            w.writerow(
                [
                    fold.slide_id,
                    str(fold.skipped).lower(),
                    fold.reason,
                    len(fold.bag_scores),
                    repr(fold.auroc),
                    repr(fold.average_precision),
                    repr(fold.threshold),
                    repr(fold.sensitivity),
                    repr(fold.specificity),
                ]
            )

    summary = {
        "n_folds": len(result.folds),
        "n_skipped": sum(1 for fold in result.folds if fold.skipped),
        "mean_auroc": _json_num(result.mean_auroc),
        "std_auroc": _json_num(result.std_auroc),
        "mean_ap": _json_num(result.mean_ap),
        "std_ap": _json_num(result.std_ap),
        "mean_sensitivity": _json_num(result.mean_sensitivity),
        "mean_specificity": _json_num(result.mean_specificity),
        "pooled_auroc": _json_num(result.pooled_auroc),
        "pooled_ap": _json_num(result.pooled_ap),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")

    # Held-out predictions pooled over folds feed the downstream
    # commands (eval, survival, export-overlay) without re-training.
    cells_by_bag = {bag.bag_id: cells for bag, cells in ds.bags}
    scored, bag_rows = [], []
    for fold in result.folds:
        if fold.skipped:
            continue
        for bag, _ in fold.bag_scores:
            ss = fold.score_sets[bag.bag_id]
            cells = cells_by_bag[bag.bag_id]
            scored.append((bag.bag_id, cells, ss))
            bag_rows.append((bag.bag_id, len(cells), ss.Z_s, ss.Z_e, ss.Z))
    write_cell_scores(out / "cell_scores.csv", scored)
    write_bag_scores(out / "bag_scores.csv", bag_rows)

    snapshot = dataclasses.asdict(config)
    snapshot["radius_um"] = radius
    if args.config:
        inputs = inputs + [args.config]
    _write_manifest(out, "crossval", snapshot, config.seed, inputs)
    print(
        f"{summary['n_folds']} folds ({summary['n_skipped']} skipped); "
        f"mean AUROC {result.mean_auroc:.4f} +- {result.std_auroc:.4f}, "
        f"mean AP {result.mean_ap:.4f}"
    )
    return 0


def cmd_predict(args) -> int:
    params, radius, stats = load_checkpoint(args.model)
    ds, inputs = _ingest_dir(args.data)
    ds, graphs = _prepared_graphs(ds, params, stats, radius, args.threads)
    score_sets = _pool_map(lambda g: forward(g, params), graphs, args.threads)

    out = _ensure_out(args.out)
    scored, bag_rows = [], []
    for (bag, cells), ss in zip(ds.bags, score_sets):
        scored.append((bag.bag_id, cells, ss))
        bag_rows.append((bag.bag_id, len(cells), ss.Z_s, ss.Z_e, ss.Z))
    write_cell_scores(out / "cell_scores.csv", scored)
    write_bag_scores(out / "bag_scores.csv", bag_rows)
    _write_manifest(
        out, "predict", {"radius_um": radius}, None, [args.model] + inputs
    )
    n_cells = sum(len(cells) for _, cells in ds.bags)
    print(f"scored {len(ds.bags)} bags / {n_cells} cells")
    return 0


def _safe_bag_filename(bag_id: str) -> str:
    if not bag_id or bag_id in (".", "..") or "/" in bag_id or "\\" in bag_id:
        raise DataError(f"bag id {bag_id!r} cannot name an output file")
    return bag_id


def cmd_export_overlay(args) -> int:
    bags = read_cell_scores(args.scores)
    out = _ensure_out(args.out)
    for bag_id, coords, z_s, z_e in bags:
        stem = _safe_bag_filename(bag_id)
        write_geojson(out / f"{stem}.geojson", geojson_overlay(coords, z_s, z_e))
        text = mesogram_report(bag_id, z_s - z_e)
        (out / f"{stem}_mesogram.txt").write_text(text, encoding="utf-8")
    _write_manifest(out, "export-overlay", {}, None, [args.scores])
    print(f"exported overlays for {len(bags)} bags to {out}")
    return 0


def cmd_survival(args) -> int:
    metas = read_bag_table(args.bags)
    scores = read_bag_scores(args.scores)
    pairs = [(m, scores[m.bag_id][3]) for m in metas if m.bag_id in scores]
    if not pairs:
        raise DataError("no bags shared between the score table and the bag table")
    records = records_from_bags(pairs)
    if args.censor_days is not None:
        records = censor_at(records, args.censor_days)

    out = _ensure_out(args.out)
    split = {}
    for r in records:
        split.setdefault(r.group, []).append(r)
    for group, members in sorted(split.items()):
        curve = kaplan_meier(members)
        with open(out / f"km_{group}.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_days", "survival", "at_risk"])
            for t, s, n in km_table(curve):
                w.writerow([repr(t), repr(s), n])

    chi2, p = log_rank(records)
    n_high = sum(1 for r in records if r.group == GROUP_HIGH)
    (out / "logrank.txt").write_text(
        f"chi2\t{chi2!r}\np\t{p!r}\nn_high\t{n_high}\nn_low\t{len(records) - n_high}\n",
        encoding="utf-8",
    )

    covariates = ["group"]
    if all(r.sex is not None for r in records) and len({r.sex for r in records}) > 1:
        covariates.append("sex")
    if all(r.age is not None for r in records) and len({r.age for r in records}) > 1:
        covariates.append("age")
    fit = cox_ph(records, covariates=tuple(covariates))
    (out / "cox.txt").write_text(cox_report(fit), encoding="utf-8")

    per_patient = {}
    for m, z in pairs:
        per_patient.setdefault(m.patient_id, []).append(z)
    group_of = {r.patient_id: r.group for r in records}
    with open(out / "groups.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "n_bags", "mean_score", "group"])
        for pid in sorted(group_of):
            zs = per_patient[pid]
            w.writerow([pid, len(zs), repr(float(np.mean(zs))), group_of[pid]])

    _write_manifest(
        out,
        "survival",
        {"censor_days": args.censor_days, "covariates": covariates},
        None,
        [args.scores, args.bags],
    )
    print(
        f"{len(records)} patients; log-rank p={p:.4g}; "
        f"group HR={fit.hr[0]:.4g} (p={fit.p_values[0]:.4g})"
    )
    return 0


def cmd_explain(args) -> int:
    if args.steps < 1:
        raise DataError(f"steps must be >= 1, got {args.steps}")
    params, radius, stats = load_checkpoint(args.model)
    ds, inputs = _ingest_dir(args.data)
    ds, graphs = _prepared_graphs(ds, params, stats, radius, args.threads)

    seeds = [
        int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        for i in range(len(graphs))
    ]
    importances = _pool_map(
        lambda gs: learn_feature_mask(
            gs[0],
            params,
            lambda_size=args.lambda_size,
            lambda_ent=args.lambda_ent,
            steps=args.steps,
            seed=gs[1],
        ),
        zip(graphs, seeds),
        args.threads,
    )

    out = _ensure_out(args.out)
    with open(out / "masks.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bag_id"] + [f"f{k}" for k in range(ds.d0)])
        for imp in importances:
            w.writerow([imp.bag_id] + [repr(float(v)) for v in imp.mask])

    groups = {bag.bag_id: bag.subtype for bag, _ in ds.bags}
    summary = aggregate_importance(importances, groups)
    (out / "importance.txt").write_text(importance_report(summary), encoding="utf-8")
    _write_manifest(
        out,
        "explain",
        {
            "lambda_size": args.lambda_size,
            "lambda_ent": args.lambda_ent,
            "steps": args.steps,
            "radius_um": radius,
        },
        args.seed,
        [args.model] + inputs,
    )
    top = ",".join(f"f{j}" for j in summary.top10[:3])
    print(f"masks for {len(importances)} bags; top features {top}")
    return 0


def cmd_eval(args) -> int:
    metas = read_bag_table(args.bags)
    scores = read_bag_scores(args.scores)
    records = [
        EvalRecord(
            bag_id=m.bag_id,
            score=scores[m.bag_id][3],
            positive=m.subtype in POSITIVE_SUBTYPES,
        )
        for m in metas
        if m.bag_id in scores
    ]
    if not records:
        raise DataError("no bags shared between the score table and the bag table")
    a = auroc(records)
    ap = average_precision(records)
    threshold, sens, spec = operating_point(records)
    doc = {
        "n_bags": len(records),
        "n_positive": sum(1 for r in records if r.positive),
        "auroc": a,
        "average_precision": ap,
        "threshold": threshold,
        "sensitivity": sens,
        "specificity": spec,
    }
    out = _ensure_out(args.out)
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_manifest(out, "eval", {}, None, [args.scores, args.bags])
    print(f"AUROC {a:.4f} AP {ap:.4f} sens {sens:.4f} spec {spec:.4f}")
    return 0


def _default_threads() -> int:
    return os.cpu_count() or 1


def build_parser() -> _Parser:
    p = _Parser(
        prog="mesograph",
        description=(
            "Cell-graph pipeline: synthesize data, build radius graphs, train "
            "the dual-branch scorer, and export scores, overlays, survival "
            "splits, and feature importances."
        ),
    )
    p.add_argument(
        "--version", action="version", version=f"mesograph {__version__}"
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sp = sub.add_parser("synth", help="generate a synthetic cell/bag dataset")
    sp.add_argument("--config", help="JSON file of generator settings")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build-graph", help="build radius graphs and summarize them")
    sp.add_argument("--cells", required=True, help="per-cell feature table")
    sp.add_argument("--bags", required=True, help="bag metadata table")
    sp.add_argument("--radius", type=float, default=DEFAULT_RADIUS_UM,
                    help="connection radius in micrometers")
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_graph)

    sp = sub.add_parser("train", help="train on a data directory")
    sp.add_argument("--data", required=True, help="directory with cells.csv/bags.csv")
    sp.add_argument("--config", help="JSON file of training settings")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.add_argument("--radius", type=float, default=DEFAULT_RADIUS_UM)
    sp.add_argument("--resume", action="store_true",
                    help="continue from train_state.json in the output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("crossval", help="hold-one-slide-out cross-validation")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", help="JSON file of training settings")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--radius", type=float, default=DEFAULT_RADIUS_UM)
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("predict", help="score a data directory with a checkpoint")
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("export-overlay",
                        help="per-bag GeoJSON overlays and score histograms")
    sp.add_argument("--scores", required=True, help="per-cell score table")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_overlay)

    sp = sub.add_parser("survival", help="score-split survival analysis")
    sp.add_argument("--scores", required=True, help="per-bag score table")
    sp.add_argument("--bags", required=True, help="bag metadata table")
    sp.add_argument("--censor-days", type=float,
                    help="administratively censor at this horizon")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_survival)

    sp = sub.add_parser("explain", help="per-bag feature masks and a summary")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--lambda-size", type=float, default=LAMBDA_SIZE)
    sp.add_argument("--lambda-ent", type=float, default=LAMBDA_ENT)
    sp.add_argument("--steps", type=int, default=MASK_STEPS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=_default_threads())
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval", help="bag-level classification metrics")
    sp.add_argument("--scores", required=True, help="per-bag score table")
    sp.add_argument("--bags", required=True, help="bag metadata table")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    try:
        return args.func(args)
    except DataError as e:
        print(f"mesograph: data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"mesograph: numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"mesograph: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
