"""Command-line entry point.

Subcommands bind config files to the library and write their artifacts
into an output directory together with a manifest that echoes the fully
resolved configuration and seed. Outputs are deterministic: re-running
with the same config and seed rewrites byte-identical files (stage wall
times live in a separate timings.json).

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .affinity import KernelSpec
from .config import ConfigError, family_from_kv, read_config, scenario_from_kv
from .harness import (
    MethodSpec,
    Scenario,
    batch_size_sweep,
    grid_search,
    matrix_from_rows,
    results_to_csv,
    rows_from_csv,
    synthetic_family,
    timings_payload,
)
from .mapping import load_mapping, pool_average
from .numerics import softmax_rows
from .solver import SolverConfig, lame_correct
from .streams import (
    ScenarioSpec,
    SyntheticConfig,
    generate_synthetic,
    generate_toy2d,
    load_embeddings,
    make_stream,
    save_embeddings,
)
from .toy import collapse_demo


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path: Path, payload) -> None:
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, subcommand: str, config: dict, seed) -> None:
    _write_json(
        out / "manifest.json",
        {
            "tool": "lame",
            "version": __version__,
            "subcommand": subcommand,
            "config": {k: str(v) for k, v in sorted(config.items())},
            "seed": seed,
        },
    )


def _series_csv(xs, ys) -> str:
    lines = ["x,y"]
    lines += [f"{_plain(x)},{_plain(y)}" for x, y in zip(xs, ys)]
    return "\n".join(lines) + "\n"


def _plain(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_correct(args) -> None:
    out = Path(args.out)
    data = load_embeddings(args.input)
    mapping = load_mapping(args.mapping, source_count=data.class_count) if args.mapping else None
    kernel = KernelSpec(kind=args.kernel, k=args.k)
    solver_cfg = SolverConfig(tol=args.tol, max_iter=args.max_iter)

    # file order is preserved: correction is a filter, not an evaluation
    probs = softmax_rows(data.logits)
    if mapping is not None:
        probs = np.stack([pool_average(row, mapping) for row in probs])
    K = probs.shape[1]

    rows = ["sample,prediction," + ",".join(f"p{k}" for k in range(K))]
    diagnostics = []
    for start in range(0, len(data), args.batch_size):
        sl = slice(start, start + args.batch_size)
        Q = probs[sl]
        X = data.features[sl]
        n = Q.shape[0]
        k_eff = min(kernel.k, n - 1)
        if n < 2 or k_eff < 1:
            W = np.zeros((n, n))
        else:
            W = replace(kernel, k=k_eff).build(X)
        Z, diag = lame_correct(Q, W, solver_cfg)
        preds = np.argmax(Z, axis=1)
        for i in range(n):
            rows.append(
                f"{start + i},{int(preds[i])}," + ",".join(repr(float(z)) for z in Z[i])
            )
        diagnostics.append(
            {
                "batch": len(diagnostics),
                "size": n,
                "iterations": diag.iterations,
                "converged": diag.converged,
                "monotone": diag.monotone,
                "final_delta": diag.final_delta,
                "objective_trace": diag.objective_trace,
            }
        )
    _write_text(out / "corrected.csv", "\n".join(rows) + "\n")
    _write_json(out / "diagnostics.json", diagnostics)
    _write_manifest(
        out,
        "correct",
        {
            "input": args.input,
            "kernel": args.kernel,
            "k": args.k,
            "mapping": args.mapping or "none",
            "batch_size": args.batch_size,
            "tol": args.tol,
            "max_iter": args.max_iter,
        },
        args.seed,
    )


def cmd_simulate(args) -> None:
    out = Path(args.out)
    kv = read_config(args.config, args.set)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    spec = scenario_from_kv(kv)
    if isinstance(spec.source, SyntheticConfig):
        data, _, _ = generate_synthetic(spec.source, spec.seed)
    else:
        data = load_embeddings(spec.source)
    stream = make_stream(data, spec)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(data, out / "dataset.lame.bin")

    lines = ["batch_index,sample_index"]
    cursor = 0
    counts = []
    for b, batch in enumerate(stream):
        counts.append(len(batch))
        for _ in range(len(batch)):
            lines.append(f"{b},{cursor}")
            cursor += 1
    _write_text(out / "stream.csv", "\n".join(lines) + "\n")
    _write_json(
        out / "summary.json",
        {
            "n_samples_dataset": len(data),
            "n_samples_stream": int(sum(counts)),
            "n_batches": len(stream),
            "batch_sizes": counts,
            "class_count": data.class_count,
        },
    )
    _write_manifest(out, "simulate", kv, spec.seed)


def cmd_toy2d(args) -> None:
    out = Path(args.out)
    lrs = [float(s) for s in args.lrs.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not lrs or not seeds:
        raise ConfigError("toy2d needs non-empty --lrs and --seeds lists")
    n = args.batches * args.batch_size

    per_lr_entropy: dict[float, list[np.ndarray]] = {lr: [] for lr in lrs}
    per_lr_acc: dict[float, list[np.ndarray]] = {lr: [] for lr in lrs}
    baseline_acc: list[np.ndarray] = []
    for seed in seeds:
        data, model, stats = generate_toy2d(n, seed)
        spec = ScenarioSpec(
            source="toy2d", sampling="non_iid", prior_shift=None,
            batch_size=args.batch_size, seed=seed,
        )
        stream = make_stream(data, spec)
        series = collapse_demo(lrs + [0.0], stream, model, stats)
        for lr in lrs:
            ent, acc = series[lr]
            per_lr_entropy[lr].append(ent)
            per_lr_acc[lr].append(acc)
        baseline_acc.append(series[0.0][1])

    steps = np.arange(1, args.batches + 1)
    for lr in lrs:
        ent = np.mean(per_lr_entropy[lr], axis=0)
        acc = np.mean(per_lr_acc[lr], axis=0)
        _write_text(out / f"toy2d_entropy_lr{lr:g}.csv", _series_csv(steps, ent))
        _write_text(out / f"toy2d_accuracy_lr{lr:g}.csv", _series_csv(steps, acc))
    _write_text(
        out / "toy2d_accuracy_baseline.csv",
        _series_csv(steps, np.mean(baseline_acc, axis=0)),
    )
    _write_manifest(
        out,
        "toy2d",
        {
            "lrs": args.lrs,
            "seeds": args.seeds,
            "batches": args.batches,
            "batch_size": args.batch_size,
        },
        seeds[0],
    )


def _family_scenarios(kv) -> tuple[list[Scenario], list[int], dict]:
    fam = family_from_kv(kv)
    scenarios = synthetic_family(
        fam.source,
        batch_size=fam.batch_size,
        zipf_s=fam.zipf_s,
        letters=fam.scenarios,
        mapping=fam.mapping,
    )
    return scenarios, list(fam.seeds), kv


def cmd_grid(args) -> None:
    out = Path(args.out)
    kv = read_config(args.config, args.set)
    scenarios, seeds, kv = _family_scenarios(kv)
    if args.seed is not None:
        seeds = [args.seed]
    result = grid_search(
        scenarios, args.method, grid=None, seeds=seeds, workers=args.workers
    )
    _write_text(out / "grid_results.csv", results_to_csv(result.runs))
    header = "method," + ",".join(result.scenario_ids)
    lines = [header]
    for spec, row in zip(result.grid, result.acc):
        lines.append(spec.label() + "," + ",".join(repr(float(v)) for v in row))
    lines.append("baseline," + ",".join(repr(float(v)) for v in result.baseline_acc))
    _write_text(out / "grid_table.csv", "\n".join(lines) + "\n")
    _write_json(
        out / "best.json",
        {
            "method": result.method_kind,
            "best": result.best_spec.label(),
            "best_index": result.best_index,
            "best_mean_accuracy": result.best_mean,
            "scenario_ids": result.scenario_ids,
            "per_scenario_accuracy": [float(v) for v in result.acc[result.best_index]],
            "tie_break": "declaration order",
        },
    )
    _write_json(out / "timings.json", timings_payload(result.runs))
    _write_manifest(out, "grid", {**kv, "method": args.method}, seeds)


def cmd_matrix(args) -> None:
    out = Path(args.out)
    with open(args.grid_results, "r", encoding="utf-8") as fh:
        rows = rows_from_csv(fh.read())
    matrix = matrix_from_rows(rows)
    lines = ["tuned_on\\eval_on," + ",".join(matrix.scenarios)]
    for sid, row in zip(matrix.scenarios, matrix.values):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in row))
    _write_text(out / "matrix.csv", "\n".join(lines) + "\n")
    _write_json(
        out / "matrix_meta.json",
        {
            "scenarios": matrix.scenarios,
            "diagonal_column_max": matrix.check_diagonal_dominance(),
            "chosen_row_indices": matrix.chosen,
        },
    )
    _write_manifest(out, "matrix", {"grid_results": args.grid_results}, None)


def cmd_sweep(args) -> None:
    out = Path(args.out)
    kv = read_config(args.config, args.set)
    scenarios, seeds, kv = _family_scenarios(kv)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    method = MethodSpec("lame", kernel=KernelSpec("knn", args.k))
    points = batch_size_sweep(scenarios, method, sizes, seeds, workers=args.workers)
    lines = ["batch_size,lame_accuracy,baseline_accuracy,gain"]
    for p in points:
        lines.append(
            f"{p.batch_size},{repr(p.method_acc)},{repr(p.baseline_acc)},{repr(p.gain)}"
        )
    _write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    _write_text(
        out / "sweep_lame.csv",
        _series_csv([p.batch_size for p in points], [p.method_acc for p in points]),
    )
    _write_text(
        out / "sweep_baseline.csv",
        _series_csv([p.batch_size for p in points], [p.baseline_acc for p in points]),
    )
    _write_manifest(out, "sweep", {**kv, "sizes": args.sizes, "k": args.k}, seeds)


def cmd_report(args) -> None:
    out = Path(args.out)
    with open(args.results, "r", encoding="utf-8") as fh:
        rows = rows_from_csv(fh.read())
    groups: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        key = (row["scenario"], row["method"])
        groups.setdefault(key, []).append(float(row["accuracy"]))
    lines = ["scenario,method,runs,mean_accuracy,std_accuracy,min_accuracy,max_accuracy"]
    summary = []
    for (scenario, method) in sorted(groups):
        vals = np.array(groups[(scenario, method)])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rec = {
            "scenario": scenario,
            "method": method,
            "runs": len(vals),
            "mean_accuracy": float(vals.mean()),
            "std_accuracy": std,
            "min_accuracy": float(vals.min()),
            "max_accuracy": float(vals.max()),
        }
        summary.append(rec)
        lines.append(
            f"{scenario},{method},{len(vals)},{repr(rec['mean_accuracy'])},"
            f"{repr(std)},{repr(rec['min_accuracy'])},{repr(rec['max_accuracy'])}"
        )
    _write_text(out / "summary.csv", "\n".join(lines) + "\n")
    _write_json(out / "summary.json", summary)
    _write_manifest(out, "report", {"results": args.results}, None)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lame",
        description="Batch-level output correction and its evaluation harness.",
    )
    parser.add_argument("--version", action="version", version=f"lame {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, config=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if config:
            p.add_argument("--config", required=True)
            p.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="KEY=VALUE",
                help="override a config entry (repeatable)",
            )

    p = sub.add_parser("correct", help="correct predictions in an embedding file")
    p.add_argument("--input", required=True)
    p.add_argument("--kernel", choices=("knn", "linear", "rbf"), default="knn")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mapping", default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_correct, seed=0)

    p = sub.add_parser("simulate", help="materialize a scenario stream")
    common(p, config=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("toy2d", help="entropy-minimization collapse demo")
    p.add_argument("--lrs", default="0.001,0.01,0.1")
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    common(p)
    p.set_defaults(func=cmd_toy2d)

    p = sub.add_parser("grid", help="hyperparameter grid search over a scenario family")
    p.add_argument(
        "--method",
        required=True,
        choices=("lame", "entropy_min", "pseudo_label", "shot_im", "restandardize_only"),
    )
    common(p, config=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("matrix", help="cross-shift transfer matrix from grid results")
    p.add_argument("--grid-results", required=True)
    common(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="batch-size sweep for lame vs baseline")
    p.add_argument("--sizes", default="1,8,16,32,64,128")
    p.add_argument("--k", type=int, default=5)
    common(p, config=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate a results CSV into mean/std summaries")
    p.add_argument("--results", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
    except (ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
