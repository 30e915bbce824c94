"""Command-line driver: ``run``, ``gen-data``, ``analyze-graph`` and ``sweep``.

Exit codes: 0 on success, 2 for configuration errors, 3 when any seed failed
at runtime (the remaining seeds are still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import config as C
from .data import generate_synthetic_ridge, write_svmlight
from .engine import RunResult, run_mtcd, run_stcd, run_svfl_baseline
from .graph import GraphError, build_topology, is_connected, rho_bound, walk_analytics
from .metrics import CSV_COLUMNS, CostModel, accumulate_cost, cost_to_reach, eval_rows, export_csv, theorem_constants
from .objective import evaluate, smoothness_constant, solve_reference, solve_reference_cached

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class Job:
    run_id: str
    seed: int
    algorithm: dict
    cost_ratio: float
    cell: dict


@dataclass
class JobOutcome:
    job: Job
    result: RunResult | None
    meta: dict


# ---------------------------------------------------------------------------
# running one job


def _reference(cfg: dict, spec, dataset):
    ref = cfg["reference"]
    if ref["cache_dir"]:
        return solve_reference_cached(spec, dataset, ref["tol"], ref["cache_dir"])
    return solve_reference(spec, dataset, ref["tol"])


def _stop_rule(cfg: dict, f_star: float):
    """Stop on divergence, and at the sweep threshold when the sweep asks for it."""
    sw = cfg.get("sweep")
    threshold = sw["threshold"] if sw and sw["stop_at_threshold"] else None

    def stop(ev) -> bool:
        if not np.isfinite(ev.f_value):
            return True
        return threshold is not None and f_star > 0 and (ev.f_value - f_star) / f_star <= threshold

    return stop


def _execute(cfg: dict, job: Job) -> JobOutcome:
    meta: dict = {"run_id": job.run_id, "seed": job.seed, "algorithm": job.algorithm["name"], "cell": job.cell}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _execute_inner(cfg, job, meta)
    except Exception as exc:  # one failing seed must not take the others down
        meta["status"] = "failed"
        meta["error"] = f"{type(exc).__name__}: {exc}"
        meta["traceback"] = traceback.format_exc(limit=5)
        return JobOutcome(job, None, meta)


def _execute_inner(cfg: dict, job: Job, meta: dict) -> JobOutcome:
    graph = C.build_graph(cfg, job.seed)
    dataset = C.build_dataset(cfg, job.seed)
    spec = C.build_spec(cfg)
    partition = C.build_partition(cfg)
    rc = C.build_run_config(job.algorithm, job.seed)
    ref = _reference(cfg, spec, dataset)
    name = job.algorithm["name"]
    stop = _stop_rule(cfg, ref.f_star)
    if name == "stcd":
        res = run_stcd(rc, graph, dataset, spec, f_star=ref.f_star, stop=stop)
    elif name == "svfl":
        res = run_svfl_baseline(rc, dataset, spec, f_star=ref.f_star, stop=stop)
    else:
        res = run_mtcd(rc, graph, dataset, spec, partition if rc.sync_mode == "token_per_cluster" else None,
                       f_star=ref.f_star, stop=stop)
    res.run_id = job.run_id

    L = smoothness_constant(spec, dataset).L
    f0 = evaluate(spec, dataset, np.zeros(dataset.num_features))
    meta.update(
        f_star=ref.f_star,
        reference={"method": ref.method, "certificate": ref.certificate, "iterations": ref.iterations,
                   "tol": cfg["reference"]["tol"]},
        er_attempts=graph.metadata.get("er_attempts"),
        data_seed=C.data_seed(cfg, job.seed),
        sync_variant=res.metadata["sync_variant"],
        index_messages_charged=False,
        smoothness=L,
    )
    if name != "svfl":
        use_part = partition if rc.sync_mode == "token_per_cluster" else None
        try:
            tc = theorem_constants(L, rc.eta, rc.hops_per_sync, rc.local_updates, graph, use_part,
                                   "fixed" if rc.start_policy == "fixed" else "uniform", delta=f0 - ref.f_star)
            meta["theorem_constants"] = {**asdict(tc), "eta_ok": tc.eta_ok, "valid": tc.valid}
        except GraphError as exc:  # e.g. a cluster with no edges inside
            meta["theorem_constants"] = {"error": str(exc)}
    meta["status"] = "ok" if np.isfinite(res.evals[-1].f_value) else "diverged"
    return JobOutcome(job, res, meta)


def _run_jobs(cfg: dict, jobs: list[Job], threads: int) -> list[JobOutcome]:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(lambda j: _execute(cfg, j), jobs))
    else:
        outcomes = [_execute(cfg, j) for j in jobs]
    return sorted(outcomes, key=lambda o: o.job.run_id)


# ---------------------------------------------------------------------------
# output


def _fmt_cell_value(v) -> str:
    if isinstance(v, float):
        return "%.6g" % v
    return str(v)


def _sidecars(out: Path) -> tuple[Path, Path]:
    stem = out.with_suffix("") if out.suffix else out
    return Path(f"{stem}.config.json"), Path(f"{stem}.meta.json")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_outputs(cfg: dict, outcomes: list[JobOutcome], out: Path, extra_builder=None) -> int:
    ok = [o for o in outcomes if o.result is not None]
    cfg_path, meta_path = _sidecars(out)
    _write_json(cfg_path, cfg)
    _write_json(meta_path, {"runs": [o.meta for o in outcomes]})
    if ok:
        cost = C.build_cost_model(cfg["cost"])
        if extra_builder is None:
            export_csv([o.result for o in ok], out, cost)
        else:
            _export_sweep(cfg, ok, out, extra_builder)
    failed = [o for o in outcomes if o.result is None]
    for o in failed:
        print(f"seed {o.job.seed} ({o.job.run_id}) failed: {o.meta['error']}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def _export_sweep(cfg: dict, ok: list[JobOutcome], out: Path, grid_keys: list[str]) -> None:
    threshold = cfg["sweep"]["threshold"]
    header = list(CSV_COLUMNS) + ["variant"] + grid_keys + ["gap_threshold", "cost_to_reach_gap"]
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for o in ok:
            model = CostModel.from_ratio(o.job.cost_ratio, charge_self_hops=cfg["cost"]["charge_self_hops"])
            reach = cost_to_reach(accumulate_cost(o.result.trace, model), o.result.f_star, threshold)
            tail = [o.job.cell["variant"]] + [_fmt_cell_value(o.job.cell.get(k, "")) for k in grid_keys]
            tail += ["%.17g" % threshold, "%.17g" % reach]
            for row in eval_rows(o.result, model):
                w.writerow(row + tail)


# ---------------------------------------------------------------------------
# subcommands


def _apply_overrides(cfg: dict, args) -> dict:
    raw = copy.deepcopy(cfg)
    if getattr(args, "seeds", None):
        try:
            raw["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise C.ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    return C.resolve(raw)


def _load(args) -> dict:
    if args.config and args.preset:
        raise C.ConfigError("use either --config or --preset, not both")
    if args.config:
        cfg = C.load_config(args.config)
    elif args.preset:
        cfg = C.preset(args.preset)
    else:
        raise C.ConfigError("one of --config or --preset is required")
    return _apply_overrides(cfg, args)


def _output_path(cfg: dict, args) -> Path:
    return Path(args.out) if args.out else Path(cfg["output"])


def cmd_run(args) -> int:
    cfg = _load(args)
    alg = cfg["algorithm"]
    jobs = [Job(f"{alg['name']}-seed{s}", s, alg, cfg["cost"]["ratio"], {}) for s in cfg["seeds"]]
    outcomes = _run_jobs(cfg, jobs, args.threads)
    out = _output_path(cfg, args)
    code = _write_outputs(cfg, outcomes, out)
    print(f"wrote {out} ({sum(o.result is not None for o in outcomes)}/{len(outcomes)} runs)")
    return code


def _sweep_jobs(cfg: dict) -> tuple[list[Job], list[str]]:
    sw = cfg["sweep"]
    jobs = []
    keys: list[str] = []
    for var in sw["variants"]:
        grid = {**sw["grid"], **var["grid"]}
        for k in grid:
            if k not in keys:
                keys.append(k)
    for var in sw["variants"]:
        grid = {**sw["grid"], **var["grid"]}
        names = list(grid)
        for values in itertools.product(*(grid[k] for k in names)):
            cell = dict(zip(names, values))
            alg = dict(var["algorithm"])
            ratio = cfg["cost"]["ratio"]
            for k, v in cell.items():
                if k == "cost_ratio":
                    ratio = float(v)
                else:
                    alg[k] = v
            alg = C._resolve_algorithm(alg, f"sweep.variants[{var['label']}]")
            tag = ",".join(f"{k}={_fmt_cell_value(cell[k])}" for k in names)
            for s in cfg["seeds"]:
                jobs.append(Job(f"{var['label']}[{tag}]-seed{s}", s, alg, ratio, {"variant": var["label"], **cell}))
    return jobs, keys


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if "sweep" not in cfg:
        raise C.ConfigError("sweep: section required for the sweep command")
    jobs, keys = _sweep_jobs(cfg)
    outcomes = _run_jobs(cfg, jobs, args.threads)
    out = _output_path(cfg, args)
    code = _write_outputs(cfg, outcomes, out, extra_builder=keys)
    print(f"wrote {out} ({sum(o.result is not None for o in outcomes)}/{len(outcomes)} runs)")
    return code


def cmd_gen_data(args) -> int:
    if args.N < 1 or args.d < 1:
        raise C.ConfigError("--N and --d must be positive")
    data = generate_synthetic_ridge(args.N, args.d, args.seed)
    write_svmlight(data, args.out)
    print(f"wrote {args.out} (N={args.N}, d={args.d}, seed={args.seed})")
    return EXIT_OK


ANALYTICS_COLUMNS = ("topology", "K", "edges", "algebraic_connectivity", "lambda2", "spectral_gap", "pi_min",
                     "tau_bound", "S", "rho", "rho_branch")


def cmd_analyze_graph(args) -> int:
    if args.config or args.preset:
        cfg = _load(args)
        g = C.build_graph(cfg, cfg["seeds"][0])
        kind = cfg["graph"]["topology"]
    else:
        if not args.topology or not args.K:
            raise C.ConfigError("analyze-graph needs --config/--preset or --topology and --K")
        kind = args.topology
        try:
            g = build_topology(kind, args.K, rows=args.rows, cols=args.cols, p=args.p, seed=args.graph_seed)
        except GraphError as exc:
            raise C.ConfigError(f"graph: {exc}") from None
    if not is_connected(g):
        raise GraphError("graph is disconnected; walk analytics need a connected graph")
    hops = [int(s) for s in args.hops.split(",")]
    wa = walk_analytics(g)
    rows = []
    for S in hops:
        rho, branch = rho_bound(g, S)
        rows.append([kind, g.num_clients, g.edge_count, wa.algebraic_connectivity, wa.lambda2, wa.spectral_gap,
                     wa.pi_min, wa.tau_bound, S, rho, branch])
    lines = [",".join(ANALYTICS_COLUMNS)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer))
                                                            else "%.17g" % v) for v in r))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", help=f"named preset ({', '.join(sorted(C.PRESETS))})")
    p.add_argument("--out", required=out_required, help="output path (CSV)")
    p.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p.add_argument("--threads", type=int, default=1, help="run seeds/grid cells on N threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokencd", description="Multi-token coordinate descent simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every seed of a config and write a CSV")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid and write a long-format CSV")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write the synthetic ridge dataset as SVMLight")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("analyze-graph", help="print walk analytics of a topology as CSV")
    _common(p)
    p.add_argument("--topology", choices=["complete", "path", "cycle", "star", "grid", "erdos_renyi"])
    p.add_argument("--K", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--graph-seed", type=int, default=0)
    p.add_argument("--hops", default="1", help="comma-separated hop counts for the visiting-probability bound")
    p.set_defaults(func=cmd_analyze_graph)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
