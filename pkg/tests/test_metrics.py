import math

import numpy as np
import pytest

from conftest import ridge_problem
from tokencd.data import generate_synthetic_ridge
from tokencd.engine import Eval, EventTrace, Hop, HopRun, RunConfig, SyncDownload, SyncUpload, run_mtcd, run_stcd
from tokencd.graph import ClusterPartition, CommGraph, build_topology
from tokencd.metrics import (
    CSV_COLUMNS,
    CostModel,
    EvalPoint,
    accumulate_cost,
    c0_positive_condition,
    cost_to_reach,
    empirical_variance,
    export_csv,
    lemma_probe_surrogate,
    read_csv,
    suboptimality,
    theorem_constants,
)
from tokencd.objective import GlmSpec, evaluate, smoothness_constant, solve_reference


# --- gap ---------------------------------------------------------------------


def test_suboptimality_examples():
    assert suboptimality(6.0, 3.0) == 1.0
    assert suboptimality(3.0, 3.0) == 0.0
    vals = [suboptimality(f, 2.5) for f in np.linspace(2.5, 10, 20)]
    assert np.all(np.diff(vals) > 0)


def test_suboptimality_nonpositive_reference_warns():
    with pytest.warns(RuntimeWarning):
        assert suboptimality(1.0, 0.0) == 1.0


def test_gap_at_zero_on_seed_zero_instance():
    # oracle: f(0) = 546.928991753442 and f* = 21.4780531453032 from the dual closed form
    ds = generate_synthetic_ridge(1000, 2000, 0)
    spec = GlmSpec.ridge(10.0)
    f_star = solve_reference(spec, ds).f_star
    gap = suboptimality(evaluate(spec, ds, np.zeros(2000)), f_star)
    assert gap == pytest.approx(24.46455156123142, rel=1e-9)


# --- cost --------------------------------------------------------------------


def test_cost_examples():
    hops = EventTrace([Hop(0, 0, s, 0, 1) for s in range(100)] + [Eval(1, 0.0, 0.0)])
    (pt,) = accumulate_cost(hops)
    assert pt.hop_iterations == 100 and pt.comm_cost == pytest.approx(1.0)
    recompute = EventTrace([SyncUpload(1, 4), SyncDownload(1, 2), Eval(1, 0.0, 0.0)])
    assert accumulate_cost(recompute)[0].comm_cost == 6.0
    avg = EventTrace([SyncDownload(0, 2), SyncUpload(0, 2), Eval(1, 0.0, 0.0)])
    assert accumulate_cost(avg)[0].comm_cost == 4.0


def test_cost_is_order_independent():
    rng = np.random.default_rng(0)
    evs = [Hop(0, 0, s, int(rng.integers(3)), int(rng.integers(3))) for s in range(40)]
    evs += [SyncUpload(0, 3), SyncDownload(0, 2), HopRun(0, 1, 10, 6)]
    base = accumulate_cost(EventTrace(evs + [Eval(1, 0, 0)]))[0]
    for _ in range(5):
        perm = [evs[i] for i in rng.permutation(len(evs))]
        pt = accumulate_cost(EventTrace(perm + [Eval(1, 0, 0)]))[0]
        assert pt.hop_iterations == base.hop_iterations
        assert pt.comm_cost == pytest.approx(base.comm_cost, rel=1e-14)


def test_self_hops_optional():
    trace = EventTrace([Hop(0, 0, 0, 1, 1), Hop(0, 0, 1, 1, 2), HopRun(0, 0, 5, 2), Eval(1, 0, 0)])
    assert accumulate_cost(trace)[0].comm_cost == pytest.approx(0.07)
    assert accumulate_cost(trace, CostModel(charge_self_hops=False))[0].comm_cost == pytest.approx(0.03)


def test_compact_and_hop_traces_cost_the_same():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    g = build_topology("path", 4)
    cfg = RunConfig(eta=1e-3, num_tokens=2, hops_per_sync=6, rounds=4)
    for model in (CostModel(), CostModel(charge_self_hops=False)):
        a = accumulate_cost(run_mtcd(cfg, g, ds, spec).trace, model)
        b = accumulate_cost(run_mtcd(cfg.replace(trace_level="compact"), g, ds, spec).trace, model)
        assert [(p.hop_iterations, round(p.comm_cost, 12)) for p in a] == [
            (p.hop_iterations, round(p.comm_cost, 12)) for p in b]


def test_cost_model_ratio():
    assert CostModel.from_ratio(100).c2c_cost == pytest.approx(0.01)
    with pytest.raises(ValueError):
        CostModel(c2c_cost=-1)
    with pytest.raises(ValueError):
        CostModel.from_ratio(0)


# --- step-size constants ----------------------------------------------------


def test_theorem_constants_single_client():
    tc = theorem_constants(1.0, 0.1, 1, 1, CommGraph(1, ((),)))
    e = math.e
    assert tc.rho == 1.0 and tc.p == 1.0
    assert tc.C1 == pytest.approx(0.1 * e, rel=1e-15)
    c0 = 0.1 * (1 * (1 - 0.1) - 1 * 0.1 * e * (1 + 0.1 * 0.1 * e))
    assert tc.C0 == pytest.approx(c0, rel=1e-15)
    assert tc.eta_max == pytest.approx(1 / (2 * (1 + e * (1 + e))), rel=1e-15)


def test_theorem_valid_flag():
    g = build_topology("cycle", 6)
    ref = theorem_constants(50.0, 1.0, 4, 3, g)
    half = theorem_constants(50.0, ref.eta_max / 2, 4, 3, g)
    assert half.eta_ok and half.valid and half.C0 > 0
    over = theorem_constants(50.0, ref.eta_max * 2, 4, 3, g)
    assert not over.eta_ok and not over.valid
    assert np.isfinite(over.C0) and over.C1 > 0


def test_theorem_constants_cluster_variant():
    g = build_topology("path", 8)
    part = ClusterPartition.contiguous(8, 2)
    bound = theorem_constants(10.0, 1.0, 3, 2, g, part).eta_max
    tc = theorem_constants(10.0, bound / 2, 3, 2, g, part, delta=5.0)
    assert tc.variant == "token_per_cluster" and tc.p == pytest.approx(1 / 4)
    assert tc.descent_bound(10) == pytest.approx(5.0 / (tc.C0 * 10))
    assert theorem_constants(10.0, 1e-4, 3, 2, g, part, delta=5.0).descent_bound(10) is None
    assert theorem_constants(10.0, 1e-4, 3, 2, g, part, start="fixed").p == 0.0
    assert theorem_constants(10.0, 1e-4, 3, 2, g).p == pytest.approx(1 / 8)


def test_c0_condition_implies_positive_c0():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L, S, Q = rng.uniform(0.5, 50), int(rng.integers(1, 10)), int(rng.integers(1, 10))
        rho = rng.uniform(1e-3, 1)
        eta = rng.uniform(0, 1) / (L * S * Q)
        if c0_positive_condition(L, eta, S, Q, rho):
            e = math.e
            c1 = eta * e * L * S * Q
            a = eta * L * S * Q
            assert rho * (1 - a) - S * c1 * (1 + a * c1) > 0


# --- lemma probe -------------------------------------------------------------


def test_probe_zero_step():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    res = lemma_probe_surrogate(spec, ds, np.ones(8), [0, 1, 1, 2], 10.0, 0.0, 3)
    assert res.passed and res.max_ratio == 0.0 and res.steps == 12


def _walk_clients(graph, seed, S):
    res = run_stcd(RunConfig(eta=0.0, hops_per_sync=S, master_seed=seed), graph, *ridge_problem(N=4, d=4, K=4))
    return [h.src for h in res.trace.of_kind(Hop)]


def test_probe_passes_on_random_segments():
    ds, spec = ridge_problem(N=40, d=16, K=4)
    g = build_topology("cycle", 4)
    L = smoothness_constant(spec, ds).L
    S, Q = 5, 3
    eta = 1 / (2 * L * S * Q)
    for seed in range(50):
        theta0 = np.random.default_rng(seed).standard_normal(16)
        res = lemma_probe_surrogate(spec, ds, theta0, _walk_clients(g, seed, S), L, eta, Q)
        assert res.passed and res.max_ratio <= 1.0


def test_probe_ratio_is_scale_free():
    ds, _ = ridge_problem(N=30, d=12, K=3)
    spec = GlmSpec.ridge(0.0)
    big = type(ds)(ds.blocks, ds.labels * 10)
    L = smoothness_constant(spec, ds).L
    clients = [0, 2, 2, 1]
    theta0 = np.random.default_rng(1).standard_normal(12)
    a = lemma_probe_surrogate(spec, ds, theta0, clients, L, 1 / (2 * L * 4 * 2), 2)
    b = lemma_probe_surrogate(spec, big, 10 * theta0, clients, L, 1 / (2 * L * 4 * 2), 2)
    assert a.max_ratio == pytest.approx(b.max_ratio, rel=1e-10)


def test_probe_reports_violation():
    ds, spec = ridge_problem(N=30, d=12, K=3)
    L = smoothness_constant(spec, ds).L
    res = lemma_probe_surrogate(spec, ds, np.zeros(12), [0, 1, 2, 0], L, 10.0 / L, 5)
    assert not res.passed and res.violation is not None


# --- variance ----------------------------------------------------------------


def test_variance_full_batch_is_zero():
    ds, spec = ridge_problem(N=30, d=12, K=3)
    assert empirical_variance(spec, ds, np.ones(12), 30, 5, np.random.default_rng(0)) == 0.0


def test_variance_halves_when_batch_doubles():
    ds, spec = ridge_problem(N=200, d=10, K=2)
    theta = np.random.default_rng(0).standard_normal(10)
    v1 = empirical_variance(spec, ds, theta, 10, 10_000, np.random.default_rng(1))
    v2 = empirical_variance(spec, ds, theta, 20, 10_000, np.random.default_rng(2))
    assert 1.0 <= v1 / v2 <= 4.0


def test_variance_deterministic():
    ds, spec = ridge_problem(N=50, d=10, K=2)
    a = empirical_variance(spec, ds, np.ones(10), 5, 100, np.random.default_rng(3))
    b = empirical_variance(spec, ds, np.ones(10), 5, 100, np.random.default_rng(3))
    assert a == b


# --- CSV ---------------------------------------------------------------------


def _results(seeds, rounds=3):
    ds, spec = ridge_problem(N=20, d=8, K=4)
    f_star = solve_reference(spec, ds).f_star
    out = []
    for s in seeds:
        r = run_stcd(RunConfig(eta=1e-3, hops_per_sync=5, rounds=rounds, master_seed=s), build_topology("cycle", 4),
                     ds, spec, f_star=f_star)
        r.run_id = f"stcd-seed{s}"
        out.append(r)
    return out


def test_csv_rows_and_header(tmp_path):
    path = tmp_path / "one.csv"
    export_csv(_results([0]), path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    assert text.endswith("\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) - 2 == 3


def test_csv_round_trip(tmp_path):
    results = _results([0])
    path = tmp_path / "rt.csv"
    export_csv(results, path)
    rows = read_csv(path)
    pts = accumulate_cost(results[0].trace)
    for row, pt in zip(rows, pts):
        assert row["f_value"] == pytest.approx(pt.f_value, rel=1e-12)
        assert row["comm_cost"] == pytest.approx(pt.comm_cost, rel=1e-12)
        assert row["rel_subopt_gap"] == pytest.approx(suboptimality(pt.f_value, results[0].f_star), rel=1e-12)
        assert row["hop_iterations"] == pt.hop_iterations


def test_csv_multi_seed(tmp_path):
    path = tmp_path / "five.csv"
    export_csv(_results(range(5), rounds=2), path, extra={"variant": ["a"] * 5})
    rows = read_csv(path)
    assert {r["seed"] for r in rows} == set(range(5))
    assert all(r["variant"] == "a" for r in rows)


def test_csv_empty_results(tmp_path):
    with pytest.raises(ValueError):
        export_csv([], tmp_path / "x.csv")


def test_cost_to_reach():
    pts = [EvalPoint(1, 10, 1.0, 3.0, 0.0), EvalPoint(2, 20, 2.0, 2.05, 0.0), EvalPoint(3, 30, 3.0, 2.0, 0.0)]
    assert cost_to_reach(pts, 2.0, 0.05) == 2.0
    assert cost_to_reach(pts, 2.0, 1e-9) == 3.0
    assert cost_to_reach(pts[:1], 2.0, 0.1) == -1.0
