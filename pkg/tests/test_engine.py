import numpy as np
import pytest

from conftest import logistic_problem, ridge_problem
from tokencd.engine import (
    Eval,
    Hop,
    HopRun,
    LocalStep,
    ModelEstimate,
    RunConfig,
    SyncDownload,
    SyncUpload,
    client_server_config,
    run_mtcd,
    run_stcd,
    run_svfl_baseline,
    sync_combine,
)
from tokencd.graph import ClusterPartition, CommGraph, GraphError, build_topology
from tokencd.metrics import theorem_constants
from tokencd.objective import ModelParams, evaluate, smooth_gradient, smoothness_constant
from tokencd.token import init_zero


def single_client(ds):
    return CommGraph(1, ((),))


# --- configuration -----------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(eta=-1.0),
        dict(eta=0.1, hops_per_sync=0),
        dict(eta=0.1, local_updates=0),
        dict(eta=0.1, num_tokens=0),
        dict(eta=0.1, rounds=0),
        dict(eta=0.1, batch_size=0),
        dict(eta=0.1, sync_mode="ring"),
        dict(eta=0.1, start="fixed"),
        dict(eta=0.1, num_tokens=2, sync_disabled=True),
        dict(eta=0.1, trace_level="verbose"),
    ],
)
def test_run_config_rejects(kwargs):
    with pytest.raises(ValueError):
        RunConfig(**kwargs)


def test_sync_variant_selection():
    assert RunConfig(eta=0.1).token_sync_variant(10) == "average"
    assert RunConfig(eta=0.1, batch_size=10).token_sync_variant(10) == "average"
    assert RunConfig(eta=0.1, batch_size=5, sync_token="average").token_sync_variant(10) == "recompute"
    assert RunConfig(eta=0.1, sync_token="recompute").token_sync_variant(10) == "recompute"


# --- roaming -----------------------------------------------------------------


def test_single_client_single_step_is_plain_cd():
    ds, spec = ridge_problem(N=15, d=5, K=1)
    eta = 0.01
    res = run_mtcd(RunConfig(eta=eta), single_client(ds), ds, spec)
    expected = -eta * smooth_gradient(spec, ds, np.zeros(5))
    np.testing.assert_allclose(res.params.values, expected, rtol=1e-14, atol=0)


def test_zero_step_changes_nothing():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    g = build_topology("cycle", 4)
    S, Q = 5, 3
    seen = []
    cfg = RunConfig(eta=0.0, hops_per_sync=S, local_updates=Q, trace_level="full")
    res = run_mtcd(cfg, g, ds, spec, on_step=lambda i: seen.append(i.estimate.token.z.copy()))
    np.testing.assert_array_equal(res.params.values, 0.0)
    assert all(np.all(z == 0) for z in seen)
    assert len(res.trace.of_kind(Hop)) == S
    assert len(res.trace.of_kind(LocalStep)) == S * Q


def test_stcd_monotone_with_small_step():
    ds, spec = ridge_problem(N=50, d=20, K=4)
    g = build_topology("path", 4)
    S, Q = 6, 3
    L = smoothness_constant(spec, ds).L
    values = [evaluate(spec, ds, np.zeros(20))]

    def record(info):
        values.append(evaluate(spec, ds, info.estimate.params))

    cfg = RunConfig(eta=1 / (L * S * Q), hops_per_sync=S, local_updates=Q, rounds=8, master_seed=3)
    run_stcd(cfg, g, ds, spec, on_step=record)
    assert len(values) == 1 + 8 * S * Q
    assert np.all(np.diff(values) <= 1e-12 * values[0])
    assert values[-1] < values[0]


def test_stcd_equals_mtcd_without_sync():
    ds, spec = ridge_problem(N=30, d=12, K=6)
    g = build_topology("erdos_renyi", 6, p=0.5, seed=1)
    cfg = RunConfig(eta=1e-3, hops_per_sync=7, local_updates=2, rounds=5, master_seed=11)
    a = run_stcd(cfg, g, ds, spec)
    b = run_mtcd(cfg.replace(sync_disabled=True, start="uniform_all"), g, ds, spec)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    assert a.trace.events == b.trace.events
    assert not a.trace.of_kind(SyncUpload) and not a.trace.of_kind(SyncDownload)


def test_stcd_rejects_disconnected_graph():
    ds, spec = ridge_problem(N=10, d=4, K=4)
    with pytest.raises(GraphError):
        run_stcd(RunConfig(eta=0.1), build_topology("empty", 4), ds, spec)


def test_stcd_minibatch_keeps_token_consistent():
    ds, spec = logistic_problem(N=40, d=12, K=4)
    g = build_topology("cycle", 4)
    cfg = RunConfig(eta=1e-2, hops_per_sync=3, local_updates=2, rounds=6, batch_size=10,
                    check_consistency="step")
    res = run_stcd(cfg, g, ds, spec)
    assert res.token_size == 10


# --- syncing -----------------------------------------------------------------


def _est(values, offsets, g=0):
    p = ModelParams(np.asarray(values, dtype=float), np.asarray(offsets))
    return ModelEstimate(g, p, init_zero(1), 0)


def test_sync_combine_examples():
    off = [0, 2, 3]
    a = _est([1, 2, 3], off)
    np.testing.assert_array_equal(sync_combine([a], np.ones((2, 1)), np.array(off)).values, [1, 2, 3])
    b = _est([4, 5, 6], off, 1)
    onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(sync_combine([a, b], onehot, np.array(off)).values, [1, 2, 6])
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((3, 3))
    ests = [_est(v, off, g) for g, v in enumerate(vals)]
    out = sync_combine(ests, np.full((2, 3), 1 / 3), np.array(off)).values
    np.testing.assert_allclose(out, vals.mean(axis=0), rtol=1e-15)


def test_sync_combine_rejects_off_simplex():
    off = np.array([0, 1, 2])
    ests = [_est([1, 2], off), _est([3, 4], off, 1)]
    with pytest.raises(ValueError):
        sync_combine(ests, np.array([[0.5, 0.6], [0.5, 0.5]]), off)
    with pytest.raises(ValueError):
        sync_combine(ests, np.array([[1.5, -0.5], [0.5, 0.5]]), off)
    with pytest.raises(ValueError):
        sync_combine(ests, np.full((3, 2), 0.5), off)


def test_event_counts_average_variant():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    g = build_topology("complete", 4)
    G, S, Q, T = 3, 4, 2, 5
    cfg = RunConfig(eta=1e-3, num_tokens=G, hops_per_sync=S, local_updates=Q, rounds=T, trace_level="full")
    res = run_mtcd(cfg, g, ds, spec)
    for t in range(T):
        assert sum(isinstance(e, Hop) and e.round == t for e in res.trace) == G * S
        assert sum(isinstance(e, LocalStep) and e.round == t for e in res.trace) == G * S * Q
    ups, downs = res.trace.of_kind(SyncUpload), res.trace.of_kind(SyncDownload)
    assert [u.count for u in ups] == [G] * T
    assert [d.count for d in downs] == [G] * T
    assert len(res.trace.of_kind(Eval)) == T


def test_event_counts_recompute_variant():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    g = build_topology("path", 4)
    cfg = RunConfig(eta=1e-3, num_tokens=2, hops_per_sync=3, rounds=4, sync_token="recompute",
                    sync_mode="token_per_cluster", trace_level="compact")
    res = run_mtcd(cfg, g, ds, spec, ClusterPartition.contiguous(4, 2))
    assert [(u.round, u.count) for u in res.trace.of_kind(SyncUpload)] == [(1, 4), (2, 4), (3, 4)]
    assert [d.count for d in res.trace.of_kind(SyncDownload)] == [2] * 4
    runs = res.trace.of_kind(HopRun)
    assert len(runs) == 8 and all(r.count == 3 for r in runs)


def test_per_token_hop_order():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    cfg = RunConfig(eta=1e-3, num_tokens=2, hops_per_sync=5, rounds=3, trace_level="full")
    res = run_mtcd(cfg, build_topology("cycle", 4), ds, spec)
    for gamma in range(2):
        keys = [(e.round, e.s, getattr(e, "q", -1)) for e in res.trace
                if isinstance(e, (Hop, LocalStep)) and e.gamma == gamma]
        hops = [e for e in res.trace.of_kind(Hop) if e.gamma == gamma]
        assert [(r, s) for r, s, _ in keys] == sorted((r, s) for r, s, _ in keys)
        for a, b in zip(hops, hops[1:]):
            if a.round == b.round:
                assert b.src == a.dst


def test_client_server_recovery_matches_svfl():
    ds, spec = ridge_problem(N=30, d=12, K=4)
    base = RunConfig(eta=2e-3, local_updates=3, rounds=6, master_seed=5)
    mt = run_mtcd(client_server_config(base, 4), build_topology("empty", 4), ds, spec,
                  ClusterPartition.singletons(4))
    sv = run_svfl_baseline(base, ds, spec)
    np.testing.assert_array_equal(mt.params.values, sv.params.values)
    assert [e.f_value for e in mt.evals] == [e.f_value for e in sv.evals]


def test_svfl_single_step_is_parallel_gradient_descent():
    ds, spec = ridge_problem(N=30, d=12, K=4)
    eta, T = 2e-3, 10
    res = run_svfl_baseline(RunConfig(eta=eta, rounds=T), ds, spec)
    # monolithic oracle: full-gradient descent on the concatenated model
    theta = np.zeros(12)
    fs = []
    for _ in range(T):
        theta = theta - eta * smooth_gradient(spec, ds, theta)
        fs.append(evaluate(spec, ds, theta))
    np.testing.assert_allclose(res.params.values, theta, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose([e.f_value for e in res.evals], fs, rtol=1e-12)


def test_svfl_costs():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    res = run_svfl_baseline(RunConfig(eta=1e-3, rounds=3), ds, spec)
    assert [u.count for u in res.trace.of_kind(SyncUpload)] == [4, 4]
    assert [d.count for d in res.trace.of_kind(SyncDownload)] == [4, 4, 4]


def test_shared_stream_coupling_reproduces_single_token():
    ds, spec = ridge_problem(N=30, d=12, K=5)
    g = build_topology("cycle", 5)
    common = dict(eta=1e-3, hops_per_sync=6, local_updates=2, rounds=5, start="fixed", master_seed=4)
    one = run_mtcd(RunConfig(num_tokens=1, fixed_clients=(2,), **common), g, ds, spec)
    two = run_mtcd(RunConfig(num_tokens=2, fixed_clients=(2, 2), shared_hop_stream=True, **common), g, ds, spec)
    np.testing.assert_array_equal(one.params.values, two.params.values)


def test_token_per_cluster_block_locality():
    ds, spec = ridge_problem(N=30, d=16, K=8)
    g = build_topology("path", 8)
    part = ClusterPartition.contiguous(8, 2)
    owner = part.owner()
    first = {}
    visited = set()

    def check(info):
        th = info.estimate.params
        visited.add((info.gamma, info.client))
        outside = np.concatenate([th.block(k) for k in range(8) if owner[k] != info.gamma])
        key = (info.round, info.gamma)
        if info.round == 0:
            np.testing.assert_array_equal(outside, 0.0)
        first.setdefault(key, outside.copy())
        np.testing.assert_array_equal(outside, first[key])

    cfg = RunConfig(eta=1e-3, num_tokens=2, hops_per_sync=5, local_updates=2, rounds=4,
                    sync_mode="token_per_cluster", check_consistency="step")
    run_mtcd(cfg, g, ds, spec, part, on_step=check)
    assert all(owner[k] == gamma for gamma, k in visited)


def test_determinism_across_workers():
    ds, spec = logistic_problem(N=40, d=12, K=6)
    g = build_topology("erdos_renyi", 6, p=0.6, seed=2)
    cfg = RunConfig(eta=1e-2, num_tokens=3, hops_per_sync=4, local_updates=2, rounds=5, batch_size=16,
                    master_seed=9, trace_level="full")
    a = run_mtcd(cfg, g, ds, spec)
    b = run_mtcd(cfg.replace(workers=3), g, ds, spec)
    c = run_mtcd(cfg, g, ds, spec)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    assert a.trace.events == b.trace.events == c.trace.events
    d = run_mtcd(cfg.replace(master_seed=10), g, ds, spec)
    assert not np.array_equal(a.params.values, d.params.values)


def test_mismatch_errors():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    g = build_topology("path", 4)
    cfg = RunConfig(eta=1e-3, num_tokens=3, sync_mode="token_per_cluster")
    with pytest.raises(GraphError):
        run_mtcd(cfg, g, ds, spec, ClusterPartition.contiguous(4, 2))
    with pytest.raises(GraphError):
        run_mtcd(cfg.replace(num_tokens=2), g, ds, spec)
    # clients 0 and 2 are not adjacent on the path
    with pytest.raises(GraphError):
        run_mtcd(cfg.replace(num_tokens=2), g, ds, spec, ClusterPartition.from_lists([[0, 2], [1, 3]]))
    with pytest.raises(GraphError):
        run_mtcd(RunConfig(eta=1e-3), build_topology("empty", 4), ds, spec)
    with pytest.raises(GraphError):
        run_mtcd(RunConfig(eta=1e-3), build_topology("path", 3), ds, spec)


def test_stop_rule_ends_run():
    ds, spec = ridge_problem(N=20, d=8, K=4)
    res = run_stcd(RunConfig(eta=1e-3, rounds=50), build_topology("cycle", 4), ds, spec,
                   stop=lambda ev: ev.round >= 3)
    assert [e.round for e in res.evals] == [1, 2, 3]


def test_expected_descent_over_seeds():
    ds, spec = ridge_problem(N=40, d=16, K=4)
    g = build_topology("cycle", 4)
    L = smoothness_constant(spec, ds).L
    S, Q = 4, 2
    tc = theorem_constants(L, 1.0, S, Q, g)
    cfg = RunConfig(eta=tc.eta_max, hops_per_sync=S, local_updates=Q, num_tokens=2, rounds=6)
    f0 = evaluate(spec, ds, np.zeros(16))
    curves = []
    for seed in range(20):
        res = run_mtcd(cfg.replace(master_seed=seed), g, ds, spec)
        curves.append([f0] + [e.f_value for e in res.evals])
    diffs = np.diff(np.array(curves), axis=1).mean(axis=0)
    assert np.all(diffs < 0)
