"""Protocol simulation for single- and multi-token coordinate descent.

A round of the multi-token protocol is: the server builds the token for the
current model, dispatches ``num_tokens`` copies to start clients, every copy
roams ``hops_per_sync`` hops doing ``local_updates`` block steps per visit, and
the server combines the returned model estimates.  The single-token method is
the same loop with syncing switched off and one token; the synchronous
vertical-FL baseline is implemented separately as an independent reference.

All randomness comes from per-purpose child streams of ``master_seed``
(``(0, round)`` for batches, ``(1, round, token)`` for start client and hops),
so results do not depend on how tokens are scheduled across workers.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FeatureDataset, sample_batch
from .graph import ClusterPartition, CommGraph, GraphError, is_connected, sample_next
from .objective import GlmSpec, ModelParams, cd_step, evaluate, partial_gradient, prox_l1, stationarity_norm
from .token import (
    Token,
    apply_block_delta,
    average,
    check_consistency,
    combine_disjoint,
    init_zero,
    recompute,
)

__all__ = [
    "RunConfig",
    "ModelEstimate",
    "Hop",
    "HopRun",
    "LocalStep",
    "SyncUpload",
    "SyncDownload",
    "Eval",
    "EventTrace",
    "RunResult",
    "StepInfo",
    "child_rng",
    "token_roaming",
    "sync_combine",
    "run_stcd",
    "run_mtcd",
    "run_svfl_baseline",
    "client_server_config",
]


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True, slots=True)
class Hop:
    round: int
    gamma: int
    s: int
    src: int
    dst: int


@dataclass(frozen=True, slots=True)
class HopRun:
    """``count`` consecutive hops of one token, ``moves`` of which changed client."""

    round: int
    gamma: int
    count: int
    moves: int


@dataclass(frozen=True, slots=True)
class LocalStep:
    round: int
    gamma: int
    s: int
    q: int
    client: int


@dataclass(frozen=True, slots=True)
class SyncUpload:
    round: int
    count: int
    payload_units: float = 1.0


@dataclass(frozen=True, slots=True)
class SyncDownload:
    round: int
    count: int
    payload_units: float = 1.0


@dataclass(frozen=True, slots=True)
class Eval:
    round: int
    f_value: float
    grad_norm: float


@dataclass
class EventTrace:
    events: list = field(default_factory=list)

    def append(self, ev) -> None:
        self.events.append(ev)

    def extend(self, evs) -> None:
        self.events.extend(evs)

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, kind) -> list:
        return [e for e in self.events if isinstance(e, kind)]


# ---------------------------------------------------------------------------
# configuration and state

SYNC_MODES = ("token_per_cluster", "overlapping")
STARTS = ("uniform_all", "uniform_cluster", "fixed")
SYNC_TOKENS = ("auto", "recompute", "average")
TRACE_LEVELS = ("full", "hops", "compact")
CHECK_LEVELS = ("off", "sync", "step")


@dataclass(frozen=True)
class RunConfig:
    eta: float
    hops_per_sync: int = 1
    local_updates: int = 1
    num_tokens: int = 1
    rounds: int = 1
    batch_size: int | None = None
    sync_mode: str = "overlapping"
    start: str | None = None
    fixed_clients: tuple[int, ...] | None = None
    master_seed: int = 0
    eval_every: int = 1
    sync_token: str = "auto"
    sync_disabled: bool = False
    shared_hop_stream: bool = False
    trace_level: str = "hops"
    check_consistency: str = "sync"
    workers: int = 1

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        for name in ("hops_per_sync", "local_updates", "num_tokens", "rounds", "eval_every", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None for full batch")
        if self.sync_mode not in SYNC_MODES:
            raise ValueError(f"sync_mode must be one of {SYNC_MODES}")
        if self.start is not None and self.start not in STARTS:
            raise ValueError(f"start must be one of {STARTS}")
        if self.start == "fixed" and (self.fixed_clients is None or len(self.fixed_clients) != self.num_tokens):
            raise ValueError("fixed start needs one client per token")
        if self.sync_token not in SYNC_TOKENS:
            raise ValueError(f"sync_token must be one of {SYNC_TOKENS}")
        if self.trace_level not in TRACE_LEVELS:
            raise ValueError(f"trace_level must be one of {TRACE_LEVELS}")
        if self.check_consistency not in CHECK_LEVELS:
            raise ValueError(f"check_consistency must be one of {CHECK_LEVELS}")
        if self.sync_disabled and self.num_tokens != 1:
            raise ValueError("roaming without syncs supports a single token only")

    @property
    def start_policy(self) -> str:
        if self.start is not None:
            return self.start
        return "uniform_cluster" if self.sync_mode == "token_per_cluster" else "uniform_all"

    def token_sync_variant(self, num_samples: int) -> str:
        """``recompute`` or ``average``; mini-batches always recompute."""
        stochastic = self.batch_size is not None and self.batch_size < num_samples
        if stochastic or self.sync_token == "recompute":
            return "recompute"
        return "average"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ModelEstimate:
    gamma: int
    params: ModelParams
    token: Token
    client: int


@dataclass(frozen=True)
class StepInfo:
    """Passed to ``on_step`` callbacks after every local update."""

    round: int
    gamma: int
    s: int
    q: int
    client: int
    estimate: ModelEstimate


@dataclass
class RunResult:
    algorithm: str
    seed: int
    config: RunConfig
    params: ModelParams
    trace: EventTrace
    num_clients: int
    token_size: int
    f_star: float | None = None
    run_id: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def evals(self) -> list[Eval]:
        return self.trace.of_kind(Eval)


StepCallback = Callable[[StepInfo], None]
StopRule = Callable[[Eval], bool]


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# roaming


@dataclass
class _RoundData:
    """Per-round data a token needs: block rows of the active samples and labels."""

    spec: GlmSpec
    blocks: Sequence[np.ndarray]
    labels: np.ndarray
    scale: float


def _round_data(spec: GlmSpec, dataset: FeatureDataset, rows: np.ndarray) -> _RoundData:
    if rows.size == dataset.num_samples:
        return _RoundData(spec, dataset.blocks, dataset.labels, 1.0)
    return _RoundData(
        spec, [Xk[rows] for Xk in dataset.blocks], dataset.labels[rows], dataset.num_samples / rows.size
    )


def _local_updates(
    est: ModelEstimate,
    k: int,
    Q: int,
    eta: float,
    data: _RoundData,
    events: list | None,
    round_idx: int,
    s: int,
    on_step: StepCallback | None,
) -> None:
    spec = data.spec
    Xk = data.blocks[k]
    lo, hi = est.params.offsets[k], est.params.offsets[k + 1]
    theta = est.params.values
    tok = est.token
    for q in range(Q):
        old = theta[lo:hi].copy()
        new = cd_step(old, partial_gradient(spec, Xk, tok.z, old, data.labels, data.scale), eta)
        if spec.uses_prox:
            new = prox_l1(new, eta * spec.beta)
        theta[lo:hi] = new
        apply_block_delta(tok, Xk, old, new)
        if events is not None:
            events.append(LocalStep(round_idx, est.gamma, s, q, k))
        if on_step is not None:
            on_step(StepInfo(round_idx, est.gamma, s, q, k, est))


def token_roaming(
    estimate: ModelEstimate,
    view: CommGraph,
    members: Sequence[int] | None,
    cfg: RunConfig,
    data: _RoundData,
    rng: np.random.Generator,
    round_idx: int = 0,
    on_step: StepCallback | None = None,
) -> tuple[ModelEstimate, list]:
    """Roam ``cfg.hops_per_sync`` hops over ``view``, updating ``estimate`` in place.

    ``members[i]`` is the global client id of node ``i`` of ``view`` (``None``
    when ``view`` is the global graph).  Returns the estimate, now holding the
    id of its final client, and the events it produced in order.
    """
    events: list = []
    step_events = events if cfg.trace_level == "full" else None
    glob = (lambda i: i) if members is None else (lambda i: members[i])
    local = estimate.client if members is None else list(members).index(estimate.client)
    moves = 0
    for s in range(cfg.hops_per_sync):
        k = glob(local)
        _local_updates(estimate, k, cfg.local_updates, cfg.eta, data, step_events, round_idx, s, on_step)
        nxt = sample_next(view, local, rng)
        dst = glob(nxt)
        moves += dst != k
        if cfg.trace_level != "compact":
            events.append(Hop(round_idx, estimate.gamma, s, k, dst))
        local = nxt
    if cfg.trace_level == "compact":
        events.append(HopRun(round_idx, estimate.gamma, cfg.hops_per_sync, moves))
    estimate.client = glob(local)
    return estimate, events


# ---------------------------------------------------------------------------
# syncing


def sync_combine(estimates: Sequence[ModelEstimate], weights: np.ndarray, offsets: np.ndarray) -> ModelParams:
    """``theta_k = sum_g weights[k, g] * theta_k(g)`` for every client ``k``.

    Rows of ``weights`` must lie in the probability simplex.  One-hot rows copy
    the owning estimate's block exactly.
    """
    G = len(estimates)
    weights = np.asarray(weights, dtype=np.float64)
    K = len(offsets) - 1
    if weights.shape != (K, G):
        raise ValueError(f"weights must have shape ({K}, {G})")
    if np.any(weights < -1e-12) or np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("every weight row must lie in the probability simplex")
    if G == 1:
        return estimates[0].params.copy()
    out = np.empty_like(estimates[0].params.values)
    stacked = np.stack([e.params.values for e in estimates])
    uniform = np.allclose(weights, 1.0 / G, rtol=0, atol=1e-15)
    for k in range(K):
        lo, hi = offsets[k], offsets[k + 1]
        w = weights[k]
        hot = np.flatnonzero(w == 1.0)
        if hot.size == 1:
            out[lo:hi] = stacked[hot[0], lo:hi]
        elif uniform:
            out[lo:hi] = stacked[:, lo:hi].mean(axis=0)
        else:
            out[lo:hi] = w @ stacked[:, lo:hi]
    fusion = estimates[0].params.fusion
    if fusion.size:
        fusion = np.mean([e.params.fusion for e in estimates], axis=0)
    return ModelParams(out, offsets, fusion.copy())


def _sync_weights(cfg: RunConfig, K: int, partition: ClusterPartition | None) -> np.ndarray:
    G = cfg.num_tokens
    if cfg.sync_mode == "overlapping":
        return np.full((K, G), 1.0 / G)
    w = np.zeros((K, G))
    w[np.arange(K), partition.owner()] = 1.0
    return w


# ---------------------------------------------------------------------------
# runners


def _views(cfg: RunConfig, graph: CommGraph, partition: ClusterPartition | None):
    """Per-token (graph view, member ids) pairs."""
    if cfg.sync_mode == "token_per_cluster":
        if partition is None:
            raise GraphError("token_per_cluster needs a cluster partition")
        if len(partition.clusters) != cfg.num_tokens:
            raise GraphError(
                f"token_per_cluster needs one token per cluster: {len(partition.clusters)} clusters, "
                f"{cfg.num_tokens} tokens"
            )
        views = []
        for c, sub in zip(partition.clusters, partition.subgraphs(graph)):
            if not is_connected(sub):
                raise GraphError(f"cluster {list(c)} induces a disconnected subgraph")
            views.append((sub, tuple(c)))
        return views
    if not is_connected(graph):
        raise GraphError("overlapping tokens need a connected communication graph")
    return [(graph, None)] * cfg.num_tokens


def _start_client(cfg: RunConfig, gamma: int, K: int, members, rng: np.random.Generator) -> int:
    policy = cfg.start_policy
    if policy == "fixed":
        k = int(cfg.fixed_clients[gamma])
        if members is not None and k not in members:
            raise GraphError(f"fixed start client {k} is outside the cluster of token {gamma}")
        return k
    if policy == "uniform_cluster":
        if members is None:
            return int(rng.integers(K))
        return int(members[int(rng.integers(len(members)))])
    return int(rng.integers(K))


def _check(tok: Token, dataset: FeatureDataset, params: ModelParams) -> None:
    """Token consistency check; skipped once the run has overflowed to inf/nan."""
    if np.all(np.isfinite(params.values)) and np.isfinite(np.linalg.norm(tok.z)):
        check_consistency(tok, dataset, params)


def _with_step_check(cfg: RunConfig, dataset: FeatureDataset, on_step: StepCallback | None):
    """In ``check_consistency="step"`` mode, verify the token after every local step."""
    if cfg.check_consistency != "step":
        return on_step

    def checked(info: StepInfo) -> None:
        _check(info.estimate.token, dataset, info.estimate.params)
        if on_step is not None:
            on_step(info)

    return checked


def _should_eval(cfg: RunConfig, t: int) -> bool:
    return (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1


def _eval(spec: GlmSpec, dataset: FeatureDataset, params: ModelParams, round_idx: int) -> Eval:
    return Eval(round_idx, evaluate(spec, dataset, params), stationarity_norm(spec, dataset, params))


def _batch_rows(cfg: RunConfig, N: int, t: int) -> np.ndarray:
    if cfg.batch_size is None or cfg.batch_size >= N:
        return np.arange(N)
    return sample_batch(N, cfg.batch_size, child_rng(cfg.master_seed, 0, t))


def run_mtcd(
    cfg: RunConfig,
    graph: CommGraph,
    dataset: FeatureDataset,
    spec: GlmSpec,
    partition: ClusterPartition | None = None,
    *,
    f_star: float | None = None,
    on_step: StepCallback | None = None,
    stop: StopRule | None = None,
    algorithm: str = "mtcd",
) -> RunResult:
    """Multi-token coordinate descent (single-token roaming when ``cfg.sync_disabled``).

    ``stop`` is called with every ``Eval`` event; returning True ends the run
    after that round.
    """
    K, N = dataset.num_blocks, dataset.num_samples
    if graph.num_clients != K:
        raise GraphError(f"graph has {graph.num_clients} clients, dataset has {K} blocks")
    views = _views(cfg, graph, partition)
    weights = _sync_weights(cfg, K, partition)
    on_step = _with_step_check(cfg, dataset, on_step)
    variant = cfg.token_sync_variant(N)
    G = cfg.num_tokens
    trace = EventTrace()
    theta = ModelParams.zeros(dataset)
    token: Token | None = None
    roaming: ModelEstimate | None = None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 and G > 1 else None

    try:
        for t in range(cfg.rounds):
            rows = _batch_rows(cfg, N, t)
            data = _round_data(spec, dataset, rows)

            if cfg.sync_disabled:
                rng = child_rng(cfg.master_seed, 1, t, 0)
                if roaming is None:
                    view, members = views[0]
                    start = _start_client(cfg, 0, K, members, rng)
                    roaming = ModelEstimate(0, theta, init_zero(rows.size, rows), start)
                elif not np.array_equal(roaming.token.rows, rows):
                    # a fresh batch means rebuilding the token from scratch
                    roaming.token = recompute(dataset, roaming.params, rows)
                _, evs = token_roaming(roaming, views[0][0], views[0][1], cfg, data, rng, t, on_step)
                trace.extend(evs)
                theta = roaming.params
                if cfg.check_consistency != "off":
                    _check(roaming.token, dataset, theta)
            else:
                if t > 0 and (variant == "recompute" or not np.array_equal(token.rows, rows)):
                    token = recompute(dataset, theta, rows)
                    trace.append(SyncUpload(t, K))
                elif t == 0:
                    token = init_zero(rows.size, rows)
                trace.append(SyncDownload(t, G))

                rngs = [child_rng(cfg.master_seed, 1, t, 0 if cfg.shared_hop_stream else g) for g in range(G)]
                estimates = []
                for g in range(G):
                    start = _start_client(cfg, g, K, views[g][1], rngs[g])
                    estimates.append(ModelEstimate(g, theta.copy(), token.copy(), start))

                def roam(g: int):
                    return token_roaming(estimates[g], views[g][0], views[g][1], cfg, data, rngs[g], t, on_step)

                results = list(pool.map(roam, range(G))) if pool is not None else [roam(g) for g in range(G)]
                for _, evs in results:
                    trace.extend(evs)
                if cfg.check_consistency != "off":
                    for e in estimates:
                        _check(e.token, dataset, e.params)

                theta = sync_combine(estimates, weights, dataset.offsets)
                if variant == "average":
                    trace.append(SyncUpload(t, G))
                    if cfg.sync_mode == "overlapping":
                        token = average([e.token for e in estimates])
                    else:
                        token = combine_disjoint(token, [e.token for e in estimates])
                    if cfg.check_consistency != "off":
                        _check(token, dataset, theta)

            if _should_eval(cfg, t):
                ev = _eval(spec, dataset, theta, t + 1)
                trace.append(ev)
                if stop is not None and stop(ev):
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(
        algorithm=algorithm,
        seed=cfg.master_seed,
        config=cfg,
        params=theta,
        trace=trace,
        num_clients=K,
        token_size=token.size if not cfg.sync_disabled else roaming.token.size,
        f_star=f_star,
        metadata={
            "sync_variant": "none" if cfg.sync_disabled else variant,
            "er_attempts": graph.metadata.get("er_attempts"),
        },
    )


def run_stcd(
    cfg: RunConfig,
    graph: CommGraph,
    dataset: FeatureDataset,
    spec: GlmSpec,
    *,
    f_star: float | None = None,
    on_step: StepCallback | None = None,
    stop: StopRule | None = None,
) -> RunResult:
    """Single token roaming the whole graph with no server contact.

    ``cfg.rounds`` segments of ``cfg.hops_per_sync`` hops are run back to back;
    segments only set the evaluation and RNG-stream granularity.
    """
    if cfg.num_tokens != 1:
        raise ValueError("single-token roaming uses exactly one token")
    if not is_connected(graph):
        raise GraphError("single-token roaming needs a connected graph")
    cfg = cfg.replace(sync_disabled=True, sync_mode="overlapping",
                      start=cfg.start if cfg.start == "fixed" else "uniform_all")
    return run_mtcd(cfg, graph, dataset, spec, f_star=f_star, on_step=on_step, stop=stop,
                    algorithm="stcd")


def client_server_config(cfg: RunConfig, K: int) -> RunConfig:
    """MTCD settings that reduce to full-participation client-server training.

    One token per client, one hop per round, server-side token recomputation.
    Use with a graph without edges and :meth:`ClusterPartition.singletons`.
    """
    return cfg.replace(num_tokens=K, hops_per_sync=1, sync_mode="token_per_cluster",
                       sync_token="recompute", sync_disabled=False, start=None)


def run_svfl_baseline(
    cfg: RunConfig,
    dataset: FeatureDataset,
    spec: GlmSpec,
    *,
    f_star: float | None = None,
    on_step: StepCallback | None = None,
    stop: StopRule | None = None,
) -> RunResult:
    """Synchronous vertical FL: every client takes ``Q`` local steps per round.

    Each client starts from the round's server token and only refreshes its own
    contribution; other clients' contributions stay stale until the server
    recomputes the token.  Costs ``K`` uploads and ``K`` downloads per round.
    """
    K, N = dataset.num_blocks, dataset.num_samples
    trace = EventTrace()
    theta = ModelParams.zeros(dataset)
    token: Token | None = None
    on_step = _with_step_check(cfg, dataset, on_step)
    for t in range(cfg.rounds):
        rows = _batch_rows(cfg, N, t)
        data = _round_data(spec, dataset, rows)
        if t > 0:
            token = recompute(dataset, theta, rows)
            trace.append(SyncUpload(t, K))
        else:
            token = init_zero(rows.size, rows)
        trace.append(SyncDownload(t, K))
        step_events = [] if cfg.trace_level == "full" else None
        new = theta.copy()
        for k in range(K):
            local = ModelEstimate(k, theta.copy(), token.copy(), k)
            _local_updates(local, k, cfg.local_updates, cfg.eta, data, step_events, t, 0, on_step)
            new.values[new.offsets[k] : new.offsets[k + 1]] = local.params.block(k)
        if step_events:
            trace.extend(step_events)
        theta = new
        if _should_eval(cfg, t):
            ev = _eval(spec, dataset, theta, t + 1)
            trace.append(ev)
            if stop is not None and stop(ev):
                break
    return RunResult(
        algorithm="svfl",
        seed=cfg.master_seed,
        config=cfg,
        params=theta,
        trace=trace,
        num_clients=K,
        token_size=token.size,
        f_star=f_star,
        metadata={"sync_variant": "recompute"},
    )
