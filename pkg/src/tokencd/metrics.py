"""Suboptimality, communication cost, step-size constants, surrogate-offset probes and CSV output."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FeatureDataset, sample_batch
from .engine import Eval, Hop, HopRun, RunResult, SyncDownload, SyncUpload
from .graph import ClusterPartition, CommGraph, rho_bound
from .objective import GlmSpec, smooth_gradient

__all__ = [
    "CostModel",
    "EvalPoint",
    "TheoremConstants",
    "ProbeResult",
    "CSV_COLUMNS",
    "suboptimality",
    "accumulate_cost",
    "theorem_constants",
    "lemma_probe_surrogate",
    "empirical_variance",
    "export_csv",
    "read_csv",
    "cost_to_reach",
    "eval_rows",
    "c0_positive_condition",
]

CSV_COLUMNS = (
    "run_id",
    "seed",
    "algorithm",
    "round",
    "hop_iterations",
    "comm_cost",
    "f_value",
    "rel_subopt_gap",
    "grad_norm",
)


@dataclass(frozen=True)
class CostModel:
    """Per-message costs in units of one token-sized message.

    ``charge_self_hops=False`` stops charging lazy-walk hops that stay on the
    same client (no message is actually sent).
    """

    c2s_cost: float = 1.0
    c2c_cost: float = 0.01
    unit_size: int = 1
    charge_self_hops: bool = True

    def __post_init__(self):
        if self.c2s_cost < 0 or self.c2c_cost < 0:
            raise ValueError("costs must be nonnegative")

    @classmethod
    def from_ratio(cls, ratio: float, **kw) -> "CostModel":
        """``ratio`` is C2S cost over C2C cost, with C2S fixed at 1."""
        if ratio <= 0:
            raise ValueError("cost ratio must be positive")
        return cls(1.0, 1.0 / ratio, **kw)


@dataclass(frozen=True)
class EvalPoint:
    round: int
    hop_iterations: int
    comm_cost: float
    f_value: float
    grad_norm: float


def suboptimality(f_val: float, f_star: float) -> float:
    """Relative gap ``(f - f*) / f*``; falls back to ``f - f*`` with a warning if ``f* <= 0``."""
    if f_star > 0:
        return (f_val - f_star) / f_star
    warnings.warn(f"f_star={f_star!r} is not positive; reporting the absolute gap", RuntimeWarning, stacklevel=2)
    return f_val - f_star


def accumulate_cost(trace, model: CostModel = CostModel()) -> list[EvalPoint]:
    """Cumulative hop count and communication cost at every ``Eval`` event."""
    hops = 0
    cost = 0.0
    out = []
    for ev in trace:
        if isinstance(ev, Hop):
            hops += 1
            if model.charge_self_hops or ev.src != ev.dst:
                cost += model.c2c_cost
        elif isinstance(ev, HopRun):
            hops += ev.count
            cost += model.c2c_cost * (ev.count if model.charge_self_hops else ev.moves)
        elif isinstance(ev, (SyncUpload, SyncDownload)):
            cost += model.c2s_cost * ev.count * ev.payload_units
        elif isinstance(ev, Eval):
            out.append(EvalPoint(ev.round, hops, cost, ev.f_value, ev.grad_norm))
    return out


# ---------------------------------------------------------------------------
# step-size constants


@dataclass(frozen=True)
class TheoremConstants:
    L: float
    eta: float
    S: int
    Q: int
    rho: float
    rho_branch: str
    p: float
    C1: float
    C2: float
    C0: float
    eta_max: float
    variant: str
    delta: float | None = None

    @property
    def eta_ok(self) -> bool:
        return self.eta < self.eta_max

    @property
    def valid(self) -> bool:
        return self.eta_ok and self.C0 > 0

    def descent_bound(self, T: int) -> float | None:
        """``delta / (C0 * T)``, the averaged squared-gradient bound after ``T`` rounds."""
        if self.delta is None or not self.C0 > 0:
            return None
        return self.delta / (self.C0 * T)


def _constants(L: float, eta: float, S: int, Q: int, rho: float, p: float):
    e = math.e
    eta_max = rho / ((L + 1) * S * Q * (rho + S * e * (1 + e)))
    c1 = eta * e * L * S * Q
    a = eta * L * S * Q
    c2 = eta * Q * (rho * (1 - a) - S * c1 * (1 + a * c1))
    return c1, c2, p * c2, eta_max


def theorem_constants(
    L: float,
    eta: float,
    S: int,
    Q: int,
    graph: CommGraph,
    partition: ClusterPartition | None = None,
    start: str = "uniform",
    *,
    delta: float | None = None,
    normalization: str = "closed",
) -> TheoremConstants:
    """Constants of the exact-gradient convergence guarantee.

    With a partition the walk of each token is confined to its cluster and
    ``rho`` is the smallest per-cluster bound; without one ``rho`` comes from
    the global graph.  ``p`` is the smallest start probability of any client:
    ``1 / max cluster size`` (or ``1 / K``) for uniform starts.  A fixed start
    gives ``p = 0`` unless every roaming domain is a single client.
    """
    if L <= 0 or eta < 0 or S < 1 or Q < 1:
        raise ValueError("need L > 0, eta >= 0, S >= 1, Q >= 1")
    if partition is not None:
        pairs = [rho_bound(sub, S, normalization) for sub in partition.subgraphs(graph)]
        rho, branch = min(pairs, key=lambda rb: rb[0])
        largest = max(len(c) for c in partition.clusters)
        variant = "token_per_cluster"
    else:
        rho, branch = rho_bound(graph, S, normalization)
        largest = graph.num_clients
        variant = "overlapping"
    if start == "uniform":
        p = 1.0 / largest
    elif start == "fixed":
        p = 1.0 if largest == 1 else 0.0
    else:
        raise ValueError("start must be 'uniform' or 'fixed'")
    c1, c2, c0, eta_max = _constants(L, eta, S, Q, rho, p)
    return TheoremConstants(L, eta, S, Q, rho, branch, p, c1, c2, c0, eta_max, variant, delta)


def c0_positive_condition(L: float, eta: float, S: int, Q: int, rho: float) -> bool:
    """Sufficient condition for a positive ``C0`` in terms of ``eta L S Q``."""
    a = eta * L * S * Q
    return a < min(rho / (2 * (math.e * S + rho)), (rho / (2 * math.e**2 * S)) ** (1 / 3))


# ---------------------------------------------------------------------------
# surrogate-offset probe


@dataclass(frozen=True)
class ProbeResult:
    passed: bool
    max_ratio: float
    violation: tuple[int, int] | None
    steps: int


def lemma_probe_surrogate(
    spec: GlmSpec,
    dataset: FeatureDataset,
    theta0: np.ndarray,
    clients: Sequence[int],
    L: float,
    eta: float,
    Q: int,
    *,
    tol: float = 1e-12,
) -> ProbeResult:
    """Replay one exact-gradient roaming segment and check the surrogate offset bound.

    ``clients[s]`` is the client visited at hop ``s`` (``S = len(clients)``).
    At every local step the block gradient at the current point minus the
    block gradient at the segment start must have norm at most
    ``eta e L S Q`` times the full gradient norm at the segment start.
    Returns the largest observed ratio.
    """
    S = len(clients)
    off = dataset.offsets
    v = np.array(theta0, dtype=np.float64, copy=True)
    g0 = smooth_gradient(spec, dataset, v)
    g0_norm = float(np.linalg.norm(g0))
    c1 = eta * math.e * L * S * Q
    cap = c1 * g0_norm
    worst = 0.0
    violation = None
    for s, k in enumerate(clients):
        lo, hi = off[k], off[k + 1]
        for q in range(Q):
            g = smooth_gradient(spec, dataset, v)
            delta = float(np.linalg.norm(g[lo:hi] - g0[lo:hi]))
            if cap > 0:
                worst = max(worst, delta / cap)
            if delta > cap * (1 + tol) and violation is None:
                violation = (s, q)
            v[lo:hi] -= eta * g[lo:hi]
    return ProbeResult(violation is None, worst, violation, S * Q)


# ---------------------------------------------------------------------------
# variance


def empirical_variance(
    spec: GlmSpec,
    dataset: FeatureDataset,
    theta,
    B: int,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo mean of ``||grad(theta; batch) - grad(theta)||^2`` over random batches."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    N = dataset.num_samples
    if B == N:
        return 0.0
    full = smooth_gradient(spec, dataset, theta)
    acc = 0.0
    for _ in range(trials):
        rows = sample_batch(N, B, rng)
        d = smooth_gradient(spec, dataset, theta, rows) - full
        acc += float(d @ d)
    return acc / trials


# ---------------------------------------------------------------------------
# CSV


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def eval_rows(result: RunResult, model: CostModel):
    f_star = result.f_star
    for pt in accumulate_cost(result.trace, model):
        if f_star is None:
            gap = float("nan")
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                gap = suboptimality(pt.f_value, f_star)
        yield [
            result.run_id,
            str(result.seed),
            result.algorithm,
            str(pt.round),
            str(pt.hop_iterations),
            _fmt(pt.comm_cost),
            _fmt(pt.f_value),
            _fmt(gap),
            _fmt(pt.grad_norm),
        ]


def export_csv(results: Sequence[RunResult], path, model: CostModel = CostModel(), extra: dict | None = None) -> None:
    """One row per evaluation point; values carry 17 significant digits.

    ``extra`` maps additional column names to per-result value lists (one
    value per result) and is appended after the standard columns.
    """
    if not results:
        raise ValueError("no results to export")
    extra = extra or {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + list(extra))
        for i, res in enumerate(results):
            tail = [_fmt(vals[i]) if not isinstance(vals[i], str) else vals[i] for vals in extra.values()]
            for row in eval_rows(res, model):
                w.writerow(row + tail)


def read_csv(path) -> list[dict]:
    """Parse a file written by :func:`export_csv`; numeric columns become numbers."""
    ints = {"seed", "round", "hop_iterations"}
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k in ints:
                    rec[k] = int(v)
                elif k in ("run_id", "algorithm"):
                    rec[k] = v
                else:
                    try:
                        rec[k] = float(v)
                    except ValueError:
                        rec[k] = v
            out.append(rec)
    return out


def cost_to_reach(points: Sequence[EvalPoint], f_star: float, threshold: float) -> float:
    """Cumulative cost at the first evaluation whose relative gap is at most ``threshold``; -1 if never."""
    for pt in points:
        if (pt.f_value - f_star) / f_star <= threshold:
            return pt.comm_cost
    return -1.0
