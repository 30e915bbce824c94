"""Communication graphs and lazy random-walk analytics.

Every walk in this package is the *lazy* walk: from node ``k`` the token moves
to each member of the closed neighbourhood ``N(k) | {k}`` with probability
``1 / (deg(k) + 1)``.  The self-hop makes the chain aperiodic on any graph.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

MAX_DENSE_NODES = 4096
MAX_POWER_NODES = 64
MAX_ER_ATTEMPTS = 1000
MIXING_TIME_CAP = 10**6

__all__ = [
    "CommGraph",
    "ClusterPartition",
    "WalkAnalytics",
    "GraphError",
    "build_topology",
    "lazy_transition_row",
    "lazy_transition_matrix",
    "sample_next",
    "is_connected",
    "stationary_distribution",
    "second_eigenvalue",
    "algebraic_connectivity",
    "mixing_time_bound",
    "mixing_time_exact",
    "rho_bound",
    "walk_analytics",
    "write_edge_list",
]


class GraphError(ValueError):
    """Raised for invalid topologies or analytics on unsupported graphs."""


@dataclass(frozen=True)
class CommGraph:
    """Undirected simple graph over clients ``0 .. num_clients-1``.

    ``adjacency[k]`` is the sorted tuple of neighbours of ``k``; self-loops are
    never stored (laziness is added by the walk, not the graph).
    """

    num_clients: int
    adjacency: tuple[tuple[int, ...], ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.num_clients < 1:
            raise GraphError("a graph needs at least one node")
        if len(self.adjacency) != self.num_clients:
            raise GraphError("adjacency length does not match num_clients")
        for k, nbrs in enumerate(self.adjacency):
            if list(nbrs) != sorted(set(nbrs)):
                raise GraphError(f"neighbours of {k} must be sorted and distinct")
            for j in nbrs:
                if not 0 <= j < self.num_clients:
                    raise GraphError(f"node id {j} out of range")
                if j == k:
                    raise GraphError(f"self-loop stored at node {k}")
                if k not in self.adjacency[j]:
                    raise GraphError(f"edge {k}-{j} is not symmetric")

    @classmethod
    def from_edges(cls, num_clients: int, edges: Iterable[tuple[int, int]], **metadata) -> "CommGraph":
        nbrs: list[set[int]] = [set() for _ in range(num_clients)]
        for i, j in edges:
            if i == j:
                continue
            if not (0 <= i < num_clients and 0 <= j < num_clients):
                raise GraphError(f"edge ({i}, {j}) out of range for K={num_clients}")
            nbrs[i].add(j)
            nbrs[j].add(i)
        return cls(num_clients, tuple(tuple(sorted(s)) for s in nbrs), dict(metadata))

    @property
    def edge_count(self) -> int:
        return sum(len(n) for n in self.adjacency) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.adjacency], dtype=np.int64)

    @cached_property
    def closed(self) -> tuple[tuple[int, ...], ...]:
        """Sorted closed neighbourhoods, ``closed[k] = N(k) | {k}``."""
        return tuple(tuple(sorted(n + (k,))) for k, n in enumerate(self.adjacency))

    def closed_neighbourhood(self, k: int) -> tuple[int, ...]:
        self._check_node(k)
        return self.closed[k]

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_clients, self.num_clients))
        for i, j in self.edges():
            a[i, j] = a[j, i] = 1.0
        return a

    def induced_subgraph(self, nodes: Sequence[int]) -> "CommGraph":
        """Subgraph on ``nodes``, relabelled to ``0 .. len(nodes)-1`` in the given order."""
        local = {int(n): i for i, n in enumerate(nodes)}
        if len(local) != len(nodes):
            raise GraphError("duplicate nodes in subgraph request")
        for n in local:
            self._check_node(n)
        edges = [(local[i], local[j]) for i, j in self.edges() if i in local and j in local]
        return CommGraph.from_edges(len(nodes), edges)

    def _check_node(self, k: int) -> None:
        if not 0 <= k < self.num_clients:
            raise GraphError(f"invalid node id {k} for K={self.num_clients}")


@dataclass(frozen=True)
class ClusterPartition:
    """Disjoint client clusters, one token per cluster."""

    clusters: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for c in self.clusters:
            if not c:
                raise GraphError("clusters must be nonempty")
            if seen.intersection(c) or len(set(c)) != len(c):
                raise GraphError("clusters must be pairwise disjoint")
            seen.update(c)
        if seen != set(range(len(seen))):
            raise GraphError("clusters must cover clients 0..K-1 exactly")

    @classmethod
    def from_lists(cls, clusters: Iterable[Iterable[int]]) -> "ClusterPartition":
        return cls(tuple(tuple(sorted(int(k) for k in c)) for c in clusters))

    @classmethod
    def contiguous(cls, num_clients: int, num_clusters: int) -> "ClusterPartition":
        if not 1 <= num_clusters <= num_clients:
            raise GraphError("need 1 <= num_clusters <= num_clients")
        bounds = np.linspace(0, num_clients, num_clusters + 1).round().astype(int)
        return cls(tuple(tuple(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])))

    @classmethod
    def singletons(cls, num_clients: int) -> "ClusterPartition":
        return cls(tuple((k,) for k in range(num_clients)))

    @property
    def num_clients(self) -> int:
        return sum(len(c) for c in self.clusters)

    def owner(self) -> np.ndarray:
        """``owner()[k]`` is the index of the cluster containing client ``k``."""
        out = np.empty(self.num_clients, dtype=np.int64)
        for c, members in enumerate(self.clusters):
            out[list(members)] = c
        return out

    def subgraphs(self, g: CommGraph) -> list[CommGraph]:
        if g.num_clients != self.num_clients:
            raise GraphError("partition and graph disagree on the number of clients")
        return [g.induced_subgraph(c) for c in self.clusters]


@dataclass(frozen=True)
class WalkAnalytics:
    stationary: np.ndarray
    lambda2: float
    spectral_gap: float
    pi_min: float
    algebraic_connectivity: float
    tau_bound: float
    tau_exact: int | None = None


def _grid_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    return edges


def build_topology(
    kind: str,
    K: int,
    *,
    rows: int | None = None,
    cols: int | None = None,
    p: float | None = None,
    seed: int = 0,
) -> CommGraph:
    """Construct one of the standard topologies.

    ``kind`` is one of ``complete``, ``path``, ``cycle``, ``star``, ``grid``,
    ``erdos_renyi`` or ``empty`` (no edges, the pure client-server case).
    Erdős–Rényi graphs are resampled with sub-seeds ``seed, seed+1, ...`` until
    connected; the number of attempts is kept in ``metadata["er_attempts"]``.
    """
    if K < 1:
        raise GraphError("K must be >= 1")
    if kind == "complete":
        edges = [(i, j) for i in range(K) for j in range(i + 1, K)]
    elif kind == "path":
        edges = [(i, i + 1) for i in range(K - 1)]
    elif kind == "cycle":
        edges = [(i, (i + 1) % K) for i in range(K)] if K > 2 else [(i, i + 1) for i in range(K - 1)]
    elif kind == "star":
        edges = [(0, j) for j in range(1, K)]
    elif kind == "empty":
        edges = []
    elif kind == "grid":
        if rows is None or cols is None or rows * cols != K:
            raise GraphError(f"grid needs rows*cols == K, got rows={rows}, cols={cols}, K={K}")
        return CommGraph.from_edges(K, _grid_edges(rows, cols), kind="grid", rows=rows, cols=cols)
    elif kind == "erdos_renyi":
        if p is None or not 0.0 < p <= 1.0:
            raise GraphError(f"erdos_renyi needs 0 < p <= 1, got {p}")
        iu, ju = np.triu_indices(K, k=1)
        for attempt in range(MAX_ER_ATTEMPTS):
            rng = np.random.default_rng(seed + attempt)
            keep = rng.random(iu.size) < p
            g = CommGraph.from_edges(
                K, zip(iu[keep].tolist(), ju[keep].tolist()),
                kind="erdos_renyi", p=p, seed=seed, er_attempts=attempt + 1,
            )
            if is_connected(g):
                return g
        raise GraphError(f"no connected G(K={K}, p={p}) in {MAX_ER_ATTEMPTS} attempts")
    else:
        raise GraphError(f"unknown topology {kind!r}")
    return CommGraph.from_edges(K, edges, kind=kind)


def is_connected(g: CommGraph) -> bool:
    seen = {0}
    todo = deque([0])
    while todo:
        k = todo.popleft()
        for j in g.adjacency[k]:
            if j not in seen:
                seen.add(j)
                todo.append(j)
    return len(seen) == g.num_clients


def _require_connected(g: CommGraph) -> None:
    if not is_connected(g):
        raise GraphError("graph is disconnected")


def _require_size(g: CommGraph, limit: int = MAX_DENSE_NODES) -> None:
    if g.num_clients > limit:
        raise GraphError(f"graph has {g.num_clients} nodes; dense analytics limited to {limit}")


def lazy_transition_row(g: CommGraph, k: int) -> np.ndarray:
    g._check_node(k)
    row = np.zeros(g.num_clients)
    row[list(g.closed_neighbourhood(k))] = 1.0 / (len(g.adjacency[k]) + 1)
    return row


def lazy_transition_matrix(g: CommGraph) -> np.ndarray:
    _require_size(g)
    a = g.adjacency_matrix() + np.eye(g.num_clients)
    return a / a.sum(axis=1, keepdims=True)


def sample_next(g: CommGraph, k: int, rng: np.random.Generator) -> int:
    """Draw the next holder uniformly from the closed neighbourhood of ``k``."""
    g._check_node(k)
    nbrs = g.closed[k]
    return nbrs[int(rng.integers(len(nbrs)))]


def stationary_distribution(g: CommGraph, normalization: str = "closed") -> np.ndarray:
    """Stationary law of the lazy walk, ``pi_k ∝ deg(k) + 1``.

    ``normalization="closed"`` divides by ``sum(deg + 1) = 2|E| + K`` and is a
    probability vector.  ``normalization="edges"`` divides by ``2|E|`` instead;
    that variant does not sum to one and exists only for comparison.
    """
    _require_connected(g)
    w = g.degrees.astype(float) + 1.0
    if normalization == "closed":
        return w / w.sum()
    if normalization == "edges":
        if g.edge_count == 0:
            raise GraphError("edge normalization undefined without edges")
        return w / (2.0 * g.edge_count)
    raise ValueError(f"unknown normalization {normalization!r}")


def _symmetrized_walk(g: CommGraph) -> np.ndarray:
    # D^{1/2} P D^{-1/2} with D = diag(pi); entries 1/sqrt((d_i+1)(d_j+1)) on closed neighbourhoods
    s = 1.0 / np.sqrt(g.degrees.astype(float) + 1.0)
    a = g.adjacency_matrix() + np.eye(g.num_clients)
    return s[:, None] * a * s[None, :]


def second_eigenvalue(g: CommGraph) -> float:
    """Second largest eigenvalue modulus of the lazy-walk matrix."""
    _require_size(g)
    _require_connected(g)
    if g.num_clients == 1:
        return 0.0
    w = np.sort(np.abs(np.linalg.eigvalsh(_symmetrized_walk(g))))[::-1]
    return float(min(max(w[1], 0.0), 1.0))


def algebraic_connectivity(g: CommGraph) -> float:
    """Second smallest eigenvalue of the combinatorial Laplacian ``D - A``."""
    _require_size(g)
    if g.num_clients == 1:
        return 0.0
    a = g.adjacency_matrix()
    lap = np.diag(a.sum(axis=1)) - a
    return float(np.linalg.eigvalsh(lap)[1])


def mixing_time_bound(g: CommGraph, normalization: str = "closed") -> float:
    """``3 ln(1/pi_min) / (2 (1 - lambda2))`` for the lazy walk."""
    pi_min = float(stationary_distribution(g, normalization).min())
    lam2 = second_eigenvalue(g)
    return 3.0 * math.log(1.0 / pi_min) / (2.0 * (1.0 - lam2))


def mixing_time_exact(g: CommGraph, eps: float, cap: int = MIXING_TIME_CAP) -> int:
    """Smallest ``t`` whose worst-row total-variation distance to ``pi`` is ``<= eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _require_size(g, MAX_POWER_NODES)
    pi = stationary_distribution(g)
    P = lazy_transition_matrix(g)
    Pt = np.eye(g.num_clients)
    for t in range(cap + 1):
        if 0.5 * np.abs(Pt - pi).sum(axis=1).max() <= eps:
            return t
        Pt = Pt @ P
    raise GraphError(f"mixing time exceeds cap {cap}")


def rho_bound(g: CommGraph, S: int, normalization: str = "closed") -> tuple[float, str]:
    """Lower bound on the ``S``-step visiting probability of the lazy walk.

    Returns ``(rho, branch)`` where ``branch`` is ``"degree"`` for
    ``(1/(d_max+1))**S`` or ``"mixing"`` for ``(d_min+1)/(4|E|)``, the latter
    only admissible once ``S`` reaches the mixing-time bound.  The degree
    branch bounds every *reachable* entry of ``P**S``; entries further than
    ``S`` hops apart are zero.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    _require_connected(g)
    deg = g.degrees
    by_degree = (1.0 / (deg.max() + 1)) ** S
    by_mixing = 0.0
    if g.edge_count > 0 and S >= mixing_time_bound(g, normalization):
        by_mixing = (deg.min() + 1) / (4.0 * g.edge_count)
    if by_mixing > by_degree:
        return by_mixing, "mixing"
    return by_degree, "degree"


def walk_analytics(g: CommGraph, eps: float | None = None) -> WalkAnalytics:
    pi = stationary_distribution(g)
    lam2 = second_eigenvalue(g)
    tau_exact = None
    if eps is not None and g.num_clients <= MAX_POWER_NODES:
        tau_exact = mixing_time_exact(g, eps)
    return WalkAnalytics(
        stationary=pi,
        lambda2=lam2,
        spectral_gap=1.0 - lam2,
        pi_min=float(pi.min()),
        algebraic_connectivity=algebraic_connectivity(g),
        tau_bound=mixing_time_bound(g),
        tau_exact=tau_exact,
    )


def write_edge_list(g: CommGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in g.edges():
            fh.write(f"{i} {j}\n")
