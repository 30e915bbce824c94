"""Feature-partitioned datasets: synthesis, SVMLight I/O, partitioning, batches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "FeatureDataset",
    "DataFormatError",
    "generate_synthetic_ridge",
    "load_svmlight",
    "write_svmlight",
    "partition_even",
    "scale_features",
    "sample_batch",
    "check_batch",
]


class DataFormatError(ValueError):
    """Malformed SVMLight input."""


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """``N x d`` design matrix stored as ``K`` column blocks plus labels.

    Block ``k`` is the private data of client ``k``; every block is stored as
    its own C-contiguous array.
    """

    blocks: tuple[np.ndarray, ...]
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a dataset needs at least one block")
        n = self.labels.shape[0]
        if self.labels.ndim != 1:
            raise ValueError("labels must be a vector")
        for k, b in enumerate(self.blocks):
            if b.ndim != 2 or b.shape[0] != n:
                raise ValueError(f"block {k} has shape {b.shape}, expected ({n}, d_k)")

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_dims(self) -> tuple[int, ...]:
        return tuple(int(b.shape[1]) for b in self.blocks)

    @property
    def num_features(self) -> int:
        return sum(self.block_dims)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Column offsets; block ``k`` spans ``offsets[k]:offsets[k+1]``."""
        return np.concatenate([[0], np.cumsum(self.block_dims)]).astype(np.int64)

    @cached_property
    def matrix(self) -> np.ndarray:
        """The reassembled ``N x d`` matrix."""
        return np.hstack(self.blocks) if len(self.blocks) > 1 else self.blocks[0]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.labels == 0.0) | (self.labels == 1.0)))


def generate_synthetic_ridge(N: int, d: int, seed: int) -> FeatureDataset:
    """Entries of ``X`` i.i.d. uniform on {0, 1}; ``y`` i.i.d. standard normal."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(N, d)).astype(np.float64)
    y = rng.standard_normal(N)
    return FeatureDataset((X,), y, {"source": "synthetic", "N": N, "d": d, "seed": seed})


def _parse_float(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataFormatError(f"line {lineno}: non-numeric token {tok!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"line {lineno}: non-finite value {tok!r}")
    return v


def load_svmlight(
    path,
    expected_features: int | None = None,
    labels: str = "auto",
) -> FeatureDataset:
    """Read a dense single-block dataset from SVMLight/libsvm text.

    Each line is ``label idx:val idx:val ...`` with 1-based, strictly
    increasing indices; anything after ``#`` is ignored.  ``labels`` controls
    the label map: ``"binary"`` maps -1 to 0 (and keeps 0/1), ``"raw"`` keeps
    the values, ``"auto"`` applies the binary map when every label is in
    {-1, 0, 1}.
    """
    rows_idx: list[list[int]] = []
    rows_val: list[list[float]] = []
    ys: list[float] = []
    width = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            ys.append(_parse_float(parts[0], lineno))
            idx: list[int] = []
            val: list[float] = []
            prev = 0
            for tok in parts[1:]:
                key, sep, v = tok.partition(":")
                if not sep:
                    raise DataFormatError(f"line {lineno}: expected idx:val, got {tok!r}")
                try:
                    j = int(key)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: non-numeric index {key!r}") from None
                if j <= prev:
                    raise DataFormatError(f"line {lineno}: indices must be >= 1 and strictly increasing")
                if expected_features is not None and j > expected_features:
                    raise DataFormatError(
                        f"line {lineno}: index {j} exceeds expected_features={expected_features}"
                    )
                prev = j
                idx.append(j - 1)
                val.append(_parse_float(v, lineno))
            width = max(width, prev)
            rows_idx.append(idx)
            rows_val.append(val)

    d = expected_features if expected_features is not None else width
    X = np.zeros((len(ys), d))
    for i, (idx, val) in enumerate(zip(rows_idx, rows_val)):
        X[i, idx] = val
    y = np.asarray(ys, dtype=np.float64)

    if labels not in ("auto", "binary", "raw"):
        raise ValueError(f"unknown label mode {labels!r}")
    binary_like = bool(np.all(np.isin(y, (-1.0, 0.0, 1.0))))
    if labels == "binary" and not binary_like:
        raise DataFormatError("binary label mode needs labels in {-1, 0, +1}")
    if labels == "binary" or (labels == "auto" and binary_like and y.size):
        y = np.where(y < 0, 0.0, y)
    return FeatureDataset((X,), y, {"source": "svmlight", "path": str(path)})


def write_svmlight(dataset: FeatureDataset, path) -> None:
    """Write without a header; zero entries are omitted, values use ``repr``."""
    X = dataset.matrix
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(X, dataset.labels):
            nz = np.flatnonzero(row)
            feats = " ".join(f"{j + 1}:{float(row[j])!r}" for j in nz)
            lab = repr(float(label))
            fh.write(f"{lab} {feats}\n" if feats else f"{lab}\n")


def partition_even(dataset: FeatureDataset, K: int) -> FeatureDataset:
    """Split columns into ``K`` contiguous blocks; the first ``d mod K`` get one extra."""
    d = dataset.num_features
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > d:
        raise ValueError(f"cannot give {K} clients at least one of {d} features")
    base, extra = divmod(d, K)
    dims = [base + 1] * extra + [base] * (K - extra)
    X = dataset.matrix
    cuts = np.concatenate([[0], np.cumsum(dims)])
    blocks = tuple(np.ascontiguousarray(X[:, a:b]) for a, b in zip(cuts[:-1], cuts[1:]))
    return FeatureDataset(blocks, dataset.labels, dict(dataset.metadata, K=K))


def scale_features(dataset: FeatureDataset) -> FeatureDataset:
    """Min-max scale each feature to [-1, 1]; constant features become 0."""
    X = dataset.matrix
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    Xs = np.where(hi > lo, 2.0 * (X - lo) / span - 1.0, 0.0)
    out = FeatureDataset((Xs,), dataset.labels, dict(dataset.metadata, scaled=True))
    return _repartition(out, dataset.block_dims) if dataset.num_blocks > 1 else out


def _repartition(dataset: FeatureDataset, dims: Sequence[int]) -> FeatureDataset:
    cuts = np.concatenate([[0], np.cumsum(dims)])
    X = dataset.matrix
    blocks = tuple(np.ascontiguousarray(X[:, a:b]) for a, b in zip(cuts[:-1], cuts[1:]))
    return FeatureDataset(blocks, dataset.labels, dataset.metadata)


def sample_batch(N: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted sample ids drawn uniformly without replacement.

    ``B == N`` returns ``arange(N)`` without touching ``rng``.
    """
    if not 1 <= B <= N:
        raise ValueError(f"batch size {B} outside [1, {N}]")
    if B == N:
        return np.arange(N)
    return np.sort(rng.choice(N, size=B, replace=False))


def check_batch(indices: np.ndarray, N: int) -> None:
    if indices.ndim != 1 or indices.size == 0:
        raise ValueError("batch must be a nonempty vector of indices")
    if indices[0] < 0 or indices[-1] >= N or np.any(np.diff(indices) <= 0):
        raise ValueError("batch indices must be sorted, distinct and in range")
