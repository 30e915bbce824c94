"""The roaming token: the aggregate ``z = sum_k X_k[rows] theta_k`` plus fusion params.

A client holding the token, its own data block and its own parameters can
compute its partial gradient, take a step, and patch ``z`` with its own delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FeatureDataset, check_batch
from .objective import ModelParams

__all__ = [
    "Token",
    "TokenConsistencyError",
    "init_zero",
    "apply_block_delta",
    "recompute",
    "average",
    "combine_disjoint",
    "consistency_error",
    "check_consistency",
]


class TokenConsistencyError(AssertionError):
    """The token drifted from the model estimate it travels with."""


@dataclass
class Token:
    z: np.ndarray
    rows: np.ndarray
    theta0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return int(self.z.shape[0])

    def copy(self) -> "Token":
        # rows are never mutated, so sharing them is safe
        return Token(self.z.copy(), self.rows, self.theta0.copy())


def init_zero(M: int, rows: np.ndarray | None = None) -> Token:
    """Token of the all-zero model; only valid when every ``theta_k`` is zero."""
    if M < 1:
        raise ValueError("token length must be >= 1")
    if rows is None:
        rows = np.arange(M)
    elif rows.shape != (M,):
        raise ValueError("rows must have length M")
    return Token(np.zeros(M), rows)


def apply_block_delta(tok: Token, Xk_rows: np.ndarray, theta_old: np.ndarray, theta_new: np.ndarray) -> Token:
    """Patch ``tok.z`` in place with ``X_k (theta_new - theta_old)``; returns ``tok``."""
    if Xk_rows.shape != (tok.z.shape[0], theta_old.shape[0]) or theta_old.shape != theta_new.shape:
        raise ValueError(
            f"shape mismatch: X_k {Xk_rows.shape}, z {tok.z.shape}, theta {theta_old.shape}->{theta_new.shape}"
        )
    tok.z += Xk_rows @ (theta_new - theta_old)
    return tok


def recompute(dataset: FeatureDataset, theta: ModelParams, rows: np.ndarray | None = None) -> Token:
    """Server-side token built from every client's embedding."""
    if theta.num_blocks != dataset.num_blocks:
        raise ValueError("parameter blocks do not match dataset blocks")
    full = rows is None or rows.size == dataset.num_samples
    if rows is None:
        rows = np.arange(dataset.num_samples)
    else:
        check_batch(rows, dataset.num_samples)
    z = np.zeros(rows.size)
    for k, Xk in enumerate(dataset.blocks):
        th = theta.block(k)
        if th.shape[0] != Xk.shape[1]:
            raise ValueError(f"block {k}: theta has {th.shape[0]} entries, X_k has {Xk.shape[1]} columns")
        z += (Xk if full else Xk[rows]) @ th
    return Token(z, rows, theta.fusion.copy())


def average(tokens: Sequence[Token]) -> Token:
    if not tokens:
        raise ValueError("need at least one token")
    rows = tokens[0].rows
    for t in tokens[1:]:
        if t.z.shape != tokens[0].z.shape or not np.array_equal(t.rows, rows):
            raise ValueError("tokens cover different active sample sets")
    if len(tokens) == 1:
        return tokens[0].copy()
    z = np.mean([t.z for t in tokens], axis=0)
    th0 = np.mean([t.theta0 for t in tokens], axis=0) if tokens[0].theta0.size else tokens[0].theta0.copy()
    return Token(z, rows, th0)


def combine_disjoint(base: Token, tokens: Sequence[Token]) -> Token:
    """Token of the model that takes each token's own blocks (one-hot sync weights).

    Valid when the tokens updated disjoint sets of blocks starting from the
    model behind ``base``: then ``z = base + sum_g (z_g - base)``.
    """
    z = base.z.copy()
    for t in tokens:
        if not np.array_equal(t.rows, base.rows):
            raise ValueError("tokens cover different active sample sets")
        z += t.z - base.z
    return Token(z, base.rows, base.theta0.copy())


def consistency_error(tok: Token, dataset: FeatureDataset, theta: ModelParams) -> float:
    """Relative distance between ``tok.z`` and a fresh :func:`recompute`."""
    ref = recompute(dataset, theta, tok.rows).z
    diff = float(np.linalg.norm(tok.z - ref))
    scale = float(np.linalg.norm(ref))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


def check_consistency(tok: Token, dataset: FeatureDataset, theta: ModelParams, rtol: float = 1e-8) -> float:
    err = consistency_error(tok, dataset, theta)
    if not err <= rtol:
        raise TokenConsistencyError(f"token relative error {err:.3e} exceeds {rtol:.1e}")
    return err
