"""Generalized linear model objectives over feature-partitioned data.

Two losses are supported, both with aggregation by sum so the token is the
vector ``z = X theta`` over the active samples:

* ``ridge``:        ``0.5 ||X theta - y||^2 + 0.5 alpha ||theta||^2``
* ``logistic_l1``:  ``sum_n [log(1 + e^{z_n}) - y_n z_n] + beta ||theta||_1``

Mini-batch losses are rescaled by ``N / B`` so batch gradients are unbiased.
The L1 term is never differentiated; it enters through :func:`prox_l1`.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureDataset

__all__ = [
    "GlmSpec",
    "ModelParams",
    "SmoothnessInfo",
    "ReferenceSolution",
    "ConvergenceError",
    "sigmoid",
    "residual_grad",
    "partial_gradient",
    "cd_step",
    "prox_l1",
    "evaluate",
    "smooth_gradient",
    "stationarity_norm",
    "smoothness_constant",
    "solve_reference",
    "solve_reference_cached",
]


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


@dataclass(frozen=True)
class GlmSpec:
    loss: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.loss not in ("ridge", "logistic_l1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("regularization weights must be nonnegative")

    @classmethod
    def ridge(cls, alpha: float) -> "GlmSpec":
        return cls("ridge", alpha=float(alpha))

    @classmethod
    def logistic_l1(cls, beta: float) -> "GlmSpec":
        return cls("logistic_l1", beta=float(beta))

    @property
    def uses_prox(self) -> bool:
        return self.loss == "logistic_l1" and self.beta > 0


@dataclass
class ModelParams:
    """Flat parameter vector with per-client block views.

    ``fusion`` is the fusion-model block; it is empty for every GLM.
    """

    values: np.ndarray
    offsets: np.ndarray
    fusion: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, dataset: FeatureDataset) -> "ModelParams":
        return cls(np.zeros(dataset.num_features), dataset.offsets.copy())

    @classmethod
    def from_blocks(cls, blocks) -> "ModelParams":
        blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        offsets = np.concatenate([[0], np.cumsum([b.size for b in blocks])]).astype(np.int64)
        return cls(np.concatenate(blocks), offsets)

    @property
    def num_blocks(self) -> int:
        return len(self.offsets) - 1

    def block(self, k: int) -> np.ndarray:
        return self.values[self.offsets[k] : self.offsets[k + 1]]

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.block(k) for k in range(self.num_blocks)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.offsets, self.fusion.copy())


@dataclass(frozen=True)
class SmoothnessInfo:
    L: float
    method: str
    iterations: int
    residual: float


@dataclass(frozen=True)
class ReferenceSolution:
    theta: np.ndarray
    f_star: float
    certificate: float
    iterations: int
    method: str


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def residual_grad(spec: GlmSpec, z: np.ndarray, y_sub: np.ndarray) -> np.ndarray:
    """Derivative of the per-sample loss with respect to the aggregate ``z``."""
    if z.shape != y_sub.shape:
        raise ValueError(f"length mismatch: z {z.shape} vs labels {y_sub.shape}")
    if spec.loss == "ridge":
        return z - y_sub
    # s(z) - y, written so neither branch loses the small tail 1 - s(z) = s(-z)
    e = np.exp(-np.abs(z))
    tail = e / (1.0 + e)
    return np.where(z >= 0, (1.0 - y_sub) - tail, tail - y_sub)


def partial_gradient(
    spec: GlmSpec,
    Xk: np.ndarray,
    z: np.ndarray,
    theta_k: np.ndarray,
    y_sub: np.ndarray,
    scale: float = 1.0,
) -> np.ndarray:
    """Gradient of the smooth part with respect to block ``k``, using only the token.

    ``scale`` is ``N / B`` for a mini-batch of size ``B`` and 1 for full batch.
    """
    if Xk.shape[0] != z.shape[0] or Xk.shape[1] != theta_k.shape[0]:
        raise ValueError(f"shape mismatch: X_k {Xk.shape}, z {z.shape}, theta_k {theta_k.shape}")
    g = Xk.T @ residual_grad(spec, z, y_sub)
    if scale != 1.0:
        g *= scale
    if spec.loss == "ridge" and spec.alpha:
        g += spec.alpha * theta_k
    return g


def cd_step(theta_k: np.ndarray, grad_k: np.ndarray, eta: float) -> np.ndarray:
    return theta_k - eta * grad_k


def prox_l1(v: np.ndarray, threshold: float) -> np.ndarray:
    """Soft-thresholding, the proximal map of ``threshold * ||.||_1``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if threshold == 0:
        return np.array(v, dtype=np.float64, copy=True)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def _per_sample_loss(spec: GlmSpec, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if spec.loss == "ridge":
        return 0.5 * (z - y) ** 2
    return np.logaddexp(0.0, z) - y * z


def _regularizer(spec: GlmSpec, theta: np.ndarray) -> float:
    if spec.loss == "ridge":
        return 0.5 * spec.alpha * float(theta @ theta)
    return spec.beta * float(np.abs(theta).sum())


def _flat(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ModelParams) else np.asarray(theta, dtype=np.float64)


def evaluate(spec: GlmSpec, dataset: FeatureDataset, theta) -> float:
    """Full-batch objective, regularizer included."""
    v = _flat(theta)
    if v.shape != (dataset.num_features,):
        raise ValueError(f"theta has shape {v.shape}, expected ({dataset.num_features},)")
    z = dataset.matrix @ v
    return float(_per_sample_loss(spec, z, dataset.labels).sum() + _regularizer(spec, v))


def smooth_gradient(spec: GlmSpec, dataset: FeatureDataset, theta, rows: np.ndarray | None = None) -> np.ndarray:
    """Centralized gradient of the smooth part (optionally on a rescaled batch)."""
    v = _flat(theta)
    X, y = dataset.matrix, dataset.labels
    scale = 1.0
    if rows is not None and rows.size != dataset.num_samples:
        X, y = X[rows], y[rows]
        scale = dataset.num_samples / rows.size
    g = X.T @ residual_grad(spec, X @ v, y)
    if scale != 1.0:
        g *= scale
    if spec.loss == "ridge":
        g += spec.alpha * v
    return g


def stationarity_norm(spec: GlmSpec, dataset: FeatureDataset, theta) -> float:
    """Gradient norm for ridge; minimum-norm subgradient norm for logistic + L1."""
    v = _flat(theta)
    g = smooth_gradient(spec, dataset, v)
    if spec.loss == "ridge" or spec.beta == 0:
        return float(np.linalg.norm(g))
    b = spec.beta
    sub = np.where(v != 0, g + b * np.sign(v), np.sign(g) * np.maximum(np.abs(g) - b, 0.0))
    return float(np.linalg.norm(sub))


def _power_iteration(X: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> tuple[float, int, float]:
    """Top eigenvalue of ``X^T X`` without forming it."""
    d = X.shape[1]
    v = np.random.default_rng(0).standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = X.T @ (X @ v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, it, 0.0
        v = w / nw
        res = abs(new - lam) / max(abs(new), 1e-300)
        lam = new
        if res <= tol and it > 1:
            return lam, it, res
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (residual {res:.3e})")


def smoothness_constant(spec: GlmSpec, dataset: FeatureDataset, tol: float = 1e-8) -> SmoothnessInfo:
    lam, it, res = _power_iteration(dataset.matrix, tol=tol)
    L = lam + spec.alpha if spec.loss == "ridge" else lam / 4.0
    if L <= 0:
        raise ValueError("objective has no positive smoothness constant (zero data and no ridge term)")
    return SmoothnessInfo(L=L, method="power_iteration", iterations=it, residual=res)


def _ridge_cg(X: np.ndarray, y: np.ndarray, alpha: float, tol: float, max_iter: int):
    b = X.T @ y
    x = np.zeros(X.shape[1])
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    it = 0
    while True:
        if np.sqrt(rr) <= tol:
            # confirm on the true residual; restart from it if the recursion drifted
            r = b - (X.T @ (X @ x) + alpha * x)
            rr = float(r @ r)
            if np.sqrt(rr) <= tol:
                break
            p = r.copy()
        if it >= max_iter or not np.isfinite(rr):
            raise ConvergenceError(f"CG did not reach residual {tol:.3e} in {it} iterations")
        Ap = X.T @ (X @ p) + alpha * p
        step = rr / float(p @ Ap)
        x += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        if it % 50 == 0:
            # recompute the true residual to stop drift from masking convergence
            r = b - (X.T @ (X @ x) + alpha * x)
            rr = float(r @ r)
    return x, float(np.sqrt(rr)), it


def _logistic_fista(spec: GlmSpec, dataset: FeatureDataset, tol: float, max_iter: int):
    X, y = dataset.matrix, dataset.labels
    L = smoothness_constant(spec, dataset).L
    step = 1.0 / L

    def grad(v):
        return X.T @ residual_grad(spec, X @ v, y)

    x = np.zeros(X.shape[1])
    yk = x.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        g = grad(yk)
        x_new = prox_l1(yk - step * g, step * spec.beta)
        # gradient-mapping restart keeps momentum from oscillating
        if float((yk - x_new) @ (x_new - x)) > 0:
            t = 1.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if it % 10 == 0:
            gm = L * np.linalg.norm(x - prox_l1(x - step * grad(x), step * spec.beta))
            if gm <= tol:
                return x, float(gm), it
    raise ConvergenceError(f"proximal gradient did not converge in {max_iter} iterations")


def solve_reference(
    spec: GlmSpec,
    dataset: FeatureDataset,
    tol: float = 1e-10,
    max_iter: int = 10**6,
) -> ReferenceSolution:
    """High-precision minimizer used for the suboptimality gap.

    Ridge solves the normal equations by conjugate gradients until the true
    residual ``||X^T y - (X^T X + alpha I) theta||`` is at most ``tol``;
    logistic + L1 runs accelerated proximal gradient until the
    gradient-mapping norm is at most ``tol``.  ``certificate`` is the final
    residual / mapping norm.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if spec.loss == "ridge":
        theta, cert, it = _ridge_cg(dataset.matrix, dataset.labels, spec.alpha, tol, max_iter)
        method = "conjugate_gradient"
    else:
        theta, cert, it = _logistic_fista(spec, dataset, tol, max_iter)
        method = "accelerated_proximal_gradient"
    return ReferenceSolution(theta, evaluate(spec, dataset, theta), cert, it, method)


def _reference_key(spec: GlmSpec, dataset: FeatureDataset, tol: float) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([spec.loss, spec.alpha, spec.beta, tol]).encode())
    h.update(np.ascontiguousarray(dataset.matrix).tobytes())
    h.update(dataset.labels.tobytes())
    return h.hexdigest()[:24]


def solve_reference_cached(spec: GlmSpec, dataset: FeatureDataset, tol: float, cache_dir) -> ReferenceSolution:
    """:func:`solve_reference` memoized to ``cache_dir/<hash>.npz``."""
    path = Path(cache_dir) / f"ref_{_reference_key(spec, dataset, tol)}.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            return ReferenceSolution(
                z["theta"], float(z["f_star"]), float(z["certificate"]), int(z["iterations"]), str(z["method"])
            )
    sol = solve_reference(spec, dataset, tol)
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(path, theta=sol.theta, f_star=sol.f_star, certificate=sol.certificate,
             iterations=sol.iterations, method=sol.method)
    return sol
