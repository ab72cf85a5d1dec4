"""Gaussian-process surrogate with sparsity-inducing ARD lengthscale prior.

Matern-5/2 ARD kernel on [0,1]^D encodings.  Hyperparameters are fitted by
penalized marginal-likelihood maximization: a half-Cauchy-shaped log-penalty
on the inverse squared lengthscales shrinks irrelevant dimensions toward
very long lengthscales, which is what makes the surrogate usable on the
high-dimensional discrete encoding where only a few factors matter.  MAP
point estimates keep the fit deterministic and fast at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize

SQRT5 = np.sqrt(5.0)

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class NumericalError(RuntimeError):
    """Kernel matrix stayed non-positive-definite after jitter escalation."""


def _matern52(r: np.ndarray) -> np.ndarray:
    return (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _scaled_r(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    d = (x1[:, None, :] - x2[None, :, :]) / lengthscales
    return np.sqrt(np.maximum(np.einsum("ijk,ijk->ij", d, d), 0.0))


def kernel_matrix(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray,
                  signal_variance: float) -> np.ndarray:
    return signal_variance * _matern52(_scaled_r(x1, x2, lengthscales))


def _chol_with_jitter(k: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.mean(np.diag(k))) or 1.0
    for jitter in _JITTERS:
        try:
            return cholesky(k + jitter * scale * np.eye(k.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("kernel matrix not positive definite after maximum jitter")


@dataclass(frozen=True)
class GPSurrogate:
    """Fitted GP posterior state on standardized targets."""

    x_train: np.ndarray
    y_train: np.ndarray            # raw targets
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    y_mean: float
    y_scale: float
    chol: np.ndarray               # lower Cholesky of K + noise I (+ jitter)
    alpha: np.ndarray              # (K + noise I)^-1 y_standardized

    @property
    def dimension(self) -> int:
        return self.x_train.shape[1]

    def with_observations(self, x_new: np.ndarray, y_new: np.ndarray) -> "GPSurrogate":
        """Condition on extra observations without refitting hyperparameters."""
        x = np.vstack([self.x_train, np.atleast_2d(x_new)])
        y = np.concatenate([self.y_train, np.atleast_1d(y_new)])
        return _finalize(x, y, self.lengthscales, self.signal_variance,
                         self.noise_variance, self.y_mean, self.y_scale)


def gp_with_hyperparameters(x: np.ndarray, y: np.ndarray, lengthscales,
                            signal_variance: float, noise_variance: float) -> GPSurrogate:
    """Build a surrogate with fixed hyperparameters (no fitting).

    Targets are standardized internally like ``fit_gp_data`` does.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    y_mean = float(np.mean(y))
    spread = float(np.std(y))
    y_scale = spread if spread > 1e-12 else 1.0
    return _finalize(x, y, np.asarray(lengthscales, dtype=float),
                     signal_variance, noise_variance, y_mean, y_scale)


def _finalize(x: np.ndarray, y: np.ndarray, lengthscales: np.ndarray,
              signal_variance: float, noise_variance: float,
              y_mean: float, y_scale: float) -> GPSurrogate:
    k = kernel_matrix(x, x, lengthscales, signal_variance)
    k[np.diag_indices_from(k)] += noise_variance
    chol, _ = _chol_with_jitter(k)
    ys = (y - y_mean) / y_scale
    alpha = cho_solve((chol, True), ys)
    return GPSurrogate(x, y, lengthscales, signal_variance, noise_variance,
                       y_mean, y_scale, chol, alpha)


def predict(gp: GPSurrogate, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent function at query points.

    Accepts a single D-vector or an (n, D) matrix; returns matching shapes.
    """
    single = np.ndim(x) == 1
    xq = np.atleast_2d(np.asarray(x, dtype=float))
    if xq.shape[1] != gp.dimension:
        raise ValueError(f"query dimension {xq.shape[1]} != training dimension {gp.dimension}")
    k_star = kernel_matrix(xq, gp.x_train, gp.lengthscales, gp.signal_variance)
    mean_s = k_star @ gp.alpha
    v = cho_solve((gp.chol, True), k_star.T)
    var_s = np.maximum(gp.signal_variance - np.einsum("ij,ji->i", k_star, v), 0.0)
    mean = gp.y_mean + gp.y_scale * mean_s
    var = gp.y_scale ** 2 * var_s
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def _neg_map_objective(theta: np.ndarray, x: np.ndarray, ys: np.ndarray,
                       saas_tau: float) -> tuple[float, np.ndarray]:
    """Negative penalized LML and its gradient wrt log-hyperparameters.

    theta = (log lengthscales[0..D-1], log signal_variance, log noise_variance).
    """
    n, d = x.shape
    log_ls, log_sv, log_nv = theta[:d], theta[d], theta[d + 1]
    ls = np.exp(log_ls)
    sv = np.exp(log_sv)
    nv = np.exp(log_nv)

    diff = x[:, None, :] - x[None, :, :]
    sq = diff * diff
    r = np.sqrt(np.maximum(np.einsum("ijk,k->ij", sq, 1.0 / ls ** 2), 0.0))
    e = np.exp(-SQRT5 * r)
    m = (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    k = sv * m
    k[np.diag_indices_from(k)] += nv
    try:
        chol, _ = _chol_with_jitter(k)
    except NumericalError:
        return 1e12, np.zeros_like(theta)
    alpha = cho_solve((chol, True), ys)
    lml = (-0.5 * float(ys @ alpha)
           - float(np.sum(np.log(np.diag(chol))))
           - 0.5 * n * np.log(2.0 * np.pi))

    # trace term: 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
    k_inv = cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - k_inv

    grad = np.zeros_like(theta)
    # d k / d log ls_d = (5/3) sv (1 + sqrt5 r) e^{-sqrt5 r} * sq_d / ls_d^2
    base = (5.0 / 3.0) * sv * (1.0 + SQRT5 * r) * e
    for j in range(d):
        dk = base * (sq[:, :, j] / ls[j] ** 2)
        grad[j] = 0.5 * float(np.einsum("ij,ij->", w, dk))
    grad[d] = 0.5 * float(np.einsum("ij,ij->", w, sv * m))
    grad[d + 1] = 0.5 * nv * float(np.trace(w))

    # half-Cauchy-shaped penalty on rho = ls^-2: log p = -log(1 + rho^2 / tau^2)
    rho = ls ** -2
    penalty = -float(np.sum(np.log1p((rho / saas_tau) ** 2)))
    grad[:d] += 4.0 * rho ** 2 / (saas_tau ** 2 + rho ** 2)

    value = lml + penalty
    return -value, -grad


def fit_gp_data(x: np.ndarray, y: np.ndarray, seed: int = 0, restarts: int = 3,
                saas_tau: float = 0.1, noise_floor: float = 1e-8) -> GPSurrogate:
    """Fit the surrogate to raw (inputs, targets) by penalized-MAP L-BFGS-B."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, D) with one target per row")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 observations to fit a surrogate")
    n, d = x.shape

    y_mean = float(np.mean(y))
    spread = float(np.std(y))
    y_scale = spread if spread > 1e-12 else 1.0
    ys = (y - y_mean) / y_scale

    bounds = ([(np.log(1e-3), np.log(1e4))] * d
              + [(np.log(1e-4), np.log(1e3))]
              + [(np.log(noise_floor), np.log(10.0))])
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([np.zeros(d), [0.0], [np.log(1e-3)]])]
    for _ in range(max(restarts - 1, 0)):
        starts.append(np.concatenate([
            rng.uniform(np.log(0.1), np.log(10.0), d),
            rng.uniform(np.log(0.1), np.log(10.0), 1),
            rng.uniform(np.log(max(noise_floor, 1e-8)), np.log(0.1), 1),
        ]))

    best_val, best_theta = np.inf, starts[0]
    for theta0 in starts:
        res = minimize(_neg_map_objective, theta0, args=(x, ys, saas_tau),
                       jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 200})
        if res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x
    if not np.isfinite(best_val):
        raise NumericalError("surrogate fit failed to produce a finite objective")

    ls = np.exp(best_theta[:d])
    sv = float(np.exp(best_theta[d]))
    nv = float(np.exp(best_theta[d + 1]))
    return _finalize(x, y, ls, sv, nv, y_mean, y_scale)


def fit_gp(records: Sequence, objective_selector: Callable[[object], float],
           seed: int = 0, **kwargs) -> GPSurrogate:
    """Fit a surrogate to evaluation records via a target selector.

    Records must be feasible, non-failed evaluations carrying an ``encoded``
    vector; fewer than two are rejected.
    """
    usable = [r for r in records
              if getattr(r, "feasible", True) and not getattr(r, "failed", False)]
    if len(usable) < 2:
        raise ValueError("need at least 2 feasible evaluated records to fit a surrogate")
    x = np.vstack([np.asarray(r.encoded, dtype=float) for r in usable])
    y = np.asarray([objective_selector(r) for r in usable], dtype=float)
    return fit_gp_data(x, y, seed=seed, **kwargs)
