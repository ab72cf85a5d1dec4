"""Independent reference implementations used by the test suite only."""

from __future__ import annotations

import numpy as np
from scipy.integrate import dblquad
from scipy.stats import norm


def brute_force_front(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """O(n^2) dominance filter keeping first-of-duplicates, in input order."""
    keep = []
    for i, (a, l) in enumerate(points):
        dominated = any(
            (a2 >= a and l2 <= l and (a2 > a or l2 < l)) for a2, l2 in points)
        duplicate_earlier = any((a2 == a and l2 == l) for a2, l2 in points[:i])
        if not dominated and not duplicate_earlier:
            keep.append((a, l))
    return keep


def mc_dominated_volume(points: np.ndarray, ref: tuple[float, float],
                        acc_top: float, n_samples: int,
                        rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate (value, sigma) of the dominated area in the box."""
    rf, rl = ref
    samples_a = rng.uniform(rf, acc_top, n_samples)
    samples_l = rng.uniform(0.0, rl, n_samples)
    dominated = np.zeros(n_samples, dtype=bool)
    for a, l in points:
        dominated |= (samples_a <= a) & (samples_l >= l)
    box = (acc_top - rf) * (rl - 0.0)
    p_hat = dominated.mean()
    sigma = box * np.sqrt(max(p_hat * (1 - p_hat), 1e-12) / n_samples)
    return box * p_hat, sigma


def quadrature_ehvi(mu_f: float, sd_f: float, mu_g: float, sd_g: float,
                    front_point: tuple[float, float],
                    ref: tuple[float, float]) -> float:
    """EHVI for a one-point front via adaptive quadrature (both axes +-8 sigma)."""
    pa, pl = front_point
    rf, rl = ref

    def hvi(f, g):
        if f <= rf or g >= rl:
            return 0.0
        new = (f - rf) * (rl - g)
        overlap_w = max(0.0, min(f, pa) - rf)
        overlap_h = max(0.0, rl - max(g, pl))
        return new - overlap_w * overlap_h

    def integrand(g, f):
        return hvi(f, g) * norm.pdf(f, mu_f, sd_f) * norm.pdf(g, mu_g, sd_g)

    value, _ = dblquad(integrand, mu_f - 8 * sd_f, mu_f + 8 * sd_f,
                       lambda f: mu_g - 8 * sd_g, lambda f: mu_g + 8 * sd_g,
                       epsabs=1e-10, epsrel=1e-8)
    return value
