"""Geometry on the probability simplex: extreme points, interpolation,
budgeted step sizes, distances, entropy and Euclidean L1-ball projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Budget:
    epsilon: float
    norm_p: int = 1

    def __post_init__(self):
        if self.norm_p not in (1, 2):
            raise ValueError("norm_p must be 1 or 2")
        diameter = 2.0 if self.norm_p == 1 else np.sqrt(2.0)
        if not 0.0 <= self.epsilon <= diameter + 1e-12:
            raise ValueError(f"epsilon={self.epsilon} outside [0, {diameter:.4g}] for L{self.norm_p}")


def is_posterior(y, tol=SIMPLEX_TOL):
    y = np.asarray(y, dtype=np.float64)
    return bool(np.all(np.isfinite(y)) and np.all(y >= -tol) and abs(y.sum(axis=-1) - 1.0).max() <= tol)


def extremes(K):
    """Yield the K one-hot vertices of the simplex."""
    if K < 2:
        raise ValueError("need K >= 2")
    eye = np.eye(K)
    for k in range(K):
        yield eye[k].copy()


def extremes_argmax(K, k):
    """Yield e_k, then (e_k + e_j)/2 for every j != k, in increasing j.

    These are the vertices of the argmax-constrained polytope with support
    size at most two; each keeps k inside its argmax set.
    """
    if K < 2:
        raise ValueError("need K >= 2")
    if not 0 <= k < K:
        raise ValueError(f"class index {k} out of range for K={K}")
    eye = np.eye(K)
    yield eye[k].copy()
    for j in range(K):
        if j != k:
            yield 0.5 * (eye[k] + eye[j])


def extremes_matrix(K, k=None):
    """Extremes stacked as rows; argmax-constrained set when ``k`` is given."""
    if k is None:
        return np.stack(list(extremes(K)))
    return np.stack(list(extremes_argmax(K, k)))


def interpolate(y, y_star, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return (1.0 - alpha) * np.asarray(y, dtype=np.float64) + alpha * np.asarray(y_star, dtype=np.float64)


def l_p_dist(y1, y2, p=1):
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise ValueError(f"length mismatch: {y1.shape} vs {y2.shape}")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    return np.linalg.norm(y1 - y2, ord=p, axis=-1)


def opt_step(y, y_star, budget, dist=None):
    """Largest alpha in [0, 1] with dist(h(alpha), y) <= epsilon.

    For L_p budgets this is min(epsilon / ||y - y*||_p, 1).  A custom
    ``dist(a, b)`` callable (assumed non-decreasing along the segment) is
    handled by bisection.
    """
    eps = budget.epsilon
    if dist is None:
        gap = float(l_p_dist(y, y_star, budget.norm_p))
        if gap == 0.0:
            return 0.0
        return min(eps / gap, 1.0)
    if dist(y, y_star) <= eps:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        d = dist(y, interpolate(y, y_star, mid))
        if d <= eps:
            lo = mid
            if eps - d <= 1e-6:
                break
        else:
            hi = mid
    return lo


def opt_step_batch(Y, Y_star, epsilon, p=1):
    """Vectorised closed-form ``opt_step`` over rows."""
    gap = l_p_dist(Y, Y_star, p)
    alpha = np.ones_like(gap)
    nz = gap > 0
    alpha[nz] = np.minimum(epsilon / gap[nz], 1.0)
    alpha[~nz] = 0.0
    return alpha


def entropy(y, base=2):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    if base == 2:
        return h / np.log(2.0)
    if base in ("e", np.e):
        return h
    raise ValueError("base must be 2 or 'e'")


def project_l1_ball(v, radius):
    """Euclidean projection of ``v`` onto {x : ||x||_1 <= radius}.

    Sort-based method of Duchi et al. (2008), O(n log n).
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if np.abs(v).sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = np.abs(v)
    mu = np.sort(u)[::-1]
    css = np.cumsum(mu)
    ks = np.arange(1, len(u) + 1)
    hits = np.nonzero(mu * ks > css - radius)[0]
    rho = hits[-1] if len(hits) else 0  # radius below float resolution of the sums
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(u - theta, 0.0)
