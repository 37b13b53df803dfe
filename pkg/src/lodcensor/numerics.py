"""Normal-distribution kernels, Gauss-Hermite quadrature and a smooth maximizer.

Everything here is a pure function of its arguments; the estimation modules
build censored likelihoods and posterior integrals on top of these
primitives.  Quadrature rules follow the probabilists' convention: a rule
approximates integral h(x) phi(x) dx as sum(weights * h(nodes)), so an
integral against N(0, tau^2) is sum(w * g(tau * node)) with no sqrt(2)
bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

MAX_QUAD_POINTS = 200


def norm_pdf(x):
    """Standard normal density phi(x)."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - LOG_SQRT_2PI)
    return float(out) if out.ndim == 0 else out


def norm_cdf(x):
    """Standard normal CDF Phi(x).

    Stays positive into the deep left tail (subnormal territory, down to
    x ~ -38); beyond that use log_norm_cdf, which never underflows.
    """
    x = np.asarray(x, dtype=float)
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def log_norm_cdf(x):
    """log Phi(x), finite and accurate far into the left tail."""
    x = np.asarray(x, dtype=float)
    out = special.log_ndtr(x)
    return float(out) if out.ndim == 0 else out


def trunc_norm_mean_below(mu, sigma, t):
    """Mean of X ~ N(mu, sigma^2) conditional on X <= t.

    Computed as mu - sigma * phi(z) / Phi(z) with z = (t - mu) / sigma.  The
    hazard ratio is evaluated in log space, so deep truncation (z << 0)
    stays finite; the result is always below t and tends to mu as t grows.
    Arguments broadcast like ufuncs.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(t, dtype=float) - mu) / sigma
    ratio = np.exp(-0.5 * z * z - LOG_SQRT_2PI - special.log_ndtr(z))
    out = mu - sigma * ratio
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights approximating integral h(x) phi(x) dx as sum(w h(x)).

    Rules built by gauss_hermite target the standard normal: nodes are
    symmetric about 0 and weights sum to one.  adapt_rule relocates the
    nodes and folds the density ratio into the weights, so the same
    evaluation formula keeps approximating the original integral.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")

    def __len__(self):
        return self.nodes.size

    def integrate(self, fn):
        """sum(w * fn(node)); fn must accept a vector of nodes."""
        return float(np.sum(self.weights * fn(self.nodes)))


def gauss_hermite(m: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with m points.

    Weights are normalized against the standard normal density (they sum to
    one) and nodes are symmetrized, so a rule with m points reproduces
    normal moments up to degree 2m - 1.
    """
    m = int(m)
    if not 1 <= m <= MAX_QUAD_POINTS:
        raise ValueError(f"number of quadrature points must be in 1..{MAX_QUAD_POINTS}, got {m}")
    nodes, weights = special.roots_hermitenorm(m)
    # the eigen solver leaves ~1 ulp of asymmetry; symmetrize explicitly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights)


def adapted_log_weights(rule: QuadratureRule, center, scale):
    """Relocated nodes and log-weights for a rule recentred at center/scale.

    Returns (nodes', log_w') with nodes' = center + scale * nodes and
    log_w' = log w + log scale + log phi(nodes') - log phi(nodes), i.e. the
    importance reweighting that preserves integrals against phi.  Log-space
    form so callers integrating sharply peaked likelihoods can stay in
    log space throughout; center/scale may be arrays broadcasting against
    the node axis (last axis).
    """
    center = np.asarray(center, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0.0):
        raise ValueError("scale must be positive")
    nodes = center[..., None] + scale[..., None] * rule.nodes
    log_w = (np.log(rule.weights) + np.log(scale)[..., None]
             + 0.5 * (rule.nodes**2 - nodes**2))
    return nodes, log_w


def adapt_rule(rule: QuadratureRule, center: float, scale: float) -> QuadratureRule:
    """Recentre/rescale a rule at a mode while preserving phi-weighted integrals.

    The adapted rule evaluates exactly like the base rule: sum(w' h(node'))
    still approximates integral h(x) phi(x) dx, but the nodes now sit where
    the integrand actually lives.
    """
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    nodes = center + scale * rule.nodes
    weights = rule.weights * scale * np.exp(0.5 * (rule.nodes**2 - nodes**2))
    return QuadratureRule(nodes, weights)


@dataclass
class OptimResult:
    """Outcome of maximize(); argmax is never worse than the start point."""

    argmax: np.ndarray
    value: float
    converged: bool
    iterations: int


def _fd_gradient(objective, x, rel_step=6.0e-6):
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (objective(xp) - objective(xm)) / (2.0 * h)
    return grad


def maximize(objective, start, tol: float = 1e-6, max_iter: int | None = None,
             polish: bool = True) -> OptimResult:
    """Maximize a smooth objective from a start point, deterministically.

    Nelder-Mead simplex search (objective-change tolerance 1e-8, parameter
    tolerance 1e-6) followed by an optional quasi-Newton polish.  The
    returned value is never below the objective at the start point, and
    converged means the finite-difference gradient norm is at most
    tol * (1 + |value|).

    Raises ValueError when the objective is not finite at the start point.
    """
    x0 = np.atleast_1d(np.asarray(start, dtype=float))
    f0 = float(objective(x0))
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the start point")

    def neg(x):
        v = objective(np.asarray(x, dtype=float))
        return -v if np.isfinite(v) else 1e300

    cap = max_iter if max_iter is not None else 2000 * x0.size
    res = optimize.minimize(
        neg, x0, method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": cap, "maxfev": cap},
    )
    best_x, best_f = np.asarray(res.x, dtype=float), -float(res.fun)
    iterations = int(res.nit)

    if polish:
        try:
            res2 = optimize.minimize(neg, best_x, method="BFGS",
                                     options={"gtol": 1e-10, "maxiter": 200})
            if np.all(np.isfinite(res2.x)) and -float(res2.fun) > best_f:
                best_x, best_f = np.asarray(res2.x, dtype=float), -float(res2.fun)
            iterations += int(res2.nit)
        except (ValueError, FloatingPointError):  # pragma: no cover - scipy internals
            pass

    if f0 > best_f:
        best_x, best_f = x0, f0

    grad = _fd_gradient(objective, best_x)
    converged = bool(np.linalg.norm(grad) <= tol * (1.0 + abs(best_f)))
    return OptimResult(argmax=best_x, value=best_f, converged=converged,
                       iterations=iterations)
