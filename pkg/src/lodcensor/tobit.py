"""Per-patient censored normal regression within one isotope cluster.

The model for a patient's k peaks regresses the (latent) log intensity on
the cluster's mean-intensity pattern; observed peaks contribute a normal
density term and censored peaks the normal CDF at their LOD threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_SQRT_2PI, log_norm_cdf, maximize

SIGMA_FLOOR = 1e-6


class NotEstimableError(ValueError):
    """Raised when a model carries no information to estimate (e.g. every
    cell censored for a per-patient fit)."""


@dataclass
class TobitFit:
    """Per-patient, per-cluster censored-regression estimates.

    degenerate marks designs where the slope is not identified (single
    peak, or constant covariate) and was pinned to zero.
    """

    alpha: float
    beta: float
    sigma: float
    loglik: float
    converged: bool
    n_observed: int
    degenerate: bool = False


def _as_cluster_arrays(y, delta, xbar, t):
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta)
    xbar = np.asarray(xbar, dtype=float)
    t = np.asarray(t, dtype=float)
    if not (y.shape == delta.shape == xbar.shape == t.shape) or y.ndim != 1:
        raise ValueError("y, delta, xbar and t must be 1-d arrays of equal length")
    return y, delta, xbar, t


def tobit_loglik(params, y, delta, xbar, t) -> float:
    """Censored-normal log-likelihood of (alpha, beta, sigma) for one patient.

    Observed cells (delta = 1) contribute log phi((y - alpha - beta*xbar)/sigma)
    - log sigma, censored cells log Phi((t - alpha - beta*xbar)/sigma); the
    censored term is evaluated through log_norm_cdf so deep censoring stays
    finite.
    """
    alpha, beta, sigma = (float(v) for v in params)
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    y, delta, xbar, t = _as_cluster_arrays(y, delta, xbar, t)
    mu = alpha + beta * xbar
    z = (y - mu) / sigma
    ll_obs = -np.log(sigma) - 0.5 * z * z - LOG_SQRT_2PI
    ll_cen = log_norm_cdf((t - mu) / sigma)
    return float(np.sum(np.where(delta == 1, ll_obs, ll_cen)))


def _observed_least_squares(y, xbar):
    """(alpha, beta, sigma_ml) of plain least squares; beta 0 when the
    covariate carries no spread."""
    k = y.size
    if k >= 2 and np.ptp(xbar) > 0.0:
        xc = xbar - xbar.mean()
        beta = float(np.dot(xc, y) / np.dot(xc, xc))
    else:
        beta = 0.0
    alpha = float(y.mean() - beta * xbar.mean())
    resid = y - alpha - beta * xbar
    sigma = float(np.sqrt(np.mean(resid**2)))
    return alpha, beta, sigma


def fit_tobit(y, delta, xbar, t) -> TobitFit:
    """Maximum-likelihood censored regression for one patient and cluster.

    Starts from least squares on the observed peaks (sigma start 0.5 when a
    residual SD is undefined); with no censoring the ML solution is the
    closed-form least-squares fit.  The slope is pinned to zero for
    degenerate designs (k = 1 or constant covariate).

    Raises NotEstimableError when every peak is censored.
    """
    y, delta, xbar, t = _as_cluster_arrays(y, delta, xbar, t)
    obs = delta == 1
    n_obs = int(obs.sum())
    if n_obs == 0:
        raise NotEstimableError("all peaks are censored; the per-patient model has no information")

    degenerate = y.size == 1 or np.ptp(xbar) == 0.0
    if n_obs >= 2 and not degenerate and np.ptp(xbar[obs]) > 0.0:
        alpha0, beta0, sigma0 = _observed_least_squares(y[obs], xbar[obs])
    else:
        alpha0, beta0, sigma0 = float(y[obs].mean()), 0.0, float(np.std(y[obs]))
    if not np.isfinite(sigma0) or sigma0 <= 0.0:
        sigma0 = 0.5

    if obs.all():
        # no censoring: Tobit reduces to Gaussian regression, solved exactly
        if degenerate:
            alpha, beta = float(y.mean()), 0.0
            sigma = max(float(np.std(y)), SIGMA_FLOOR)
        else:
            alpha, beta, sigma = _observed_least_squares(y, xbar)
            sigma = max(sigma, SIGMA_FLOOR)
        ll = tobit_loglik((alpha, beta, sigma), y, delta, xbar, t)
        return TobitFit(alpha=alpha, beta=beta, sigma=sigma, loglik=ll,
                        converged=True, n_observed=n_obs, degenerate=degenerate)

    if degenerate:
        def objective(v):
            return tobit_loglik((v[0], 0.0, SIGMA_FLOOR + np.exp(v[1])), y, delta, xbar, t)
        start = (alpha0, np.log(max(sigma0, 2.0 * SIGMA_FLOOR)))
        res = maximize(objective, start)
        alpha, beta = float(res.argmax[0]), 0.0
        sigma = SIGMA_FLOOR + float(np.exp(res.argmax[1]))
    else:
        def objective(v):
            return tobit_loglik((v[0], v[1], SIGMA_FLOOR + np.exp(v[2])), y, delta, xbar, t)
        start = (alpha0, beta0, np.log(max(sigma0, 2.0 * SIGMA_FLOOR)))
        res = maximize(objective, start)
        alpha, beta = float(res.argmax[0]), float(res.argmax[1])
        sigma = SIGMA_FLOOR + float(np.exp(res.argmax[2]))

    ll = tobit_loglik((alpha, beta, sigma), y, delta, xbar, t)
    return TobitFit(alpha=alpha, beta=beta, sigma=sigma, loglik=ll,
                    converged=res.converged, n_observed=n_obs, degenerate=degenerate)


def tobit_summary(fit: TobitFit, grand_mean: float) -> float:
    """Cluster summary alpha + beta * grand_mean, the within-cluster average
    of the fitted peak means."""
    return float(fit.alpha + fit.beta * float(grand_mean))
