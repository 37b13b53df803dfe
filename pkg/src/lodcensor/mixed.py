"""Random-intercept censored regression for one isotope cluster.

One joint model per cluster across patients: the latent log intensity of
patient i at peak j is alpha + beta * xbar_j + a_i + noise, with
a_i ~ N(0, tau^2).  Censored cells contribute the probability of falling
below their LOD threshold.  The marginal likelihood integrates the random
intercept out with mode-adapted Gauss-Hermite quadrature: each evaluation
recentres the rule at every patient's posterior mode and curvature, which
is what makes a 100-point rule saturate.

tau^2 is reported as exactly zero when the variance profile collapses to
the boundary; such clusters shrink every patient onto the population line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .data import ClusterData
from .numerics import LOG_SQRT_2PI, QuadratureRule, gauss_hermite, maximize, trunc_norm_mean_below
from .tobit import SIGMA_FLOOR, NotEstimableError

DEFAULT_N_QUAD = 100

# log tau below log(TAU_ZERO_RATIO * sigma) collapses to an exact zero: the
# shrink weight is then < 1e-6 for any realistic cluster size.
TAU_ZERO_RATIO = 1e-8


@dataclass(frozen=True)
class MixedConfig:
    """Quadrature and optimizer settings for the per-cluster fits.

    The parameter search runs on a reduced adapted rule (n_quad_search
    points); the reported log-likelihood, the boundary decision and all
    posterior summaries use the full n_quad rule.  Mode-adapted rules agree
    across these sizes to far below the optimizer's resolution, which the
    quadrature-saturation checks make explicit.
    """

    n_quad: int = DEFAULT_N_QUAD
    n_quad_search: int = 24
    grad_tol: float = 1e-4
    max_iter: int | None = None


@dataclass
class MixedCensoredFit:
    """Population parameters of one cluster's random-intercept censored fit."""

    alpha: float
    beta: float
    tau2: float
    sigma2: float
    loglik: float
    converged: bool
    cluster_id: int
    n_patients_used: int
    degenerate: bool = False


@dataclass(frozen=True)
class PatientPosterior:
    """Empirical-Bayes quantities for one patient in a fitted cluster.

    a_hat is the posterior mean of the random intercept, cond_mean the
    posterior expectation of the patient's average latent intensity
    (observed cells enter as-is, censored cells as posterior-averaged
    truncated means), and shrink_weight = tau^2 / (tau^2 + sigma^2 / k).
    """

    a_hat: float
    cond_mean: float
    shrink_weight: float


class _Terms:
    """Per-theta client data: residual sufficient statistics and censored
    thresholds, shared by likelihood, mode search and posteriors."""

    def __init__(self, data: ClusterData, alpha: float, beta: float, sigma: float):
        self.sigma = sigma
        self.mu = alpha + beta * data.xbar
        self.obs = data.delta == 1
        self.cen = ~self.obs
        self.any_cen = bool(self.cen.any())
        r = (data.y - self.mu) * self.obs
        self.n_obs = self.obs.sum(axis=1)
        self.s1 = r.sum(axis=1)
        self.s2 = (r * r).sum(axis=1)
        self.zc = (data.thresholds - self.mu) / sigma
        self.const = -self.n_obs * (np.log(sigma) + LOG_SQRT_2PI)

    def loglik_at(self, a):
        """Joint data log-likelihood given intercept values a, shape (n, m)."""
        s = self.sigma
        out = self.const[:, None] - (
            self.s2[:, None] - 2.0 * a * self.s1[:, None] + self.n_obs[:, None] * a * a
        ) / (2.0 * s * s)
        if self.any_cen:
            z = self.zc[None, :, None] - a[:, None, :] / s
            out = out + (log_ndtr(z) * self.cen[:, :, None]).sum(axis=1)
        return out

    def d_loglik(self, a):
        """First and second derivative in a, both shape (n,)."""
        s = self.sigma
        d1 = (self.s1 - self.n_obs * a) / (s * s)
        d2 = -self.n_obs / (s * s)
        if self.any_cen:
            z = self.zc[None, :] - a[:, None] / s
            ratio = np.exp(-0.5 * z * z - LOG_SQRT_2PI - log_ndtr(z))
            d1 = d1 - (ratio * self.cen).sum(axis=1) / s
            d2 = d2 + ((-z * ratio - ratio * ratio) * self.cen).sum(axis=1) / (s * s)
        return d1, d2


def _modes(terms: _Terms, tau: float, max_iter: int = 60):
    """Per-patient mode and curvature scale of the integrand in x-space
    (a = tau * x).  The log-integrand is strictly concave, so safeguarded
    Newton from zero converges for every patient."""
    n = terms.n_obs.size
    x = np.zeros(n)
    for _ in range(max_iter):
        d1, d2 = terms.d_loglik(tau * x)
        grad = tau * d1 - x
        hess = tau * tau * d2 - 1.0
        step = np.clip(grad / hess, -10.0, 10.0)
        x = x - step
        if np.max(np.abs(step)) < 1e-11:
            break
    _, d2 = terms.d_loglik(tau * x)
    scale = 1.0 / np.sqrt(1.0 - tau * tau * d2)
    return x, scale


def _adapted_nodes(terms: _Terms, tau: float, rule: QuadratureRule):
    """Adapted node intercepts (n, m), their log-weights and the softmax-ready
    log-integrand G with logsumexp(G, 1) the per-patient log marginal."""
    x0, scale = _modes(terms, tau)
    xn = x0[:, None] + scale[:, None] * rule.nodes[None, :]
    log_w = (np.log(rule.weights)[None, :] + np.log(scale)[:, None]
             + 0.5 * (rule.nodes[None, :] ** 2 - xn * xn))
    a = tau * xn
    return a, terms.loglik_at(a) + log_w


def _check_theta(theta):
    alpha, beta, tau2, sigma2 = (float(v) for v in theta)
    if tau2 < 0.0:
        raise ValueError("tau2 must be non-negative")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    return alpha, beta, tau2, sigma2


def marginal_loglik(theta, data: ClusterData, rule: QuadratureRule) -> float:
    """Marginal log-likelihood of (alpha, beta, tau2, sigma2) for a cluster.

    Each patient's integral over the random intercept is evaluated on the
    rule recentred at that patient's mode, in log space; tau2 = 0 collapses
    to the integrand at a = 0 with no quadrature.
    """
    alpha, beta, tau2, sigma2 = _check_theta(theta)
    if data.n_patients == 0:
        raise ValueError("cluster has no patients")
    terms = _Terms(data, alpha, beta, np.sqrt(sigma2))
    if tau2 == 0.0:
        return float(terms.loglik_at(np.zeros((data.n_patients, 1)))[:, 0].sum())
    _, g = _adapted_nodes(terms, np.sqrt(tau2), rule)
    return float(logsumexp(g, axis=1).sum())


def _start_values(data: ClusterData, degenerate: bool):
    obs = data.delta == 1
    ys = data.y[obs]
    if not degenerate:
        xs = np.broadcast_to(data.xbar, data.y.shape)[obs]
        if np.ptp(xs) > 0.0:
            xc = xs - xs.mean()
            beta0 = float(np.dot(xc, ys) / np.dot(xc, xc))
        else:
            beta0 = 0.0
    else:
        beta0 = 0.0
    alpha0 = float(ys.mean() - beta0 * np.broadcast_to(data.xbar, data.y.shape)[obs].mean())

    resid = (data.y - alpha0 - beta0 * data.xbar) * obs
    n_obs = obs.sum(axis=1)
    informative = n_obs > 0
    m_i = np.where(informative, resid.sum(axis=1) / np.maximum(n_obs, 1), 0.0)
    dev = (resid - m_i[:, None] * obs)
    denom = float(np.maximum(n_obs - 1, 0).sum())
    if denom > 0:
        sigma2_0 = float((dev * dev)[obs].sum() / denom)
    else:
        sigma2_0 = float(np.var(ys)) / 2.0
    tau2_0 = float(np.var(m_i[informative]))
    sigma2_0 = max(sigma2_0, 1e-4)
    tau2_0 = max(tau2_0 - sigma2_0 / max(float(n_obs[informative].mean()), 1.0), 0.05 * sigma2_0)
    return alpha0, beta0, np.sqrt(tau2_0), np.sqrt(sigma2_0)


def fit_mixed_censored(data: ClusterData, config: MixedConfig = MixedConfig()) -> MixedCensoredFit:
    """Marginal maximum likelihood for one cluster.

    tau and sigma are searched on the log scale; when the profile pushes
    tau below TAU_ZERO_RATIO * sigma the variance is reported as exactly
    zero and (alpha, beta, sigma) are re-profiled at the boundary.  Clusters
    with a degenerate design (single peak or constant covariate) keep the
    slope pinned at zero.

    Raises NotEstimableError with fewer than two patients carrying at least
    one observed cell.
    """
    informative = int(((data.delta == 1).sum(axis=1) > 0).sum())
    if informative < 2:
        raise NotEstimableError(
            f"cluster {data.cluster_id}: {informative} patient(s) with observed cells; "
            "need at least 2 to estimate the random-intercept model"
        )
    degenerate = data.k == 1 or np.ptp(data.xbar) == 0.0
    rule_full = gauss_hermite(config.n_quad)
    rule_search = gauss_hermite(min(config.n_quad_search, config.n_quad))
    alpha0, beta0, tau0, sigma0 = _start_values(data, degenerate)

    def unpack(v):
        if degenerate:
            return float(v[0]), 0.0, float(np.exp(v[1])), SIGMA_FLOOR + float(np.exp(v[2]))
        return float(v[0]), float(v[1]), float(np.exp(v[2])), SIGMA_FLOOR + float(np.exp(v[3]))

    def objective(v, rule):
        alpha, beta, tau, sigma = unpack(v)
        return marginal_loglik((alpha, beta, tau * tau, sigma * sigma), data, rule)

    if degenerate:
        start = (alpha0, np.log(tau0), np.log(max(sigma0, 2 * SIGMA_FLOOR)))
    else:
        start = (alpha0, beta0, np.log(tau0), np.log(max(sigma0, 2 * SIGMA_FLOOR)))
    res = maximize(lambda v: objective(v, rule_search), start,
                   tol=config.grad_tol, max_iter=config.max_iter, polish=False)
    alpha, beta, tau, sigma = unpack(res.argmax)
    converged = res.converged

    if tau < TAU_ZERO_RATIO * sigma:
        # boundary: re-profile (alpha, beta, sigma) at tau^2 = 0 exactly
        def objective0(v):
            if degenerate:
                a, b, s = float(v[0]), 0.0, SIGMA_FLOOR + float(np.exp(v[1]))
            else:
                a, b, s = float(v[0]), float(v[1]), SIGMA_FLOOR + float(np.exp(v[2]))
            return marginal_loglik((a, b, 0.0, s * s), data, rule_full)

        if degenerate:
            start0 = (alpha, np.log(max(sigma - SIGMA_FLOOR, SIGMA_FLOOR)))
        else:
            start0 = (alpha, beta, np.log(max(sigma - SIGMA_FLOOR, SIGMA_FLOOR)))
        res0 = maximize(objective0, start0, tol=config.grad_tol,
                        max_iter=config.max_iter, polish=False)
        if degenerate:
            alpha, beta = float(res0.argmax[0]), 0.0
            sigma = SIGMA_FLOOR + float(np.exp(res0.argmax[1]))
        else:
            alpha, beta = float(res0.argmax[0]), float(res0.argmax[1])
            sigma = SIGMA_FLOOR + float(np.exp(res0.argmax[2]))
        tau2 = 0.0
        converged = res0.converged
    else:
        tau2 = tau * tau

    loglik = marginal_loglik((alpha, beta, tau2, sigma * sigma), data, rule_full)
    return MixedCensoredFit(
        alpha=alpha, beta=beta, tau2=tau2, sigma2=sigma * sigma,
        loglik=loglik, converged=bool(converged), cluster_id=data.cluster_id,
        n_patients_used=data.n_patients, degenerate=degenerate,
    )


def cluster_posteriors(data: ClusterData, fit: MixedCensoredFit,
                       rule: QuadratureRule | None = None) -> list[PatientPosterior]:
    """Posterior intercepts and conditional means for every patient at once.

    The same adapted nodes serve the normalizing integral, the posterior
    mean of a and the censored-cell truncated means, so the shrinkage
    identity a_hat = w * (cond_mean - population line) holds to quadrature
    accuracy.  Patients with every cell censored are fully supported.
    """
    if rule is None:
        rule = gauss_hermite(DEFAULT_N_QUAD)
    sigma = float(np.sqrt(fit.sigma2))
    k = data.k
    w = fit.tau2 / (fit.tau2 + fit.sigma2 / k)
    terms = _Terms(data, fit.alpha, fit.beta, sigma)
    obs_sum = (data.y * terms.obs).sum(axis=1)

    if fit.tau2 == 0.0:
        cell = np.broadcast_to(
            trunc_norm_mean_below(terms.mu, sigma, data.thresholds), data.y.shape)
        cond = (obs_sum + (cell * terms.cen).sum(axis=1)) / k
        return [PatientPosterior(a_hat=0.0, cond_mean=float(c), shrink_weight=0.0)
                for c in cond]

    a, g = _adapted_nodes(terms, np.sqrt(fit.tau2), rule)
    log_norm = logsumexp(g, axis=1)
    q = np.exp(g - log_norm[:, None])
    a_hat = (q * a).sum(axis=1)

    if terms.any_cen:
        z = terms.zc[None, :, None] - a[:, None, :] / sigma
        ratio = np.exp(-0.5 * z * z - LOG_SQRT_2PI - log_ndtr(z))
        cell = terms.mu[None, :, None] + a[:, None, :] - sigma * ratio
        e_cell = (cell * q[:, None, :]).sum(axis=2)
        cen_sum = (e_cell * terms.cen).sum(axis=1)
    else:
        cen_sum = np.zeros(data.n_patients)
    cond = (obs_sum + cen_sum) / k
    return [PatientPosterior(a_hat=float(ah), cond_mean=float(c), shrink_weight=float(w))
            for ah, c in zip(a_hat, cond)]


def posterior_intercept(y, delta, xbar, thresholds, fit: MixedCensoredFit,
                        rule: QuadratureRule | None = None) -> PatientPosterior:
    """Posterior summary for a single patient's cluster cells under a fit."""
    one = ClusterData(
        y=np.asarray(y, dtype=float)[None, :],
        delta=np.asarray(delta)[None, :],
        xbar=np.asarray(xbar, dtype=float),
        thresholds=np.asarray(thresholds, dtype=float),
        cluster_id=fit.cluster_id,
    )
    return cluster_posteriors(one, fit, rule)[0]


def shrunken_summary(posterior: PatientPosterior, fit: MixedCensoredFit,
                     grand_mean: float) -> float:
    """Patient's cluster summary on the population line plus the posterior
    intercept; equals (1 - w) * line + w * cond_mean by the shrinkage
    identity."""
    return float(fit.alpha + fit.beta * float(grand_mean) + posterior.a_hat)


def unshrunken_summary(posterior: PatientPosterior) -> float:
    """Conditional mean of the patient's average latent intensity; with no
    censoring this is exactly the observed within-cluster average."""
    return float(posterior.cond_mean)


def write_fit_dump(fits, path) -> None:
    """Optional CSV dump of per-cluster fits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cluster_id,alpha,beta,tau2,sigma2,loglik,converged\n")
        for fit in fits:
            fh.write(
                f"{fit.cluster_id},{fit.alpha!r},{fit.beta!r},{fit.tau2!r},"
                f"{fit.sigma2!r},{fit.loglik!r},{int(fit.converged)}\n"
            )
