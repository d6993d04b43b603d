"""Parameter learning for skewed-normal mixtures.

The learner alternates an E-step (responsibilities), a closed-form weight
update and, per component, gradient steps on the mean and on the Cholesky
factor ``L`` of the precision matrix (``inv(sigma) = L @ L.T``). Truncated
moments ``E[X Q(X)] / E[Q(X)]`` and ``E[(X - mu)(X - mu)^T Q(X)] / E[Q(X)]``
come from the shared quadrature grid, which makes the analytic gradients the
exact derivatives of the grid-approximated surrogate.

A classical GMM-EM (:func:`fit_gmm`) provides the baseline and the
initialisation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FitDivergenceError, ZeroDensityError
from .mixture import (
    BLOCKED_NORMALIZER,
    MixtureParams,
    SNComponent,
    gaussian_grid,
    gaussian_logpdf,
    normalize_weights,
    skew_normalizer,
)

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6
COV_FLOOR = 1e-4
MAX_HALVINGS = 10
NLL_MONOTONE_TOL = 1e-3
EARLY_STOP_DELTA = 1e-6
EARLY_STOP_PATIENCE = 5


@dataclass
class LearnConfig:
    n_components: int = 2
    outer_iters: int = 100  # L1
    inner_iters: int = 20  # L2
    lr_mu: float = 1e-2
    lr_L: float = 1e-3
    seed: int = 0
    gmm_restarts: int = 3
    early_stop: bool = True

    def __post_init__(self):
        if self.n_components < 1 or self.outer_iters < 1 or self.inner_iters < 1:
            raise ConfigError("component count and iteration limits must be >= 1")
        if not (self.lr_mu > 0 and self.lr_L > 0):
            raise ConfigError("learning rates must be positive")


@dataclass
class FitResult:
    params: MixtureParams
    trace: list = field(default_factory=list)
    init: MixtureParams | None = None


def covariance_floor(grid):
    """Eigenvalue floor for fitted covariances on ``grid``.

    With obstacles the normalizer is a grid sum, which cannot resolve a
    Gaussian narrower than a cell, so the floor rises to ``dx * dy``.
    """
    if grid.field.is_free:
        return COV_FLOOR
    return max(COV_FLOOR, grid.dx * grid.dy)


def floor_covariance(sigma, floor=COV_FLOOR):
    vals, vecs = np.linalg.eigh(sigma)
    if vals.min() >= floor:
        return sigma
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Likelihood and E-step


def component_log_densities(data, params, grid):
    """``(N, N_C)`` matrix of ``ln f_i(x_n)`` (``-inf`` on occupied samples)."""
    data = np.asarray(data, dtype=float)
    q = grid.field.q(data)
    with np.errstate(divide="ignore"):
        log_q = np.log(q)
    out = np.empty((len(data), params.n_components))
    for i, comp in enumerate(params.components):
        z = skew_normalizer(comp, grid)
        out[:, i] = gaussian_logpdf(data, comp) + log_q - math.log(z)
    return out


def _logsumexp_rows(a):
    m = np.max(a, axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (safe + np.log(np.sum(np.exp(a - safe), axis=1, keepdims=True)))[:, 0]


def nll(data, params, grid):
    """Negative log-likelihood of ``data`` under the mixture.

    A sample with zero density makes the result ``inf``; the offending index
    is logged.
    """
    logf = component_log_densities(data, params, grid)
    with np.errstate(divide="ignore"):
        ll = _logsumexp_rows(logf + np.log(params.weights))
    bad = np.flatnonzero(~np.isfinite(ll))
    if len(bad):
        log.warning("sample %d has zero density; NLL is infinite", bad[0])
        return math.inf
    return float(-np.sum(ll))


def e_step(data, params, grid):
    """Responsibilities ``gamma[n, i]``; each row sums to one."""
    logf = component_log_densities(data, params, grid)
    with np.errstate(divide="ignore"):
        a = logf + np.log(params.weights)
    norm = _logsumexp_rows(a)
    bad = np.flatnonzero(~np.isfinite(norm))
    if len(bad):
        raise ZeroDensityError(f"sample {bad[0]} has zero density under every component", int(bad[0]))
    gamma = np.exp(a - norm[:, None])
    gamma /= gamma.sum(axis=1, keepdims=True)
    return gamma


def weight_update(gamma, floor=WEIGHT_FLOOR):
    """Column means of ``gamma``, floored at ``floor`` and renormalised."""
    gamma = np.asarray(gamma, dtype=float)
    return normalize_weights(gamma.sum(axis=0) / gamma.shape[0], floor)


def surrogate(data, gamma, params, grid):
    """The EM upper bound ``J~(Gamma, Theta)`` (``0 ln 0 = 0``)."""
    logf = component_log_densities(data, params, grid)
    gamma = np.asarray(gamma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = gamma * (np.log(gamma) - np.log(params.weights) - logf)
    terms = np.where(gamma > 0, terms, 0.0)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Truncated moments and gradients


class _GridGaussian:
    """Grid quantities for one candidate component, computed on demand."""

    def __init__(self, comp, grid):
        self.comp = comp
        self.grid = grid
        self.free = grid.field.is_free
        if self.free:
            self.z = 1.0
        else:
            self.w = gaussian_grid(comp, grid) * grid.q
            self.z = grid.integrate(self.w)

    def moments(self):
        """Truncated mean and second moment about ``mu``."""
        mu = self.comp.mu
        if self.free:
            return mu.copy(), np.array(self.comp.sigma)
        g = self.grid
        w = self.w
        wx = np.sum(w, axis=0)  # marginal over y, per x column
        wy = np.sum(w, axis=1)
        z_sum = np.sum(wx)
        dxs = g.xs - mu[0]
        dys = g.ys - mu[1]
        m_x = np.dot(wx, dxs) / z_sum
        m_y = np.dot(wy, dys) / z_sum
        s_xx = np.dot(wx, dxs * dxs) / z_sum
        s_yy = np.dot(wy, dys * dys) / z_sum
        s_xy = float(dys @ w @ dxs) / z_sum
        mean = mu + np.array([m_x, m_y])
        second = np.array([[s_xx, s_xy], [s_xy, s_yy]])
        return mean, second


def truncated_moments(comp, grid):
    """``(E[Q], E[XQ]/E[Q], E[(X-mu)(X-mu)^T Q]/E[Q])`` on the grid."""
    gg = _GridGaussian(comp, grid)
    mean, second = gg.moments()
    return gg.z, mean, second


def _weighted_stats(data, gamma_i, mu):
    r = float(np.sum(gamma_i))
    mu_hat = gamma_i @ data / r
    d = data - mu
    sigma_hat = (d * gamma_i[:, None]).T @ d / r
    return r, mu_hat, sigma_hat


def _grad_from_moments(r, comp, mean, second, mu_hat, sigma_hat):
    L = comp.precision_cholesky
    g_mu = r * comp.precision @ (mean - mu_hat)
    g_L = np.tril(-r * (second - sigma_hat) @ L)
    return g_mu, g_L


def grad_mu(i, gamma, params, grid, data):
    """Analytic ``dJ~/dmu_i``.

    ``N * w_i`` is taken as the responsibility mass ``sum_n gamma[n, i]``,
    which is what the weight update assigns before flooring.
    """
    comp = params.components[i]
    gamma_i = np.asarray(gamma)[:, i]
    data = np.asarray(data, dtype=float)
    skew_normalizer(comp, grid)
    _, mean, second = truncated_moments(comp, grid)
    r, mu_hat, sigma_hat = _weighted_stats(data, gamma_i, comp.mu)
    return _grad_from_moments(r, comp, mean, second, mu_hat, sigma_hat)[0]


def grad_L(i, gamma, params, grid, data):
    """Analytic ``dJ~/dL_i`` projected onto lower-triangular matrices.

    The sample scatter is taken about the current mean, i.e. the exact
    derivative of the surrogate at the current iterate.
    """
    comp = params.components[i]
    gamma_i = np.asarray(gamma)[:, i]
    data = np.asarray(data, dtype=float)
    skew_normalizer(comp, grid)
    _, mean, second = truncated_moments(comp, grid)
    r, mu_hat, sigma_hat = _weighted_stats(data, gamma_i, comp.mu)
    return _grad_from_moments(r, comp, mean, second, mu_hat, sigma_hat)[1]


def _component_objective(data, gamma_i, gg):
    """Part of ``J~`` that depends on component ``i``'s location and shape."""
    if not gg.z > BLOCKED_NORMALIZER:
        return math.inf
    return float(-gamma_i @ gaussian_logpdf(data, gg.comp) + gamma_i.sum() * math.log(gg.z))


def _candidate(mu, L, grid):
    try:
        comp = SNComponent.from_precision_cholesky(mu, L)
        sigma = floor_covariance(comp.sigma, covariance_floor(grid))
        if sigma is not comp.sigma:
            comp = SNComponent(mu, sigma)
    except Exception:  # singular or non-finite step
        return None
    return _GridGaussian(comp, grid)


def minimize_component(data, gamma_i, comp, grid, iters, lr_mu, lr_L):
    """Inner loop: ``iters`` gradient steps on one component with backtracking.

    A step that raises the surrogate is halved up to ten times; if it still
    does not help the component is left where it is and the loop stops.
    """
    gg = _GridGaussian(comp, grid)
    f = _component_objective(data, gamma_i, gg)
    for _ in range(iters):
        c = gg.comp
        mean, second = gg.moments()
        r, mu_hat, sigma_hat = _weighted_stats(data, gamma_i, c.mu)
        g_mu, g_L = _grad_from_moments(r, c, mean, second, mu_hat, sigma_hat)
        L = c.precision_cholesky
        scale = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = _candidate(c.mu - scale * lr_mu * g_mu, L - scale * lr_L * g_L, grid)
            if cand is not None:
                f_new = _component_objective(data, gamma_i, cand)
                if f_new <= f:
                    accepted = True
                    break
            scale *= 0.5
        if not accepted:
            break
        step_size = abs(f - f_new)
        gg, f = cand, f_new
        if step_size == 0.0:
            break
    return gg.comp


def outer_iteration(data, params, grid, config):
    """One pass of the outer loop: E-step, weights, then every inner loop."""
    data = np.asarray(data, dtype=float)
    gamma = e_step(data, params, grid)
    weights = weight_update(gamma)
    comps = [
        minimize_component(data, gamma[:, i], c, grid, config.inner_iters, config.lr_mu, config.lr_L)
        for i, c in enumerate(params.components)
    ]
    return MixtureParams(weights, tuple(comps))


def fit_snmm(data, config, grid, init=None):
    """Fit a skewed-normal mixture; returns params and the per-iteration NLL.

    Initialised from :func:`fit_gmm` unless ``init`` is given. ``trace[0]``
    is the NLL of the initial parameters. Stops after ``outer_iters`` or when
    the NLL improves by less than ``1e-6`` for five iterations in a row.
    """
    data = np.asarray(data, dtype=float)
    if len(data) < config.n_components:
        raise ConfigError("need at least as many samples as components")
    if init is None:
        init = fit_gmm(data, config.n_components, config.seed, restarts=config.gmm_restarts)
    floor = covariance_floor(grid)
    params = init.with_components(
        tuple(SNComponent(c.mu, floor_covariance(c.sigma, floor)) for c in init.components)
    )
    trace = [nll(data, params, grid)]
    if not math.isfinite(trace[0]):
        raise FitDivergenceError("initial NLL is not finite (samples on obstacles?)", trace)
    stall = 0
    for _ in range(config.outer_iters):
        params = outer_iteration(data, params, grid, config)
        val = nll(data, params, grid)
        if not math.isfinite(val):
            raise FitDivergenceError("NLL diverged", trace + [val])
        if val > trace[-1] + NLL_MONOTONE_TOL:
            raise FitDivergenceError(f"NLL increased from {trace[-1]:.6f} to {val:.6f}", trace + [val])
        stall = stall + 1 if trace[-1] - val < EARLY_STOP_DELTA else 0
        trace.append(val)
        if config.early_stop and stall >= EARLY_STOP_PATIENCE:
            break
    return FitResult(params, trace, init)


# ---------------------------------------------------------------------------
# Classical GMM-EM


def _kmeanspp(data, k, rng):
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min(((data[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(len(data))])
        else:
            centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.asarray(centers)


def _gmm_log_resp(data, weights, means, covs):
    logp = np.stack(
        [gaussian_logpdf(data, SNComponent(m, c)) for m, c in zip(means, covs)], axis=1
    ) + np.log(weights)
    norm = _logsumexp_rows(logp)
    return logp - norm[:, None], float(norm.sum())


def _gmm_em_once(data, k, rng, max_iter, tol):
    n = len(data)
    global_cov = floor_covariance(np.cov(data.T, bias=True) if n > 1 else np.eye(2))
    means = _kmeanspp(data, k, rng)
    labels = np.argmin(((data[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(k)[labels]
    ll_prev = -math.inf
    ll = -math.inf
    for _ in range(max_iter):
        # M-step
        nk = resp.sum(axis=0)
        weights = np.empty(k)
        covs = np.empty((k, 2, 2))
        for i in range(k):
            if nk[i] < 1e-8:
                # Empty cluster: restart it at the sample farthest from all means.
                far = np.argmax(np.min(((data[:, None, :] - means[None]) ** 2).sum(-1), axis=1))
                means[i] = data[far]
                covs[i] = global_cov / k
                weights[i] = 1.0 / n
                continue
            means[i] = resp[:, i] @ data / nk[i]
            d = data - means[i]
            covs[i] = floor_covariance((d * resp[:, i, None]).T @ d / nk[i])
            weights[i] = nk[i] / n
        weights = normalize_weights(weights, WEIGHT_FLOOR)
        # E-step
        log_resp, ll = _gmm_log_resp(data, weights, means, covs)
        resp = np.exp(log_resp)
        if abs(ll - ll_prev) <= tol * max(1.0, abs(ll)):
            break
        ll_prev = ll
    params = MixtureParams(weights, tuple(SNComponent(m, c) for m, c in zip(means, covs)))
    return params, ll


def fit_gmm(data, n_components, seed=0, restarts=1, max_iter=500, tol=1e-10):
    """EM for a Gaussian mixture with k-means++ seeding; best of ``restarts``."""
    data = np.asarray(data, dtype=float)
    if len(data) < n_components:
        raise ConfigError("need at least as many samples as components")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        params, ll = _gmm_em_once(data, n_components, rng, max_iter, tol)
        if best is None or ll > best[1]:
            best = (params, ll)
    return best[0]
