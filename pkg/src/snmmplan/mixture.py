"""Gaussian, skewed-normal (BRF-SN) and mixture (BRF-SNMM) densities.

A skewed component is a bivariate Gaussian multiplied by the free-space
indicator ``Q`` and renormalised by ``E[Q(X)]``. Every expectation over the
workspace is a midpoint sum on a :class:`~snmmplan.geometry.QuadratureGrid`.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import BlockedComponentError, GridMismatchError, ParameterError

log = logging.getLogger(__name__)

BLOCKED_NORMALIZER = 1e-6
SYMMETRY_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-12
MAX_CONSECUTIVE_REJECTIONS = 100_000
_CACHE_SIZE = 20_000

_cache_lock = threading.Lock()


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SNComponent:
    """Location ``mu`` (2,) and SPD covariance ``sigma`` (2, 2)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu).reshape(2)
        sigma = np.array(self.sigma, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise ParameterError("component parameters must be finite")
        if abs(sigma[0, 1] - sigma[1, 0]) > SYMMETRY_TOL * max(1.0, np.abs(sigma).max()):
            raise ParameterError(f"covariance is not symmetric: {sigma.tolist()}")
        sigma[1, 0] = sigma[0, 1]
        det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] ** 2
        if not (sigma[0, 0] > 0 and det > 0):
            raise ParameterError(f"covariance is not positive definite: {sigma.tolist()}")
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def det(self):
        s = self.sigma
        return float(s[0, 0] * s[1, 1] - s[0, 1] ** 2)

    @property
    def precision(self):
        s = self.sigma
        return np.array([[s[1, 1], -s[0, 1]], [-s[0, 1], s[0, 0]]]) / self.det

    @property
    def precision_cholesky(self):
        """Lower-triangular ``L`` with positive diagonal and ``L @ L.T = inv(sigma)``."""
        return np.linalg.cholesky(self.precision)

    @classmethod
    def from_precision_cholesky(cls, mu, L):
        L = np.tril(np.asarray(L, dtype=float))
        P = L @ L.T
        det = P[0, 0] * P[1, 1] - P[0, 1] ** 2
        if not det > 0:
            raise ParameterError("Cholesky factor is singular")
        sigma = np.array([[P[1, 1], -P[0, 1]], [-P[0, 1], P[0, 0]]]) / det
        return cls(mu, sigma)

    def key(self):
        return self.mu.tobytes() + self.sigma.tobytes()

    def allclose(self, other, tol=1e-10):
        return bool(
            np.allclose(self.mu, other.mu, rtol=0, atol=tol)
            and np.allclose(self.sigma, other.sigma, rtol=0, atol=tol)
        )

    def to_dict(self):
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu"], d["sigma"])

    def __repr__(self):
        return f"SNComponent(mu={self.mu.tolist()}, sigma={self.sigma.tolist()})"


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Mixture weights plus components.

    The same parameters describe a GMM (free skew) or a BRF-SNMM (with a
    skewing function); which one is meant is decided by the grid passed to
    the evaluation functions.
    """

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = _frozen(self.weights).reshape(-1)
        comps = tuple(self.components)
        if len(comps) != len(w) or len(w) == 0:
            raise ParameterError("weights and components must have equal, non-zero length")
        if np.any(w <= 0):
            raise ParameterError(f"all weights must be positive, got {w.tolist()}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ParameterError(f"weights must sum to one, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self):
        return len(self.components)

    @classmethod
    def single(cls, comp):
        return cls(np.ones(1), (comp,))

    def with_components(self, components):
        return MixtureParams(self.weights, tuple(components))

    def allclose(self, other, tol=1e-10):
        return (
            self.n_components == other.n_components
            and np.allclose(self.weights, other.weights, rtol=0, atol=tol)
            and all(a.allclose(b, tol) for a, b in zip(self.components, other.components))
        )

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], tuple(SNComponent.from_dict(c) for c in d["components"]))

    def __repr__(self):
        return f"MixtureParams(weights={self.weights.tolist()}, components={list(self.components)})"


def normalize_weights(w, floor=0.0):
    """Project onto the simplex with an optional lower bound per entry."""
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    if floor > 0 and np.any(w < floor):
        # Pin small entries at the floor and rescale the rest to fill the simplex.
        low = w < floor
        w = np.where(low, floor, w * (1.0 - floor * low.sum()) / w[~low].sum())
    # Exact unit sum after rounding.
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


# ---------------------------------------------------------------------------
# Gaussian kernels


def gaussian_pdf(x, comp):
    """Bivariate normal density at ``x`` (any shape ``(..., 2)``)."""
    x = np.asarray(x, dtype=float)
    s = comp.sigma
    det = comp.det
    dx = x[..., 0] - comp.mu[0]
    dy = x[..., 1] - comp.mu[1]
    quad = (s[1, 1] * dx * dx - 2.0 * s[0, 1] * dx * dy + s[0, 0] * dy * dy) / det
    return np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))


def gaussian_logpdf(x, comp):
    x = np.asarray(x, dtype=float)
    s = comp.sigma
    det = comp.det
    dx = x[..., 0] - comp.mu[0]
    dy = x[..., 1] - comp.mu[1]
    quad = (s[1, 1] * dx * dx - 2.0 * s[0, 1] * dx * dy + s[0, 0] * dy * dy) / det
    return -0.5 * quad - math.log(2.0 * math.pi) - 0.5 * math.log(det)


def gaussian_grid(comp, grid):
    """Gaussian density at every lattice point, shape ``grid.shape``."""
    s = comp.sigma
    det = comp.det
    dx = grid.xs - comp.mu[0]
    dy = (grid.ys - comp.mu[1])[:, None]
    quad = (s[1, 1] * dx * dx)[None, :] - (2.0 * s[0, 1] * dy) * dx[None, :] + s[0, 0] * dy * dy
    return np.exp(quad * (-0.5 / det)) * (1.0 / (2.0 * math.pi * math.sqrt(det)))


def _cache_get(grid, key):
    with _cache_lock:
        store = grid.cache.setdefault("normalizers", OrderedDict())
        val = store.get(key)
        if val is not None:
            store.move_to_end(key)
        return val


def _cache_put(grid, key, value):
    with _cache_lock:
        store = grid.cache.setdefault("normalizers", OrderedDict())
        store[key] = value
        if len(store) > _CACHE_SIZE:
            store.popitem(last=False)


def skew_normalizer(comp, grid, phi=None):
    """``E[Q(X)]`` for ``X ~ N(mu, sigma)`` by grid quadrature.

    Exactly 1 for an obstacle-free field. Raises
    :class:`BlockedComponentError` when the value drops to ``1e-6`` or less.
    """
    if grid.field.is_free:
        return 1.0
    key = comp.key()
    z = _cache_get(grid, key)
    if z is None:
        if phi is None:
            phi = gaussian_grid(comp, grid)
        z = grid.inner(phi, grid.q)
        _cache_put(grid, key, z)
    if not z > BLOCKED_NORMALIZER:
        raise BlockedComponentError(
            f"component at mu={comp.mu.tolist()} is fully blocked (E[Q]={z:.3e})"
        )
    return z


def brfsn_pdf(x, comp, grid):
    """Skewed-normal density ``phi(x) Q(x) / E[Q]`` (zero on obstacles)."""
    if grid.field.is_free:
        return gaussian_pdf(x, comp)
    z = skew_normalizer(comp, grid)
    return gaussian_pdf(x, comp) * grid.field.q(x) / z


def component_values(comp, grid, skewed=True):
    """Normalised component density on the grid."""
    phi = gaussian_grid(comp, grid)
    if not skewed or grid.field.is_free:
        return phi
    z = skew_normalizer(comp, grid, phi=phi)
    return phi * grid.q / z


def weighted_density(x, weights, components, grid):
    """``sum_i w_i f_i(x)`` for arbitrary non-negative weights."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for w, comp in zip(weights, components):
        if w != 0:
            out = out + w * brfsn_pdf(x, comp, grid)
    return out


def snmm_pdf(x, params, grid):
    """BRF-SNMM density at ``x``."""
    return weighted_density(x, params.weights, params.components, grid)


def gmm_pdf(x, params):
    x = np.asarray(x, dtype=float)
    return sum(w * gaussian_pdf(x, c) for w, c in zip(params.weights, params.components))


# ---------------------------------------------------------------------------
# Fields on the grid


@dataclass(frozen=True, eq=False)
class DensityField:
    """Density values on a quadrature grid."""

    values: np.ndarray
    grid: object
    params: MixtureParams | None = None
    skewed: bool = True

    def integral(self):
        return self.grid.integrate(self.values)

    def self_energy(self):
        return self.grid.inner(self.values, self.values)


def density_field(params, grid, skewed=True):
    """Mixture density on the grid; ``skewed=False`` gives the plain GMM."""
    vals = np.zeros(grid.shape)
    for w, comp in zip(params.weights, params.components):
        vals += w * component_values(comp, grid, skewed)
    return DensityField(vals, grid, params, skewed)


def component_field(comp, grid, skewed=True):
    return DensityField(component_values(comp, grid, skewed), grid, MixtureParams.single(comp), skewed)


def _check_same_grid(p, q):
    if not p.grid.same_as(q.grid):
        raise GridMismatchError("density fields live on different grids")


def l2_distance_sq(p, q):
    """``int (p - q)^2 dx`` by quadrature."""
    _check_same_grid(p, q)
    d = p.values - q.values
    return p.grid.inner(d, d)


def cs_divergence(f1, f2):
    """Cauchy-Schwarz divergence ``-ln(<f1,f2> / sqrt(<f1,f1><f2,f2>))``.

    Returns ``inf`` when the fields do not overlap on the grid.
    """
    _check_same_grid(f1, f2)
    return cs_divergence_values(f1.values, f2.values, f1.grid)


def cs_divergence_values(a, b, grid, bb=None):
    ab = grid.inner(a, b)
    aa = grid.inner(a, a)
    if bb is None:
        bb = grid.inner(b, b)
    if not (ab > 0 and aa > 0 and bb > 0):
        log.debug("zero overlap in CS divergence (<f1,f2>=%r)", ab)
        return math.inf
    # Summing the self terms first keeps the result exactly symmetric.
    return -math.log(ab) + 0.5 * (math.log(aa) + math.log(bb))


# ---------------------------------------------------------------------------
# Sampling


def sample(params, field, count, seed=None, return_labels=False):
    """Draw ``count`` points from the BRF-SNMM by per-component rejection.

    Each point first picks its component from the weights; Gaussian proposals
    for that component are then redrawn until one lands in free space, so the
    component proportions follow the weights exactly in expectation.
    """
    rng = np.random.default_rng(seed)
    labels = rng.choice(params.n_components, size=count, p=params.weights)
    out = np.empty((count, 2))
    for i, comp in enumerate(params.components):
        idx = np.flatnonzero(labels == i)
        need = len(idx)
        if need == 0:
            continue
        chol = np.linalg.cholesky(comp.sigma)
        got = []
        n_got = 0
        misses = 0
        while n_got < need:
            batch = max(64, 2 * (need - n_got))
            cand = rng.standard_normal((batch, 2)) @ chol.T + comp.mu
            ok = field.q(cand) > 0
            hits = cand[ok]
            if len(hits) == 0:
                misses += batch
                if misses > MAX_CONSECUTIVE_REJECTIONS:
                    raise BlockedComponentError(
                        f"component {i} rejected {misses} consecutive proposals"
                    )
                continue
            misses = 0
            got.append(hits)
            n_got += len(hits)
        out[idx] = np.concatenate(got)[:need]
    if return_labels:
        return out, labels
    return out
