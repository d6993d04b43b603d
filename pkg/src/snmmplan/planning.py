"""Macroscopic distribution planning.

Three planners produce a sequence of mixture parameters from the fitted
initial swarm distribution to a single-component goal:

* ``di``: displacement interpolation of each component toward the goal
  along the Gaussian optimal-transport geodesic, ignoring obstacles;
* ``snmm-apf``: gradient descent of ``g_sn * U_sn + g_cs * U_cs`` on the
  skewed densities;
* ``gmm-apf``: the same on plain Gaussians plus a thresholded repulsive term
  ``g_rep * ln(U_rep)`` that is active only while ``U_rep > eta``.

Weights stay fixed along every plan. APF gradients are central finite
differences of the grid potentials in ``(mu, L)`` coordinates, where
``L`` is the lower Cholesky factor of the precision matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlockedComponentError, ConfigError, ParameterError
from .mixture import (
    MixtureParams,
    SNComponent,
    component_values,
    density_field,
    gaussian_grid,
    l2_distance_sq,
)

log = logging.getLogger(__name__)

PLANNERS = ("di", "snmm-apf", "gmm-apf")
MAX_HALVINGS = 10
DEFAULT_DI_STEPS = 859


@dataclass(frozen=True)
class GoalSpec:
    component: SNComponent

    @classmethod
    def from_dict(cls, d):
        return cls(SNComponent.from_dict(d))

    def to_dict(self):
        return self.component.to_dict()


@dataclass
class ApfConfig:
    gamma_sn: float = 1.0
    gamma_cs: float = 0.1
    max_steps: int = 3000
    lr_mu: float = 10.0
    lr_L: float = 1e-3
    max_mu_step: float = 0.02  # m per step and component
    max_L_step: float = 1e-3
    success_fraction: float = 0.01
    fd_step: float = 1e-4
    gamma_rep: float = 1.0
    eta: float = 0.05

    def __post_init__(self):
        if self.gamma_sn < 0 or self.gamma_cs < 0 or (self.gamma_sn == 0 and self.gamma_cs == 0):
            raise ConfigError("gamma_sn and gamma_cs must be non-negative and not both zero")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.gamma_rep < 0 or self.max_steps < 1:
            raise ConfigError("gamma_rep must be >= 0 and max_steps >= 1")


@dataclass
class PlanTrajectory:
    """Plan frames at normalised times ``s`` in ``[0, 1]``.

    ``skewed`` tells the controller whether frames are skewed mixtures
    (SNMM planners) or plain Gaussian mixtures (``gmm-apf``).
    """

    planner: str
    s: np.ndarray
    frames: list
    skewed: bool = True
    success: bool = True
    potentials: dict = field(default_factory=dict)

    @property
    def steps(self):
        return len(self.frames) - 1

    def frame_at(self, k):
        return self.frames[k]


def _retime(n_frames):
    if n_frames == 1:
        return np.array([0.0])
    return np.arange(n_frames) / (n_frames - 1)


# ---------------------------------------------------------------------------
# Displacement interpolation


def _sym_power(a, p):
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min() <= 0:
        raise ParameterError("matrix square root of a non-SPD matrix")
    out = (vecs * vals**p) @ vecs.T
    return 0.5 * (out + out.T)


def gaussian_geodesic(sigma0, sigma_f, s):
    """Covariance at fraction ``s`` of the Gaussian Wasserstein geodesic."""
    r = _sym_power(sigma0, 0.5)
    r_inv = _sym_power(sigma0, -0.5)
    mid = _sym_power(r @ sigma_f @ r, 0.5)
    inner = (1.0 - s) * sigma0 + s * mid
    out = r_inv @ inner @ inner @ r_inv
    return 0.5 * (out + out.T)


def plan_di(initial, goal, steps=DEFAULT_DI_STEPS):
    """Displacement-interpolation plan with ``steps + 1`` frames."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    g = goal.component
    s_grid = np.arange(steps + 1) / steps
    frames = [initial]
    for s in s_grid[1:]:
        comps = tuple(
            SNComponent((1.0 - s) * c.mu + s * g.mu, gaussian_geodesic(c.sigma, g.sigma, s))
            for c in initial.components
        )
        frames.append(MixtureParams(initial.weights, comps))
    return PlanTrajectory("di", s_grid, frames, skewed=True, success=True)


# ---------------------------------------------------------------------------
# Potentials


def potential_sn(params, goal, grid, skewed=True):
    """``0.5 * ln int (p - f_goal)^2``; ``-inf`` when the densities coincide."""
    p = density_field(params, grid, skewed)
    f = density_field(MixtureParams.single(goal.component), grid, skewed)
    d = l2_distance_sq(p, f)
    return 0.5 * math.log(d) if d > 0 else -math.inf


def potential_cs(params, goal, grid, skewed=True):
    """Weighted sum of per-component CS divergences to the goal."""
    gv = component_values(goal.component, grid, skewed)
    gg = grid.inner(gv, gv)
    total = 0.0
    for w, comp in zip(params.weights, params.components):
        v = component_values(comp, grid, skewed)
        cross = grid.inner(v, gv)
        if not cross > 0:
            return math.inf
        total += w * (-math.log(cross) + 0.5 * math.log(grid.inner(v, v)) + 0.5 * math.log(gg))
    return total


def repulsive_potential(params, grid):
    """Gaussian-mixture mass on occupied cells, ``int phi (1 - Q)``."""
    if grid.field.is_free:
        return 0.0
    occ = 1.0 - grid.q
    return float(
        sum(w * grid.inner(gaussian_grid(c, grid), occ) for w, c in zip(params.weights, params.components))
    )


class ApfObjective:
    """Grid potential for one planner, evaluated per component.

    Each component contributes a density array plus its inner products with
    the goal; perturbing one component only recomputes that component.
    """

    def __init__(self, weights, goal, grid, cfg, mode):
        if mode not in ("snmm", "gmm"):
            raise ConfigError(f"unknown APF mode {mode!r}")
        self.mode = mode
        self.skewed = mode == "snmm"
        self.weights = np.asarray(weights, dtype=float)
        self.cfg = cfg
        self.grid = grid
        self.occ = None if grid.field.is_free else 1.0 - grid.q
        self.goal_vals = component_values(goal.component, grid, self.skewed)
        self.goal_energy = grid.inner(self.goal_vals, self.goal_vals)
        self.success_level = 0.5 * math.log(cfg.success_fraction * self.goal_energy)

    def component_state(self, comp):
        g = self.grid
        phi = gaussian_grid(comp, g)
        if self.skewed and not g.field.is_free:
            z = g.inner(phi, g.q)
            if not z > 1e-6:
                raise BlockedComponentError("component fully blocked")
            vals = phi * g.q / z
        else:
            vals = phi
        rep = 0.0
        if self.mode == "gmm" and self.occ is not None:
            rep = g.inner(phi, self.occ)
        cross = g.inner(vals, self.goal_vals)
        own = g.inner(vals, vals)
        return vals, cross, own, rep

    def evaluate(self, states, rest=None, i=None, active=None):
        """Potential from per-component states.

        ``rest`` optionally holds the precomputed weighted sum of all
        components except ``i`` minus the goal. ``active`` overrides the
        repulsive indicator ``U_rep > eta``.
        """
        g = self.grid
        if rest is None:
            resid = -self.goal_vals
            for w, st in zip(self.weights, states):
                resid = resid + w * st[0]
        else:
            resid = rest + self.weights[i] * states[i][0]
        d = g.inner(resid, resid)
        u_sn = 0.5 * math.log(d) if d > 0 else -math.inf
        u_cs = 0.0
        for w, (_, cross, own, _) in zip(self.weights, states):
            if not cross > 0:
                u_cs = math.inf
                break
            u_cs += w * (-math.log(cross) + 0.5 * math.log(own) + 0.5 * math.log(self.goal_energy))
        u_rep = float(sum(w * st[3] for w, st in zip(self.weights, states)))
        total = self.cfg.gamma_sn * u_sn + self.cfg.gamma_cs * u_cs
        on = u_rep > self.cfg.eta if active is None else active
        if self.mode == "gmm" and on and u_rep > 0:
            total += self.cfg.gamma_rep * math.log(u_rep)
        return {"U": total, "U_sn": u_sn, "U_cs": u_cs, "U_rep": u_rep}

    def active(self, value):
        return self.mode == "gmm" and value["U_rep"] > self.cfg.eta

    def rest_sums(self, states):
        full = -self.goal_vals
        for w, st in zip(self.weights, states):
            full = full + w * st[0]
        return [full - w * st[0] for w, st in zip(self.weights, states)]


def _to_vec(comp):
    L = comp.precision_cholesky
    return np.array([comp.mu[0], comp.mu[1], L[0, 0], L[1, 0], L[1, 1]])


def _from_vec(v):
    if v[2] <= 0 or v[4] <= 0:
        raise ParameterError("Cholesky diagonal must stay positive")
    L = np.array([[v[2], 0.0], [v[3], v[4]]])
    return SNComponent.from_precision_cholesky(v[:2], L)


def apf_potential(params, goal, grid, cfg, mode="snmm"):
    obj = ApfObjective(params.weights, goal, grid, cfg, mode)
    return obj.evaluate([obj.component_state(c) for c in params.components])


def apf_gradient(params, goal, grid, cfg, mode="snmm", objective=None, states=None):
    """Central-difference gradient of the planner potential.

    Returns an ``(N_C, 5)`` array over ``(mu_x, mu_y, L00, L10, L11)``. The
    repulsive indicator is held at its value at ``params``, so the term adds
    nothing when ``U_rep <= eta``.
    """
    obj = objective or ApfObjective(params.weights, goal, grid, cfg, mode)
    if states is None:
        states = [obj.component_state(c) for c in params.components]
    on = obj.active(obj.evaluate(states))
    rests = obj.rest_sums(states)
    h = cfg.fd_step
    grad = np.zeros((params.n_components, 5))
    for i, comp in enumerate(params.components):
        base = _to_vec(comp)
        for k in range(5):
            vals = []
            for sgn in (1.0, -1.0):
                v = base.copy()
                v[k] += sgn * h
                trial = list(states)
                trial[i] = obj.component_state(_from_vec(v))
                vals.append(obj.evaluate(trial, rests[i], i, active=on)["U"])
            grad[i, k] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def _clip_step(step, cfg):
    out = step.copy()
    for row in out:
        n_mu = np.hypot(row[0], row[1])
        if n_mu > cfg.max_mu_step:
            row[:2] *= cfg.max_mu_step / n_mu
        n_L = np.linalg.norm(row[2:])
        if n_L > cfg.max_L_step:
            row[2:] *= cfg.max_L_step / n_L
    return out


def plan_apf(initial, goal, grid, cfg=None, mode="snmm"):
    """Potential-field plan; one frame per optimisation step.

    The loop ends successfully once ``U_sn`` falls to
    ``0.5 * ln(success_fraction * int f_goal^2)``. Each step follows the
    negative gradient (rates ``lr_mu``, ``lr_L``, clipped per component) and
    halves it up to ten times until the potential decreases; otherwise the
    smallest step is taken anyway and flagged in ``potentials["forced"]``.
    A step that would leave the parameter domain keeps the current state.
    Hitting ``max_steps`` first means failure.

    The repulsive indicator is a switch with zero derivative, so the line
    search compares candidates with it held at the current iterate's value
    (``potentials["U_step"]``); ``potentials["U"]`` records the potential
    with the indicator re-evaluated. Without this the drop of
    ``g_rep * ln(eta)`` at the threshold would make ``U_rep > eta``
    absorbing for any monotone search.
    """
    cfg = cfg or ApfConfig()
    obj = ApfObjective(initial.weights, goal, grid, cfg, mode)
    vec = np.array([_to_vec(c) for c in initial.components])
    comps = list(initial.components)
    states = [obj.component_state(c) for c in comps]
    cur = obj.evaluate(states)
    frames = [initial]
    trace = {key: [val] for key, val in cur.items()}
    trace["U_step"] = [cur["U"]]
    trace["forced"] = [False]
    rates = np.array([cfg.lr_mu, cfg.lr_mu, cfg.lr_L, cfg.lr_L, cfg.lr_L])
    success = cur["U_sn"] <= obj.success_level
    while not success and len(frames) <= cfg.max_steps:
        params = MixtureParams(initial.weights, tuple(comps))
        grad = apf_gradient(params, goal, grid, cfg, mode, objective=obj, states=states)
        step = _clip_step(-rates * grad, cfg)
        on = obj.active(cur)
        taken, forced = None, False
        for k in range(MAX_HALVINGS + 1):
            try:
                cand_vec = vec + step
                cand_comps = [_from_vec(v) for v in cand_vec]
                cand_states = [obj.component_state(c) for c in cand_comps]
                res = obj.evaluate(cand_states, active=on)
            except (ParameterError, BlockedComponentError):
                res = None
            if res is not None and res["U"] < cur["U"]:
                taken = (cand_vec, cand_comps, cand_states, res)
                break
            if k == MAX_HALVINGS and res is not None and not math.isnan(res["U"]):
                taken, forced = (cand_vec, cand_comps, cand_states, res), True
                break
            step = step * 0.5
        u_step = cur["U"]
        if taken is not None:
            vec, comps, states, res = taken
            u_step = res["U"]
            cur = obj.evaluate(states)
        frames.append(MixtureParams(initial.weights, tuple(comps)))
        for key in ("U", "U_sn", "U_cs", "U_rep"):
            trace[key].append(cur[key])
        trace["U_step"].append(u_step)
        trace["forced"].append(forced or taken is None)
        success = cur["U_sn"] <= obj.success_level
    trace = {k: np.asarray(v) for k, v in trace.items()}
    planner = "snmm-apf" if mode == "snmm" else "gmm-apf"
    if not success:
        log.info("%s stopped at max_steps=%d (U=%.6f)", planner, cfg.max_steps, cur["U"])
    return PlanTrajectory(planner, _retime(len(frames)), frames, skewed=(mode == "snmm"),
                          success=bool(success), potentials=trace)


def make_plan(planner, initial, goal, grid, apf=None, di_steps=DEFAULT_DI_STEPS):
    if planner == "di":
        return plan_di(initial, goal, di_steps)
    if planner == "snmm-apf":
        return plan_apf(initial, goal, grid, apf, mode="snmm")
    if planner == "gmm-apf":
        return plan_apf(initial, goal, grid, apf, mode="gmm")
    raise ConfigError(f"unknown planner {planner!r}; expected one of {PLANNERS}")


# ---------------------------------------------------------------------------
# Trajectory files


def _plan_header(n_components):
    cols = ["s"]
    cols += [f"w{i}" for i in range(n_components)]
    for i in range(n_components):
        cols += [f"mu{i}_x", f"mu{i}_y", f"sigma{i}_xx", f"sigma{i}_xy", f"sigma{i}_yy"]
    return cols


def write_plan(path, plan):
    """One frame per line plus a ``<path>.json`` sidecar with planner metadata."""
    from . import io

    n = plan.frames[0].n_components
    rows = []
    for s, fr in zip(plan.s, plan.frames):
        row = [float(s)] + [float(w) for w in fr.weights]
        for c in fr.components:
            row += [float(c.mu[0]), float(c.mu[1]), float(c.sigma[0, 0]), float(c.sigma[0, 1]),
                    float(c.sigma[1, 1])]
        rows.append(row)
    path = io.write_rows_csv(path, _plan_header(n), rows)
    io.write_json(path.with_name(path.name + ".json"),
                  {"planner": plan.planner, "skewed": plan.skewed, "success": plan.success,
                   "steps": plan.steps, "n_components": n})
    return path


def read_plan(path):
    from pathlib import Path

    from . import io

    path = Path(path)
    meta = io.read_json(path.with_name(path.name + ".json"))
    n = int(meta["n_components"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    frames = []
    for row in data:
        w = row[1 : 1 + n]
        comps = []
        for i in range(n):
            mx, my, sxx, sxy, syy = row[1 + n + 5 * i : 1 + n + 5 * (i + 1)]
            comps.append(SNComponent([mx, my], [[sxx, sxy], [sxy, syy]]))
        frames.append(MixtureParams(w / w.sum(), tuple(comps)))
    return PlanTrajectory(meta["planner"], data[:, 0], frames, skewed=bool(meta["skewed"]),
                          success=bool(meta["success"]))
