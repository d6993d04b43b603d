"""Microscopic swarm control.

Agents follow a single integrator ``x' = u`` with ``|u| <= v_max``. The
control descends ``g_att * U_att + g_ca * U_ca`` where

* ``U_att = int (kde - target)^2`` compares a Gaussian KDE of the swarm with
  the current plan frame, and
* ``U_ca = sum_n (1/rho_n - 1/rho_0)^2 [rho_n <= rho_0]`` penalises the
  distance ``rho_n`` from agent ``n`` to the nearest obstacle or agent.

Both forces are exact negative gradients of their grid/closed-form
potentials, so they can be checked against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mixture import MixtureParams, density_field

log = logging.getLogger(__name__)

MIN_RHO = 1e-6
COLLISION_DISTANCE = 1e-3


@dataclass
class ControlConfig:
    gamma_att: float = 3e4
    gamma_ca: float = 1e-2
    rho_0: float = 0.2
    kde_bandwidth: float | None = None  # None: Silverman-style, re-estimated every step
    dt: float = 0.05
    v_max: float = 1.0
    steps_per_frame: int = 1
    settle_steps: int = 200
    success_tol: float = 0.2

    def __post_init__(self):
        vals = [self.gamma_att, self.gamma_ca, self.rho_0, self.dt, self.v_max, self.steps_per_frame,
                self.success_tol]
        if self.kde_bandwidth is not None:
            vals.append(self.kde_bandwidth)
        if any(not v > 0 for v in vals) or self.settle_steps < 0:
            raise ConfigError("control parameters must be positive")


def silverman_bandwidth(positions):
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    sigma = math.sqrt(max(0.5 * float(pos.var(axis=0).sum()), 1e-12))
    return sigma * n ** (-1.0 / 6.0)


def _kernels(positions, grid, h):
    """Per-agent 1-D kernels, each normalised to unit sum on its grid axis."""
    pos = np.asarray(positions, dtype=float)
    kx = np.exp(-0.5 * ((grid.xs[None, :] - pos[:, :1]) / h) ** 2)
    ky = np.exp(-0.5 * ((grid.ys[None, :] - pos[:, 1:]) / h) ** 2)
    return kx / kx.sum(axis=1, keepdims=True), ky / ky.sum(axis=1, keepdims=True)


def kde(positions, bandwidth, grid):
    """Isotropic Gaussian KDE on the grid, shape ``(ny, nx)``.

    Every kernel is normalised on the grid, so the estimate integrates to
    one even for agents near the workspace edge.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0 or not bandwidth > 0:
        raise ConfigError("kde needs at least one agent and a positive bandwidth")
    kx, ky = _kernels(pos, grid, bandwidth)
    return ky.T @ kx / (grid.cell_area * len(pos))


def attraction_potential(positions, target, bandwidth, grid):
    r = kde(positions, bandwidth, grid) - target
    return grid.inner(r, r)


def attractive_forces(positions, target, bandwidth, grid, estimate=None):
    """``-dU_att/dx_n`` for every agent, shape ``(N, 2)``.

    With ``u = k / sum(k)`` a normalised axis kernel and
    ``d = (grid - x_n) / h^2``, the derivative is ``u * (d - sum(u * d))``.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    h = bandwidth
    kx, ky = _kernels(pos, grid, h)
    n = len(pos)
    est = ky.T @ kx / (grid.cell_area * n) if estimate is None else estimate
    r = est - target
    a = ky @ r  # (N, nx)
    b = kx @ r.T  # (N, ny)
    dx = (grid.xs[None, :] - pos[:, :1]) / h**2
    dy = (grid.ys[None, :] - pos[:, 1:]) / h**2
    ux = kx * (dx - np.sum(kx * dx, axis=1, keepdims=True))
    uy = ky * (dy - np.sum(ky * dy, axis=1, keepdims=True))
    gx = np.sum(a * ux, axis=1)
    gy = np.sum(b * uy, axis=1)
    # dU/dx_n = 2 * cell * sum(r * dkde/dx_n) and kde carries 1 / (cell * N)
    return -(2.0 / n) * np.stack([gx, gy], axis=1)


class SpatialHash:
    """Uniform bucket grid with cell size ``cell`` for near-neighbour queries."""

    def __init__(self, positions, cell, workspace):
        self.pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        self.cell = float(cell)
        self.x0, self.y0 = workspace.x_min, workspace.y_min
        self.nx = max(1, int(math.ceil(workspace.width / self.cell)))
        self.ny = max(1, int(math.ceil(workspace.height / self.cell)))
        ix, iy = self._cells(self.pos)
        key = iy * self.nx + ix
        order = np.argsort(key, kind="stable")
        counts = np.bincount(key, minlength=self.nx * self.ny)
        depth = max(1, int(counts.max()) if len(key) else 1)
        table = np.full((self.nx * self.ny, depth), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        sk = key[order]
        slot = np.arange(len(order)) - starts[sk]
        table[sk, slot] = order
        self.table = table
        self.ix, self.iy = ix, iy

    def _cells(self, pts):
        ix = np.clip(((pts[:, 0] - self.x0) // self.cell).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(((pts[:, 1] - self.y0) // self.cell).astype(np.int64), 0, self.ny - 1)
        return ix, iy

    def candidates(self):
        """Indices of agents in the 3x3 block around each agent, ``-1`` padded."""
        blocks = []
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                jx, jy = self.ix + ox, self.iy + oy
                ok = (jx >= 0) & (jx < self.nx) & (jy >= 0) & (jy < self.ny)
                rows = np.where(ok, jy * self.nx + jx, 0)
                blk = self.table[rows]
                blk[~ok] = -1
                blocks.append(blk)
        return np.concatenate(blocks, axis=1)

    def nearest(self, radius=None):
        """Nearest other agent within ``radius`` (default: the cell size).

        Returns ``(distance, index)`` with ``inf`` and ``-1`` where none.
        """
        radius = self.cell if radius is None else radius
        cand = self.candidates()
        n = len(self.pos)
        own = np.arange(n)[:, None]
        valid = (cand >= 0) & (cand != own)
        diff = self.pos[np.where(valid, cand, 0)] - self.pos[:, None, :]
        d = np.where(valid, np.hypot(diff[..., 0], diff[..., 1]), np.inf)
        j = np.argmin(d, axis=1) if d.shape[1] else np.zeros(n, dtype=int)
        best = d[np.arange(n), j] if d.shape[1] else np.full(n, np.inf)
        idx = np.where(best <= radius, cand[np.arange(n), j] if d.shape[1] else -1, -1)
        best = np.where(best <= radius, best, np.inf)
        return best, idx


def _rho(positions, field, rho_0):
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    d_obs, g_obs = field.signed_distance(pos)
    d_ag, nbr = SpatialHash(pos, rho_0, field.workspace).nearest()
    use_obs = d_obs <= d_ag
    rho = np.where(use_obs, d_obs, d_ag)
    return rho, use_obs, g_obs, nbr


def avoidance_potential(positions, field, rho_0):
    rho, *_ = _rho(positions, field, rho_0)
    act = rho <= rho_0
    r = np.maximum(rho[act], MIN_RHO)
    return float(np.sum((1.0 / r - 1.0 / rho_0) ** 2))


def avoidance_forces(positions, field, rho_0, events=None, step=None):
    """``-dU_ca/dx`` for every agent, shape ``(N, 2)``.

    An agent's own term pushes it along the gradient of its clearance; when
    its nearest neighbour is another agent the reaction acts on that agent.
    Distances at or below ``1e-6`` are floored, which caps the magnitude, and
    an event is logged.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    rho, use_obs, g_obs, nbr = _rho(pos, field, rho_0)
    forces = np.zeros_like(pos)
    act = rho <= rho_0
    if not act.any():
        return forces
    tiny = act & (rho <= MIN_RHO)
    if tiny.any() and events is not None:
        for n in np.flatnonzero(tiny):
            events.append({"step": step, "agent": int(n), "kind": "near-collision"})
    r = np.maximum(rho, MIN_RHO)
    coef = np.where(act, 2.0 * (1.0 / r - 1.0 / rho_0) / r**2, 0.0)
    other = np.where(nbr >= 0, nbr, 0)
    diff = pos - pos[other]
    dist = np.hypot(diff[:, 0], diff[:, 1])
    unit = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
    grad = np.where(use_obs[:, None], g_obs, unit)
    forces += coef[:, None] * grad
    ag = act & ~use_obs & (nbr >= 0)
    np.add.at(forces, nbr[ag], -coef[ag, None] * unit[ag])
    return forces


def clamp_speed(u, v_max):
    speed = np.hypot(u[:, 0], u[:, 1])
    scale = np.where(speed > v_max, v_max / np.where(speed > 0, speed, 1.0), 1.0)
    return u * scale[:, None]


@dataclass
class SwarmState:
    positions: np.ndarray
    lengths: np.ndarray
    step: int = 0

    @classmethod
    def start(cls, positions):
        pos = np.array(positions, dtype=float).reshape(-1, 2)
        return cls(pos, np.zeros(len(pos)))


def step_swarm(state, target, grid, cfg, events=None):
    """One synchronous integrator step toward ``target`` (grid values)."""
    pos = state.positions
    h = cfg.kde_bandwidth or silverman_bandwidth(pos)
    f = cfg.gamma_att * attractive_forces(pos, target, h, grid)
    f += cfg.gamma_ca * avoidance_forces(pos, grid.field, cfg.rho_0, events, state.step)
    u = clamp_speed(f, cfg.v_max)
    new = pos + u * cfg.dt
    ws = grid.field.workspace
    inside = ws.contains(new)
    if not inside.all():
        new = ws.clip(new)
        if events is not None:
            for n in np.flatnonzero(~inside):
                events.append({"step": state.step, "agent": int(n), "kind": "boundary-clamp"})
    d = new - pos
    return SwarmState(new, state.lengths + np.hypot(d[:, 0], d[:, 1]), state.step + 1)


@dataclass
class EpisodeResult:
    trajectories: np.ndarray  # (T + 1, N, 2)
    lengths: np.ndarray
    collisions: list
    events: list
    final_error: float
    success: bool
    bandwidth: float
    speed_ok: bool = True
    min_separation: float = math.inf
    extra: dict = field(default_factory=dict)

    @property
    def length_mean(self):
        return float(self.lengths.mean())

    @property
    def length_std(self):
        return float(self.lengths.std())

    @property
    def steps(self):
        return len(self.trajectories) - 1


def _collisions(pos, field, step, cell):
    out = []
    if not field.is_free:
        for n in np.flatnonzero(field.occupied(pos)):
            out.append({"step": step, "agent": int(n), "kind": "obstacle"})
    d, idx = SpatialHash(pos, cell, field.workspace).nearest()
    for n in np.flatnonzero(d < COLLISION_DISTANCE):
        if n < idx[n]:
            out.append({"step": step, "agent": int(n), "kind": "agent", "other": int(idx[n])})
    return out, d


def goal_error(positions, goal_values, grid, bandwidth=None):
    """``int (kde - goal)^2 / int goal^2`` for the final swarm."""
    h = bandwidth or silverman_bandwidth(positions)
    r = kde(positions, h, grid) - goal_values
    return grid.inner(r, r) / grid.inner(goal_values, goal_values)


def run_episode(positions, plan, grid, cfg, goal=None):
    """Track every plan frame for ``steps_per_frame`` steps, then settle.

    ``goal`` is the density (grid values) used for the success test; the
    final plan frame's density is used when omitted.
    """
    state = SwarmState.start(positions)
    traj = [state.positions.copy()]
    events, collisions = [], []
    speed_ok = True
    min_sep = math.inf
    cache = {}
    last = None

    def target_of(frame):
        key = id(frame)
        if key not in cache:
            cache.clear()
            cache[key] = density_field(frame, grid, plan.skewed).values
        return cache[key]

    frames = list(plan.frames)
    schedule = [f for f in frames for _ in range(cfg.steps_per_frame)]
    schedule += [frames[-1]] * cfg.settle_steps
    bound = cfg.v_max * cfg.dt * (1.0 + 1e-12)
    hits, sep = _collisions(state.positions, grid.field, 0, cfg.rho_0)
    collisions += hits
    min_sep = min(min_sep, float(sep.min()) if len(sep) else math.inf)
    for frame in schedule:
        last = frame
        prev = state.positions
        state = step_swarm(state, target_of(frame), grid, cfg, events)
        d = state.positions - prev
        if np.any(np.hypot(d[:, 0], d[:, 1]) > bound):
            speed_ok = False
        hits, sep = _collisions(state.positions, grid.field, state.step, cfg.rho_0)
        collisions += hits
        min_sep = min(min_sep, float(sep.min()) if len(sep) else math.inf)
        traj.append(state.positions.copy())
    if goal is None:
        goal = density_field(last or frames[-1], grid, plan.skewed).values
    h = silverman_bandwidth(state.positions)
    err = goal_error(state.positions, goal, grid, h)
    success = not collisions and err <= cfg.success_tol
    return EpisodeResult(np.asarray(traj), state.lengths, collisions, events, float(err), bool(success), h,
                         speed_ok, min_sep)


def goal_values(goal_component, grid, skewed=True):
    return density_field(MixtureParams.single(goal_component), grid, skewed).values
