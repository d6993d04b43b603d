"""Scenario generation and end-to-end experiment drivers."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, SNMMError
from .geometry import Circle, ConvexPolygon, SkewField, Workspace, build_grid
from .learning import LearnConfig, fit_gmm, fit_snmm, nll
from .mixture import MixtureParams, SNComponent, density_field, sample
from .planning import ApfConfig, GoalSpec, make_plan, write_plan
from .swarm import ControlConfig, goal_values, kde, run_episode, silverman_bandwidth

log = logging.getLogger(__name__)

APPROACHES = ("snmm-di", "snmm-apf", "gmm-apf")
_PLANNER_OF = {"snmm-di": "di", "snmm-apf": "snmm-apf", "gmm-apf": "gmm-apf"}
RESULT_COLUMNS = ("simulation", "approach", "steps", "length_mean", "length_std", "success",
                  "plan_success", "episode_success", "final_error", "collisions")
DESK_AGENTS = 100
FULL_AGENTS = 300


# ---------------------------------------------------------------------------
# Scenario configuration


@dataclass
class ScenarioConfig:
    name: str
    field: SkewField
    initial: MixtureParams
    goal: GoalSpec | None = None
    seed: int = 0
    n_agents: int = DESK_AGENTS
    dx: float = 0.1
    learn: LearnConfig = dataclasses.field(default_factory=LearnConfig)
    apf: ApfConfig = dataclasses.field(default_factory=ApfConfig)
    control: ControlConfig = dataclasses.field(default_factory=ControlConfig)
    di_steps: int = 859
    nc_sweep: tuple = (1, 2, 3, 4, 5)
    layout_seed: int | None = None

    def grid(self):
        return build_grid(self.field.workspace, self.dx, field=self.field)

    def to_dict(self):
        return {
            "name": self.name,
            "environment": {**self.field.to_dict(), "grid": {"dx": self.dx}},
            "initial": self.initial.to_dict(),
            "goal": None if self.goal is None else self.goal.to_dict(),
            "seed": self.seed,
            "n_agents": self.n_agents,
            "learn": dataclasses.asdict(self.learn),
            "apf": dataclasses.asdict(self.apf),
            "control": dataclasses.asdict(self.control),
            "di_steps": self.di_steps,
            "nc_sweep": list(self.nc_sweep),
            "layout_seed": self.layout_seed,
        }

    @classmethod
    def from_dict(cls, d):
        env = d["environment"]
        try:
            return cls(
                name=d["name"],
                field=SkewField.from_dict(env),
                initial=MixtureParams.from_dict(d["initial"]),
                goal=None if d.get("goal") is None else GoalSpec.from_dict(d["goal"]),
                seed=int(d.get("seed", 0)),
                n_agents=int(d.get("n_agents", DESK_AGENTS)),
                dx=float(env.get("grid", {}).get("dx", 0.1)),
                learn=LearnConfig(**d.get("learn", {})),
                apf=ApfConfig(**d.get("apf", {})),
                control=ControlConfig(**d.get("control", {})),
                di_steps=int(d.get("di_steps", 859)),
                nc_sweep=tuple(d.get("nc_sweep", (1, 2, 3, 4, 5))),
                layout_seed=d.get("layout_seed"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid scenario config: {exc}") from exc


# ---------------------------------------------------------------------------
# Exp-A: learning in the single-obstacle scene

EXP_A_SAMPLES = 300
# Rectangle between the two modes; coordinates are a reconstruction.
EXP_A_OBSTACLE = (7.0, 12.0, 8.6, 11.0)


def exp_a_ground_truth():
    return MixtureParams(
        np.array([0.5, 0.5]),
        (
            SNComponent([9.0, 12.0], [[1.0, 0.3], [0.3, 0.7]]),
            SNComponent([9.0, 7.0], [[1.0, -0.3], [-0.3, 0.7]]),
        ),
    )


def exp_a_field():
    return SkewField(Workspace(), (ConvexPolygon.rectangle(*EXP_A_OBSTACLE),))


def gen_exp_a(seed=0, out=None, dx=0.1):
    """Exp-A scenario and its 300 samples (written to ``out/samples.csv``)."""
    cfg = ScenarioConfig("exp-a", exp_a_field(), exp_a_ground_truth(), seed=seed,
                         n_agents=EXP_A_SAMPLES, dx=dx, learn=LearnConfig(seed=seed))
    data, labels = sample(cfg.initial, cfg.field, EXP_A_SAMPLES, seed=seed, return_labels=True)
    if out is not None:
        io.write_points_csv(Path(out) / "samples.csv", data)
    return cfg, data, labels


def run_exp_a(config, data):
    """NLL of SNMM, GMM and SNMM-with-GMM-parameters for each ``N_C``.

    Returns rows ``(n_components, approach, nll, status)``. GMM is the best
    of three EM restarts; the SNMM fit starts from that GMM.
    """
    grid = config.grid()
    free = grid.free_twin()
    rows = []
    for k in config.nc_sweep:
        lc = dataclasses.replace(config.learn, n_components=k)
        try:
            gmm = fit_gmm(data, k, lc.seed, restarts=lc.gmm_restarts)
        except SNMMError as exc:
            rows += [(k, a, float("nan"), f"error: {exc}") for a in ("gmm", "snmm-gmm", "snmm")]
            continue
        rows.append((k, "gmm", nll(data, gmm, free), "ok"))
        rows.append((k, "snmm-gmm", nll(data, gmm, grid), "ok"))
        try:
            fit = fit_snmm(data, lc, grid, init=gmm)
            rows.append((k, "snmm", nll(data, fit.params, grid), "ok"))
        except SNMMError as exc:
            rows.append((k, "snmm", float("nan"), f"error: {exc}"))
    return rows


def nll_table(rows):
    """``{approach: {n_components: nll}}`` view of :func:`run_exp_a` rows."""
    out = {}
    for k, approach, val, _ in rows:
        out.setdefault(approach, {})[k] = val
    return out


# ---------------------------------------------------------------------------
# Forest scenes

FOREST_START = MixtureParams(
    np.array([0.5, 0.5]),
    (
        SNComponent([3.0, 13.0], [[1.0, 0.0], [0.0, 1.0]]),
        SNComponent([3.0, 7.0], [[1.0, 0.0], [0.0, 1.0]]),
    ),
)
FOREST_GOAL = SNComponent([16.0, 10.0], [[2.0, 0.0], [0.0, 2.0]])
MAX_PROPOSALS = 10_000
FOREST_SPECS = {
    # count, radius, placement box (x0, x1, y0, y1), min gap, support limit
    "I": dict(count=14, radius=0.9, box=(6.0, 13.5, 0.8, 19.2), gap=0.6, lane=0.9, support=0.0),
    "II": dict(count=50, radius=0.4, box=(5.0, 19.5, 0.5, 19.5), gap=0.4, lane=None, support=0.10),
}
LAYOUT_SEEDS = {"I": 1, "II": 0}


def _grid_points(ws, dx=0.1):
    xs = np.arange(ws.x_min + dx / 2, ws.x_max, dx)
    ys = np.arange(ws.y_min + dx / 2, ws.y_max, dx)
    return np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)


def _support_mask(comp, pts, level=3.0):
    d = pts - comp.mu
    return np.einsum("...i,ij,...j->...", d, comp.precision, d) <= level**2


def support_occupancy(field, comps, dx=0.1):
    """Occupied fraction of each component's 3-sigma ellipse."""
    pts = _grid_points(field.workspace, dx)
    out = []
    for c in comps:
        sp = pts[_support_mask(c, pts)]
        out.append(float(field.occupied(sp).mean()) if len(sp) else 0.0)
    return out


def forest_layout(variant, seed):
    """Seeded circle forest between the start and goal regions.

    Forest-I keeps a central lane and leaves both supports untouched;
    Forest-II scatters smaller trees and keeps each support at most 10 %
    occupied.
    """
    if variant not in FOREST_SPECS:
        raise ConfigError(f"unknown forest variant {variant!r}")
    spec = FOREST_SPECS[variant]
    ws = Workspace()
    r = spec["radius"]
    rng = np.random.default_rng(seed)
    pts = _grid_points(ws)
    supports = [_support_mask(c, pts) for c in (*FOREST_START.components, FOREST_GOAL)]
    support_pts = [pts[m] for m in supports]
    occupied = [np.zeros(len(p), dtype=bool) for p in support_pts]
    placed = []
    for _ in range(MAX_PROPOSALS):
        if len(placed) == spec["count"]:
            break
        b = spec["box"]
        c = np.array([rng.uniform(b[0], b[1]), rng.uniform(b[2], b[3])])
        if spec["lane"] is not None and abs(c[1] - 10.0) < spec["lane"] + r:
            continue
        if any(np.hypot(*(c - p)) < 2 * r + spec["gap"] for p in placed):
            continue
        hit = [np.hypot(*(sp - c).T) <= r for sp in support_pts]
        if any(((o | h).mean() > spec["support"]) for o, h in zip(occupied, hit)):
            continue
        occupied = [o | h for o, h in zip(occupied, hit)]
        placed.append(c)
    if len(placed) < spec["count"]:
        raise ConfigError(f"placed {len(placed)} of {spec['count']} trees after {MAX_PROPOSALS} proposals")
    return SkewField(ws, tuple(Circle(np.round(c, 6), r) for c in placed))


def layout_path(variant):
    return resources.files("snmmplan") / "data" / f"forest_{variant.lower()}.json"


def load_forest_layout(variant):
    d = io.read_json(layout_path(variant))
    return SkewField.from_dict(d), d.get("seed")


def gen_forest(variant, seed=0, layout_seed=None, full=False, dx=0.1):
    """Forest scenario; the shipped layout unless ``layout_seed`` is given."""
    if layout_seed is None:
        fld, layout_seed = load_forest_layout(variant)
    else:
        fld = forest_layout(variant, layout_seed)
    n = FULL_AGENTS if full else DESK_AGENTS
    return ScenarioConfig(f"forest-{variant.lower()}", fld, FOREST_START, GoalSpec(FOREST_GOAL), seed=seed,
                          n_agents=n, dx=dx, learn=LearnConfig(n_components=2, seed=seed),
                          layout_seed=layout_seed)


# ---------------------------------------------------------------------------
# Forest pipeline


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)

    def add(self, row, plan_seconds):
        self.rows.append(row)
        self.timing.append({"simulation": row["simulation"], "approach": row["approach"],
                            "plan_seconds": plan_seconds})

    def row(self, simulation, approach):
        for r in self.rows:
            if r["simulation"] == simulation and r["approach"] == approach:
                return r
        raise KeyError((simulation, approach))

    def plan_seconds(self, simulation, approach):
        for r in self.timing:
            if r["simulation"] == simulation and r["approach"] == approach:
                return r["plan_seconds"]
        raise KeyError((simulation, approach))

    def write(self, path):
        return io.write_rows_csv(path, RESULT_COLUMNS, [[r[c] for c in RESULT_COLUMNS] for r in self.rows])

    def write_timing(self, path):
        cols = ("simulation", "approach", "plan_seconds")
        return io.write_rows_csv(path, cols, [[r[c] for c in cols] for r in self.timing])


def _episode_rows(ep):
    return [
        ["length_mean", ep.length_mean], ["length_std", ep.length_std],
        ["collisions", len(ep.collisions)], ["final_error", ep.final_error],
        ["speed_ok", ep.speed_ok], ["min_separation", ep.min_separation],
        ["steps", ep.steps], ["success", ep.success],
    ]


def write_trajectories(path, trajectories):
    t, n, _ = trajectories.shape
    step = np.repeat(np.arange(t), n)
    agent = np.tile(np.arange(n), t)
    flat = trajectories.reshape(-1, 2)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("agent_id,step,x,y\n")
        for a, s, (x, y) in zip(agent, step, flat):
            fh.write(f"{a},{s},{float(x)!r},{float(y)!r}\n")
    return path


def run_forest(config, approaches=APPROACHES, out=None, trajectories=True):
    """Fit, plan, simulate and tabulate each approach on one forest scene."""
    for a in approaches:
        if a not in APPROACHES:
            raise ConfigError(f"unknown approach {a!r}")
    grid = config.grid()
    out = None if out is None else Path(out)
    artifacts = []

    def emit(path, kind):
        artifacts.append({"path": str(Path(path).relative_to(out)), "kind": kind})

    agents = sample(config.initial, config.field, config.n_agents, seed=config.seed)
    fit = fit_snmm(agents, dataclasses.replace(config.learn, n_components=2), grid)
    initial = fit.params
    goal_vals = goal_values(config.goal.component, grid)
    if out is not None:
        emit(io.write_points_csv(out / "agents_initial.csv", agents), "points")
        emit(io.write_json(out / "initial_params.json", initial.to_dict()), "params")
        emit(io.write_occupancy_raster(out / "occupancy.txt", grid), "raster")
        emit(io.write_raster(out / "goal_density.txt", goal_vals, grid), "raster")
        emit(io.write_rows_csv(out / "fit_trace.csv", ("iteration", "nll"), list(enumerate(fit.trace))), "csv")

    table = ResultsTable()
    episodes = {}
    for approach in approaches:
        t0 = time.perf_counter()
        plan = make_plan(_PLANNER_OF[approach], initial, config.goal, grid, config.apf, config.di_steps)
        plan_seconds = time.perf_counter() - t0
        ep = run_episode(agents, plan, grid, config.control, goal_vals)
        episodes[approach] = (plan, ep)
        table.add({
            "simulation": config.name, "approach": approach, "steps": plan.steps,
            "length_mean": ep.length_mean, "length_std": ep.length_std,
            "success": bool(plan.success and ep.success), "plan_success": plan.success,
            "episode_success": ep.success, "final_error": ep.final_error,
            "collisions": len(ep.collisions),
        }, plan_seconds)
        log.info("%s %s: steps=%d plan=%.1fs length=%.2f±%.2f success=%s/%s", config.name, approach,
                 plan.steps, plan_seconds, ep.length_mean, ep.length_std, plan.success, ep.success)
        if out is not None:
            emit(write_plan(out / f"plan_{approach}.csv", plan), "plan")
            if plan.potentials:
                cols = ("step", "U", "U_sn", "U_cs", "U_rep", "U_step", "forced")
                pot = plan.potentials
                rows = [[k] + [float(pot[c][k]) for c in cols[1:-1]] + [bool(pot["forced"][k])]
                        for k in range(len(plan.frames))]
                emit(io.write_rows_csv(out / f"potentials_{approach}.csv", cols, rows), "csv")
            emit(io.write_rows_csv(out / f"episode_{approach}.csv", ("metric", "value"), _episode_rows(ep)), "csv")
            if trajectories:
                emit(write_trajectories(out / f"trajectories_{approach}.csv", ep.trajectories), "csv")
            final = kde(ep.trajectories[-1], silverman_bandwidth(ep.trajectories[-1]), grid)
            emit(io.write_raster(out / f"final_kde_{approach}.txt", final, grid), "raster")
    if out is not None:
        emit(table.write(out / "results.csv"), "results")
        emit(table.write_timing(out / "timing.csv"), "csv")
        write_manifest(out, f"experiment {config.name}", config, artifacts)
    return table, episodes


def write_manifest(out, command, config, artifacts):
    cfg = config.to_dict()
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": io.config_hash(cfg),
        "seeds": {"scenario": config.seed, "learn": config.learn.seed, "layout": config.layout_seed},
        "artifacts": artifacts,
    }
    return io.write_json(Path(out) / "manifest.json", manifest)


def run_exp_a_to_dir(config, out):
    """Exp-A end to end: samples, NLL table and manifest under ``out``."""
    out = Path(out)
    data = sample(config.initial, config.field, config.n_agents, seed=config.seed)
    io.write_points_csv(out / "samples.csv", data)
    rows = run_exp_a(config, data)
    artifacts = [{"path": "samples.csv", "kind": "points"}]
    io.write_rows_csv(out / "nll.csv", ("n_components", "approach", "nll", "status"), rows)
    artifacts.append({"path": "nll.csv", "kind": "results"})
    grid = config.grid()
    io.write_occupancy_raster(out / "occupancy.txt", grid)
    artifacts.append({"path": "occupancy.txt", "kind": "raster"})
    io.write_raster(out / "truth_density.txt", density_field(config.initial, grid).values, grid)
    artifacts.append({"path": "truth_density.txt", "kind": "raster"})
    write_manifest(out, "experiment exp-a", config, artifacts)
    return rows
