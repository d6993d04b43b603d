"""Command-line entry point: ``snmmplan {learn,plan,simulate,experiment}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import io
from .errors import SNMMError
from .experiments import (
    APPROACHES,
    ScenarioConfig,
    gen_exp_a,
    gen_forest,
    run_exp_a_to_dir,
    run_forest,
    write_trajectories,
)
from .geometry import SkewField, build_grid
from .learning import LearnConfig, fit_snmm
from .mixture import MixtureParams, sample
from .planning import PLANNERS, ApfConfig, GoalSpec, make_plan, read_plan, write_plan
from .swarm import ControlConfig, goal_values, kde, run_episode, silverman_bandwidth

log = logging.getLogger("snmmplan")


def _environment(args):
    """``(field, dx)`` from ``--config`` (scenario or bare environment JSON)."""
    dx = 0.1
    field = SkewField.from_dict({})
    if args.config:
        spec = io.read_json(args.config)
        env = spec.get("environment", spec)
        field = SkewField.from_dict(env)
        dx = float(env.get("grid", {}).get("dx", dx))
    if args.grid_dx is not None:
        dx = args.grid_dx
    return field, dx


def _grid(args):
    field, dx = _environment(args)
    return build_grid(field.workspace, dx, field=field)


def _overrides(cls, args, names):
    vals = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    return cls(**vals)


def _manifest(args, command, inputs, artifacts):
    opts = {k: v for k, v in vars(args).items() if k != "func"}
    io.write_json(Path(args.out) / "manifest.json", {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items() if v},
        "seeds": {"seed": args.seed},
        "options": opts,
        "config_hash": io.config_hash(opts),
        "artifacts": [{"path": a} for a in artifacts],
    })


def cmd_learn(args):
    grid = _grid(args)
    data = io.read_points_csv(args.data)
    out = Path(args.out)
    sweep = args.n_components
    arts, table = [], []
    for k in sweep:
        cfg = LearnConfig(n_components=k, outer_iters=args.outer_iters, inner_iters=args.inner_iters,
                          seed=args.seed)
        fit = fit_snmm(data, cfg, grid)
        # a single fit keeps the plain names
        tag = "" if len(sweep) == 1 else f"_nc{k}"
        io.write_json(out / f"params{tag}.json", fit.params.to_dict())
        io.write_rows_csv(out / f"nll_trace{tag}.csv", ("iteration", "nll"), list(enumerate(fit.trace)))
        arts += [f"params{tag}.json", f"nll_trace{tag}.csv"]
        table.append((k, fit.trace[-1], len(fit.trace) - 1))
        print(f"N_C={k}: final NLL {fit.trace[-1]:.6f} after {len(fit.trace) - 1} outer iterations")
    io.write_rows_csv(out / "nll_vs_nc.csv", ("n_components", "nll", "outer_iterations"), table)
    arts.append("nll_vs_nc.csv")
    _manifest(args, "learn", {"data": args.data, "config": args.config}, arts)
    return 0


def cmd_plan(args):
    grid = _grid(args)
    initial = MixtureParams.from_dict(io.read_json(args.initial))
    goal = GoalSpec.from_dict(io.read_json(args.goal))
    apf = _overrides(ApfConfig, args, ("gamma_sn", "gamma_cs", "gamma_rep", "eta", "max_steps", "lr_mu",
                                       "lr_L", "max_mu_step", "max_L_step"))
    plan = make_plan(args.planner, initial, goal, grid, apf, args.steps)
    out = Path(args.out)
    write_plan(out / "plan.csv", plan)
    if plan.potentials:
        pot = plan.potentials
        cols = ("step", "U", "U_sn", "U_cs", "U_rep")
        rows = [[k] + [float(pot[c][k]) for c in cols[1:]] for k in range(len(plan.frames))]
        io.write_rows_csv(out / "potentials.csv", cols, rows)
    arts = ["plan.csv", "plan.csv.json"] + (["potentials.csv"] if plan.potentials else [])
    _manifest(args, "plan", {"initial": args.initial, "goal": args.goal, "config": args.config}, arts)
    print(f"planner={plan.planner} steps={plan.steps} success={'yes' if plan.success else 'no'}")
    return 0


def cmd_simulate(args):
    grid = _grid(args)
    plan = read_plan(args.plan)
    if args.agents:
        agents = io.read_points_csv(args.agents)
    else:
        n = args.n_agents or (300 if args.full else 100)
        agents = sample(plan.frames[0], grid.field, n, seed=args.seed)
    ctl = _overrides(ControlConfig, args, ("gamma_att", "gamma_ca", "rho_0", "kde_bandwidth", "dt", "v_max",
                                           "steps_per_frame", "settle_steps"))
    goal = goal_values(GoalSpec.from_dict(io.read_json(args.goal)).component, grid) if args.goal else None
    ep = run_episode(agents, plan, grid, ctl, goal)
    out = Path(args.out)
    write_trajectories(out / "trajectories.csv", ep.trajectories)
    io.write_rows_csv(out / "metrics.csv", ("length_mean", "length_std", "collisions", "final_error", "success"),
                      [[ep.length_mean, ep.length_std, len(ep.collisions), ep.final_error, ep.success]])
    arts = ["trajectories.csv", "metrics.csv"]
    if args.kde_rasters:
        for k in range(0, len(ep.trajectories), args.kde_rasters):
            pos = ep.trajectories[k]
            name = f"kde/kde_{k:05d}.txt"
            io.write_raster(out / name, kde(pos, silverman_bandwidth(pos), grid), grid)
            arts.append(name)
    _manifest(args, "simulate", {"plan": args.plan, "agents": args.agents, "goal": args.goal,
                                 "config": args.config}, arts)
    print(f"length {ep.length_mean:.3f} ± {ep.length_std:.3f} m, collisions {len(ep.collisions)}, "
          f"success={'yes' if ep.success else 'no'}")
    return 0


def _scenario(args):
    if args.config:
        cfg = ScenarioConfig.from_dict(io.read_json(args.config))
        cfg.seed = args.seed if args.seed_given else cfg.seed
    elif args.scenario == "exp-a":
        cfg = gen_exp_a(args.seed)[0]
    else:
        cfg = gen_forest("I" if args.scenario == "forest-i" else "II", seed=args.seed, full=args.full)
    if args.seed_given:
        cfg.learn = dataclasses.replace(cfg.learn, seed=args.seed)
    if args.grid_dx is not None:
        cfg.dx = args.grid_dx
    if args.full and args.scenario != "exp-a":
        cfg.n_agents = 300
    return cfg


def cmd_experiment(args):
    cfg = _scenario(args)
    out = Path(args.out)
    if args.scenario == "exp-a":
        rows = run_exp_a_to_dir(cfg, out)
        for k, approach, val, status in rows:
            print(f"N_C={k} {approach:9s} NLL={val:.3f} {status}")
        return 0
    approaches = tuple(args.approaches) if args.approaches else APPROACHES
    table, _ = run_forest(cfg, approaches, out, trajectories=not args.no_trajectories)
    for r in table.rows:
        print(f"{r['simulation']} {r['approach']:9s} steps={r['steps']:5d} "
              f"time={table.plan_seconds(r['simulation'], r['approach']):7.1f}s "
              f"length={r['length_mean']:.2f}±{r['length_std']:.2f} success={'Yes' if r['success'] else 'No'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="snmmplan", description=__doc__)
    p.add_argument("--config", help="scenario or environment JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--grid-dx", type=float, default=None, help="quadrature spacing (m)")
    p.add_argument("--full", action="store_true", help="300 agents instead of 100")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("learn", help="fit a skewed mixture to sample points")
    s.add_argument("--data", required=True, help="CSV with x,y columns")
    s.add_argument("--n-components", type=int, nargs="+", default=[2], help="one value or a sweep list")
    s.add_argument("--outer-iters", type=int, default=100)
    s.add_argument("--inner-iters", type=int, default=20)
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("plan", help="plan a distribution trajectory")
    s.add_argument("--initial", required=True, help="mixture parameters JSON")
    s.add_argument("--goal", required=True, help="goal component JSON {mu, sigma}")
    s.add_argument("--planner", choices=PLANNERS, default="di")
    s.add_argument("--steps", type=int, default=859, help="DI steps")
    for name, typ in (("gamma-sn", float), ("gamma-cs", float), ("gamma-rep", float), ("eta", float),
                      ("max-steps", int), ("lr-mu", float), ("lr-L", float), ("max-mu-step", float),
                      ("max-L-step", float)):
        s.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="run the swarm controller along a plan")
    s.add_argument("--plan", required=True, help="plan CSV written by 'plan'")
    s.add_argument("--agents", help="initial agent positions CSV")
    s.add_argument("--n-agents", type=int)
    s.add_argument("--goal", help="goal component JSON for the success test")
    s.add_argument("--kde-rasters", type=int, default=0, metavar="EVERY",
                   help="write a KDE raster every EVERY steps")
    for name, typ in (("gamma-att", float), ("gamma-ca", float), ("rho-0", float), ("kde-bandwidth", float),
                      ("dt", float), ("v-max", float), ("steps-per-frame", int), ("settle-steps", int)):
        s.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", help="run a packaged experiment")
    s.add_argument("scenario", choices=("exp-a", "forest-i", "forest-ii"))
    s.add_argument("--approaches", nargs="+", choices=APPROACHES)
    s.add_argument("--no-trajectories", action="store_true", help="skip per-agent trajectory CSVs")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (SNMMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
