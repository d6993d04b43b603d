import json

import numpy as np
import pytest

from snmmplan import io
from snmmplan.errors import ConfigError
from snmmplan.experiments import (
    FOREST_GOAL,
    FOREST_START,
    LAYOUT_SEEDS,
    RESULT_COLUMNS,
    ResultsTable,
    ScenarioConfig,
    exp_a_ground_truth,
    forest_layout,
    gen_exp_a,
    gen_forest,
    load_forest_layout,
    nll_table,
    run_forest,
    support_occupancy,
)
from snmmplan.geometry import Circle, SkewField, Workspace
from snmmplan.learning import LearnConfig
from snmmplan.mixture import MixtureParams, SNComponent
from snmmplan.planning import ApfConfig, GoalSpec
from snmmplan.swarm import ControlConfig


def test_gen_exp_a_samples():
    cfg, data, labels = gen_exp_a(seed=0)
    assert data.shape == (300, 2)
    assert np.all(cfg.field.q(data) == 1)
    frac = np.mean(labels == 0)
    assert abs(frac - 0.5) < 0.09
    truth = exp_a_ground_truth()
    # the skew pushes the sample mean off mu, but not far
    np.testing.assert_allclose(data[labels == 0].mean(axis=0), truth.components[0].mu, atol=0.25)


def test_gen_exp_a_deterministic(tmp_path):
    _, a, _ = gen_exp_a(seed=3, out=tmp_path)
    _, b, _ = gen_exp_a(seed=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(io.read_points_csv(tmp_path / "samples.csv"), a, rtol=1e-15)


def test_nll_table_layout():
    rows = [(1, "gmm", 3.0, "ok"), (1, "snmm", 2.0, "ok"), (2, "gmm", 1.0, "ok")]
    table = nll_table(rows)
    assert table == {"gmm": {1: 3.0, 2: 1.0}, "snmm": {1: 2.0}}


@pytest.mark.parametrize("variant, count", [("I", 14), ("II", 50)])
def test_gen_forest_counts(variant, count):
    cfg = gen_forest(variant)
    assert len(cfg.field.obstacles) == count
    assert all(isinstance(o, Circle) for o in cfg.field.obstacles)
    assert cfg.n_agents == 100 and cfg.learn.n_components == 2
    assert gen_forest(variant, full=True).n_agents == 300


def test_forest_ii_trees_are_smaller():
    r1 = {o.radius for o in gen_forest("I").field.obstacles}
    r2 = {o.radius for o in gen_forest("II").field.obstacles}
    assert max(r2) < min(r1)


def test_forest_supports_stay_free():
    comps = (*FOREST_START.components, FOREST_GOAL)
    assert max(support_occupancy(gen_forest("I").field, comps)) == 0.0
    assert max(support_occupancy(gen_forest("II").field, comps)) <= 0.10


@pytest.mark.parametrize("variant", ["I", "II"])
def test_shipped_layout_is_reproducible(variant):
    field, seed = load_forest_layout(variant)
    assert seed == LAYOUT_SEEDS[variant]
    assert forest_layout(variant, seed) == field


def test_forest_layout_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        forest_layout("III", 0)


def test_scenario_round_trip():
    cfg = gen_forest("II", seed=7)
    back = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.field == cfg.field
    assert back.initial.allclose(cfg.initial, 0.0)
    assert back.goal.component.allclose(cfg.goal.component, 0.0)
    assert (back.seed, back.n_agents, back.dx, back.layout_seed) == (7, 100, 0.1, cfg.layout_seed)
    assert back.apf == cfg.apf and back.control == cfg.control and back.learn == cfg.learn


def test_results_table_rows(tmp_path):
    table = ResultsTable()
    for k, a in enumerate(("snmm-di", "gmm-apf")):
        table.add({"simulation": "s", "approach": a, "steps": k, "length_mean": 1.0, "length_std": 0.0,
                   "success": True, "plan_success": True, "episode_success": True, "final_error": 0.1,
                   "collisions": 0}, 0.5)
    assert len(table.rows) == 2
    assert table.row("s", "gmm-apf")["steps"] == 1
    rows = io.read_rows_csv(table.write(tmp_path / "results.csv"))
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert [r["success"] for r in rows] == ["yes", "yes"]


@pytest.fixture(scope="module")
def small_forest(tmp_path_factory):
    field = SkewField(Workspace(), (Circle((10.0, 13.0), 1.0), Circle((10.0, 7.0), 1.0)))
    start = MixtureParams([0.5, 0.5], (SNComponent([5.0, 12.0], np.eye(2)), SNComponent([5.0, 8.0], np.eye(2))))
    cfg = ScenarioConfig("small", field, start, GoalSpec(SNComponent([15.0, 10.0], 1.5 * np.eye(2))), seed=2,
                         n_agents=30, dx=0.25, learn=LearnConfig(n_components=2, outer_iters=5, seed=2),
                         apf=ApfConfig(max_steps=40), control=ControlConfig(settle_steps=5), di_steps=40)
    out = tmp_path_factory.mktemp("small_forest")
    table, episodes = run_forest(cfg, out=out)
    return cfg, table, episodes, out


def test_run_forest_rows(small_forest):
    cfg, table, episodes, _ = small_forest
    assert [r["approach"] for r in table.rows] == ["snmm-di", "snmm-apf", "gmm-apf"]
    for r in table.rows:
        assert r["success"] == (r["plan_success"] and r["episode_success"])
        plan, ep = episodes[r["approach"]]
        assert r["steps"] == plan.steps
        assert r["length_mean"] == pytest.approx(ep.length_mean)
    assert table.row("small", "snmm-di")["steps"] == 40


def test_run_forest_manifest(small_forest):
    cfg, _, _, out = small_forest
    man = io.read_json(out / "manifest.json")
    assert man["seeds"]["scenario"] == cfg.seed
    assert len(man["config_hash"]) > 8
    paths = {a["path"] for a in man["artifacts"]}
    assert {"results.csv", "timing.csv", "plan_snmm-apf.csv", "trajectories_gmm-apf.csv"} <= paths
    for a in man["artifacts"]:
        p = out / a["path"]
        assert p.exists()
        if p.suffix == ".json":
            io.read_json(p)
        elif p.suffix == ".csv":
            assert io.read_rows_csv(p)
        elif p.suffix == ".txt":
            values, header = io.read_raster(p)
            assert values.shape == (header["ny"], header["nx"])


def test_trajectory_csv_layout(small_forest):
    cfg, _, episodes, out = small_forest
    rows = io.read_rows_csv(out / "trajectories_snmm-di.csv")
    traj = episodes["snmm-di"][1].trajectories
    assert len(rows) == traj.shape[0] * traj.shape[1]
    assert set(rows[0]) == {"agent_id", "step", "x", "y"}
    back = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(traj.shape)
    np.testing.assert_array_equal(back, traj)
