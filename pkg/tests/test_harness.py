import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachsafe.concepts import SafetyConcept
from reachsafe.dynamics import ControlBox, DoubleIntegrator, SimpleCar, ZeroDynamics
from reachsafe.errors import ConfigError
from reachsafe.harness import (
    ConfusionMatrix,
    PlannerConfig,
    ToyScenario,
    confusion,
    default_state_filter,
    epsilon_band,
    export_controls,
    export_levelset,
    gen_demo_corpus,
    gen_highway_log,
    ground_truth_model,
    levelset_polylines,
    ordering_violations,
    percentile_summary,
    plan_hocbf_qp,
    reference_control,
    safety_filter,
)
from reachsafe.hocbf import AffineBarrier, constraint_at
from reachsafe.learning import DisturbanceProvider, margins
from reachsafe.solver import BoundaryFn, Grid, ValueField, solve

SC = ToyScenario()
GT = ground_truth_model(SC)
CAR = SC.dynamics()


@pytest.fixture(scope="module")
def corpus():
    return gen_demo_corpus(GT, 6, seed=5)


def field_from(grid, values, times=(0.0,)):
    vals = np.asarray(values, float).reshape((len(times),) + grid.shape)
    return ValueField(grid, np.array(times), vals)


# ---------------------------------------------------------------- planner


def test_slack_constraint_returns_clamped_reference():
    x = np.array([-18.0, 0.0, 0.0, 5.0])
    u_ref = reference_control(x, (20.0, 0.0), PlannerConfig(), CAR.ego_box)
    u, ok = safety_filter(GT, CAR, x, u_ref, CAR.ego_box)
    assert ok and np.array_equal(u, u_ref)
    wild = reference_control(np.array([-18.0, 0.0, 2.5, 30.0]), (20.0, 0.0), PlannerConfig(), CAR.ego_box)
    assert np.all(wild >= CAR.ego_box.lower) and np.all(wild <= CAR.ego_box.upper)


def test_active_constraint_projects_onto_halfspace():
    wide = ControlBox([-100.0, -100.0], [100.0, 100.0])
    dyn = SimpleCar(wide, SC.wheelbase)
    x = np.array([-5.0, 0.3, 0.0, 6.0])  # heading straight at the obstacle
    con = constraint_at(GT, dyn, x)
    a, c = con.ego_coeff, float(con.offset)
    u_ref = np.array([0.0, 1.0])
    assert a @ u_ref + c < 0
    u, ok = safety_filter(GT, dyn, x, u_ref, wide)
    expect = u_ref + (-(a @ u_ref + c)) / (a @ a) * a
    assert ok and np.allclose(u, expect, atol=1e-9)


def test_planner_episode_stays_safe_and_in_box():
    res = plan_hocbf_qp(GT, CAR, np.array([-16.0, 0.2, 0.0, 6.0]), (20.0, 0.0))
    assert res.reached and not res.aborted
    assert np.min(GT.barrier(res.trajectory)) > 0
    box = CAR.ego_box
    assert np.all(res.controls >= box.lower) and np.all(res.controls <= box.upper)
    for x, u, bad in zip(res.trajectory[:-1], res.controls, res.infeasible):
        if not bad:
            con = constraint_at(GT, CAR, x)
            assert con.ego_coeff @ u + con.offset >= -1e-8


def test_planner_rejects_start_in_obstacle():
    with pytest.raises(ConfigError):
        plan_hocbf_qp(GT, CAR, np.array([0.5, 0.0, 0.0, 2.0]), (20.0, 0.0))


# ----------------------------------------------------------------- corpus


def test_corpus_is_seed_repeatable(corpus):
    again = gen_demo_corpus(GT, 6, seed=5)
    assert np.array_equal(again.states, corpus.states)
    assert np.array_equal(again.ego_controls, corpus.ego_controls)
    other = gen_demo_corpus(GT, 6, seed=6)
    assert not np.array_equal(other.states[:10], corpus.states[:10])


def test_corpus_episode_count_and_membership(corpus):
    assert len(corpus.metadata["episodes"]) == 6
    assert sum(corpus.metadata["episodes"]) == len(corpus)
    corpus.check_boxes(CAR)
    m, psi = margins(GT, CAR, corpus, DisturbanceProvider("worst-case"))
    assert np.all(m >= -1e-6)
    assert np.all(GT.barrier(corpus.states) > 0)


def test_corpus_csv_schema(tmp_path, corpus):
    corpus.to_csv(tmp_path / "demos.csv")
    head = (tmp_path / "demos.csv").read_text().splitlines()[0]
    assert head == "t,x0,x1,x2,x3,uA0,uA1"


def test_highway_log_shapes():
    log = gen_highway_log(100, seed=0, model="common4")
    assert log.states.shape == (100, 4) and log.contender_controls.shape == (100, 2)
    with pytest.raises(ConfigError):
        gen_highway_log(10, 0, model="relheading5")


# -------------------------------------------------------------- confusion


def _concept(field):
    return SafetyConcept("wc-hj", ZeroDynamics(field.grid.ndim), BoundaryFn(lambda X: X[:, 0]), field)


def test_confusion_self_has_empty_off_diagonal():
    grid = Grid([-1, -1], [1, 1], [7, 7])
    rng = np.random.default_rng(0)
    c = _concept(field_from(grid, rng.normal(size=grid.size)))
    cm = confusion(c, c, grid, state_filter={})
    assert cm.counts[0, 1] == 0 and cm.counts[1, 0] == 0
    assert cm.total == 49
    assert cm.percentages.sum() == pytest.approx(100.0, abs=0.01)


def test_confusion_hand_tally():
    grid = Grid([0, 0], [2, 2], [3, 3])
    ref = _concept(field_from(grid, [[1, 1, 1], [-1, -1, 1], [-1, 1, 1]]))
    cand = _concept(field_from(grid, [[1, -1, 1], [-1, 1, 1], [-1, 1, -1]]))
    cm = confusion(ref, cand, grid, state_filter={})
    # ref safe/cand safe: (0,0),(0,2),(1,2),(2,1) ; ref safe/cand unsafe: (0,1),(2,2)
    # ref unsafe/cand safe: (1,1) ; ref unsafe/cand unsafe: (1,0),(2,0)
    assert cm.counts.tolist() == [[4, 2], [1, 2]]
    d = cm.to_dict()
    assert d["cells"]["reference_safe/candidate_unsafe"]["count"] == 2
    assert isinstance(cm, ConfusionMatrix)


def test_confusion_invariant_to_node_order():
    rng = np.random.default_rng(1)
    grid = Grid([-1, -2], [1, 2], [5, 9])
    A, B = rng.normal(size=grid.shape), rng.normal(size=grid.shape)
    cm = confusion(_concept(field_from(grid, A)), _concept(field_from(grid, B)), grid, state_filter={})
    # the same fields with the two coordinates swapped enumerate nodes in another order
    gT = Grid([-2, -1], [2, 1], [9, 5])
    cmT = confusion(_concept(field_from(gT, A.T)), _concept(field_from(gT, B.T)), gT, state_filter={})
    assert np.array_equal(cm.counts, cmT.counts)


def test_confusion_default_filter_and_periodic_nodes():
    assert default_state_filter(("dx", "dy", "theta_A", "v_A")) == {
        "theta_A": (-0.4 * np.pi, 0.4 * np.pi), "v_A": (15.0, 30.0)}
    grid = Grid([-np.pi, 10], [np.pi, 30], [9, 5], periodic=(True, False), names=("theta", "v"))
    c = _concept(field_from(grid, np.ones(grid.size)))
    cm = confusion(c, c, grid)
    # theta nodes in [-0.4pi, 0.4pi] among 8 unique: -pi/4, 0, pi/4 ; speeds 15, 20, 25, 30
    assert cm.total == 3 * 4
    with pytest.raises(ConfigError):
        confusion(c, c, grid, state_filter={"nope": (0, 1)})


def test_epsilon_band_and_ordering_report():
    grid = Grid([0, 0], [1, 1], [11, 11])
    X = grid.states()
    wc = field_from(grid, 2 * X[:, 0] - X[:, 1] - 0.5)
    assert np.allclose(epsilon_band(wc), 2 * (2 * 0.1 + 1 * 0.1))
    hc = field_from(grid, wc.values[-1].reshape(-1) + 1.0)
    assert ordering_violations(wc, hc).raw_fraction == 0.0
    worse = field_from(grid, wc.values[-1].reshape(-1) - 0.5)
    rep = ordering_violations(wc, worse)
    Vw = wc.values[-1]
    assert rep.raw_fraction == pytest.approx(np.mean((Vw >= 0) & (Vw < 0.5)))
    assert rep.band_fraction == pytest.approx(np.mean((Vw >= 0.6) & (Vw < 0.5)))


# ---------------------------------------------------------------- percentiles


def test_percentile_examples():
    r = percentile_summary(np.full(7, 2.5))
    assert all(v == 2.5 for v in r.percentiles.values())
    assert percentile_summary([1, 2, 3, 4, 5]).percentiles[50] == 3.0
    with pytest.raises(ConfigError):
        percentile_summary([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=99).filter(lambda v: len(v) % 2 == 1))
def test_odd_median_is_sorted_middle(vals):
    r = percentile_summary(vals)
    s = sorted(vals)
    assert r.percentiles[50] == s[len(s) // 2]
    assert r.percentiles[0] == s[0] and r.percentiles[100] == s[-1]
    p = list(r.percentiles.values())
    assert all(b >= a for a, b in zip(p, p[1:]))


# -------------------------------------------------------------------- exports


def test_levelset_circle_radius(tmp_path):
    grid = Grid([-3, -3], [3, 3], [61, 61], names=("x", "y"))
    X = grid.states()
    r = 1.5
    f = field_from(grid, np.hypot(X[:, 0], X[:, 1]) - r)
    lines = export_levelset(f, {}, tmp_path / "ls.csv")
    assert len(lines) == 1
    radius = np.hypot(lines[0][:, 0], lines[0][:, 1])
    assert np.abs(radius - r).max() < 0.05
    rows = list(csv.reader(open(tmp_path / "ls.csv")))
    assert rows[0] == ["polyline", "x", "y"] and len(rows) == len(lines[0]) + 1


def test_levelset_empty_and_symmetric(tmp_path):
    grid = Grid([-2, -2, 0], [2, 2, 1], [41, 41, 3])
    X = grid.states()
    pos = field_from(grid, 1.0 + X[:, 0] ** 2)
    assert export_levelset(pos, {2: 0.5}, tmp_path / "e.csv") == []
    assert (tmp_path / "e.csv").read_text().strip().count("\n") == 0
    ell = field_from(grid, X[:, 0] ** 2 / 1.5**2 + X[:, 1] ** 2 - 1.0 + 0 * X[:, 2])
    pts = np.concatenate(levelset_polylines(ell, {2: 0.0}))
    mirrored = pts * np.array([-1.0, 1.0])
    d = np.min(np.linalg.norm(mirrored[:, None, :] - pts[None, :, :], axis=2), axis=1)
    assert d.max() < 0.1
    with pytest.raises(ConfigError):
        levelset_polylines(ell, {})


def test_export_controls(tmp_path):
    dyn = DoubleIntegrator()
    bnd = BoundaryFn.from_barrier(AffineBarrier([1.0, 0.0]))
    f = solve(dyn, "worst-case", bnd, Grid([-2, -2], [2, 2], [21, 21]), 1.0)
    cs = {"wc": SafetyConcept("wc-hj", dyn, bnd, f), "const": SafetyConcept("constant", dyn, bnd)}
    out = export_controls(cs, [0.5, -0.5], tmp_path / "c.csv")
    assert set(out) == {"wc", "const"} and "u_A" in out["wc"] and "u_A" not in out["const"]
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["concept", "item", "index", "u0"]
    assert all(len(r) == 4 for r in rows)
    assert any(r[1] == "optimal_ego" for r in rows)
