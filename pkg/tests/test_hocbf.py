import json
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from reachsafe.dynamics import DoubleIntegrator, JointRelative6, RelativeHeading5, SimpleCar, steering_box
from reachsafe.errors import ConfigError
from reachsafe.hocbf import (
    AffineBarrier,
    CircleBarrier,
    ClassKappaFn,
    EllipseBarrier,
    HocbfModel,
    admissible_control_set,
    check_relative_degree,
    constraint_at,
    effective_cbf,
    psi_sequence,
    softplus,
    softplus_inv,
)

BOX = steering_box(-0.5, 0.5, -5.0, 3.0)
GT = ([0.54, 1.16], [0.68, 1.11])


def di_model(s1=1.0, s2=1.0):
    return HocbfModel(AffineBarrier([1.0, 0.0]), [ClassKappaFn.from_effective("linear", [s1]),
                                                  ClassKappaFn.from_effective("linear", [s2])])


# ------------------------------------------------------------ hand values


def test_double_integrator_psi_hand_values():
    m, d = di_model(), DoubleIntegrator()
    assert np.allclose(psi_sequence(m, d, np.array([2.0, -1.0])), [2.0, 1.0])
    assert np.allclose(psi_sequence(m, d, np.array([0.0, 0.0])), [0.0, 0.0])
    assert effective_cbf(m, d, np.array([2.0, -1.0])) == pytest.approx(1.0)


def test_double_integrator_constraint_hand_values():
    # psi_2 = u + 2v + p, so at (2, -1) the constraint is u >= 0
    con = constraint_at(di_model(), DoubleIntegrator(), np.array([2.0, -1.0]))
    assert np.allclose(con.ego_coeff, [1.0])
    assert con.contender_coeff.size == 0
    assert con.offset == pytest.approx(0.0)


def test_effective_cbf_negative_inside_obstacle_moving_in():
    m = HocbfModel(CircleBarrier((0, 0), 3.0), [ClassKappaFn.from_effective("power", p) for p in GT])
    x = np.array([1.0, 0.0, math.pi, 4.0])  # inside, heading to the center
    assert effective_cbf(m, SimpleCar(BOX), x) < 0


def test_far_state_admits_all_controls():
    m, d = di_model(), DoubleIntegrator()
    x = np.array([100.0, 0.0])
    con = constraint_at(m, d, x)
    assert con.lhs(np.zeros(1)) > 0
    assert con.lhs(np.array([-1.0])) > 0


# ------------------------------------------------------------ symbolic oracle


def _symbolic_constraint(b_expr, state, drift, G, H, alpha1, alpha2):
    """Symbolic psi chain and constraint coefficients for a control-affine model."""
    grad = lambda e: sp.Matrix([[sp.diff(e, s) for s in state]])
    psi0 = b_expr
    psi1 = (grad(psi0) * drift)[0] + alpha1(psi0)
    lf = (grad(psi1) * drift)[0]
    ego = grad(psi1) * G
    con = grad(psi1) * H if H is not None else None
    offset = lf + alpha2(psi1)
    return psi0, psi1, ego, con, offset


def test_circle_power_chain_matches_symbolic_oracle():
    x, y, th, v = sp.symbols("x y theta v", real=True)
    ell = sp.Rational(27, 10)
    cx, cy, r = 0.5, -0.3, 3.0
    b_expr = (x - cx) ** 2 + (y - cy) ** 2 - r**2
    drift = sp.Matrix([v * sp.cos(th), v * sp.sin(th), 0, 0])
    G = sp.Matrix([[0, 0], [0, 0], [v / ell, 0], [0, 1]])
    (c1, q1), (c2, q2) = GT
    a1 = lambda a: c1 * a**q1
    a2 = lambda a: c2 * a**q2
    psi0, psi1, ego, _, off = _symbolic_constraint(b_expr, [x, y, th, v], drift, G, None, a1, a2)
    state = {x: -9.0, y: 2.0, th: 0.2, v: 5.0}
    model = HocbfModel(CircleBarrier((cx, cy), r), [ClassKappaFn.from_effective("power", p) for p in GT])
    xs = np.array([state[x], state[y], state[th], state[v]])
    dyn = SimpleCar(BOX, 2.7)
    psi = psi_sequence(model, dyn, xs)
    assert float(psi1.subs(state)) > 0
    assert psi[0] == pytest.approx(float(psi0.subs(state)), rel=1e-9)
    assert psi[1] == pytest.approx(float(psi1.subs(state)), rel=1e-6)
    con = constraint_at(model, dyn, xs)
    assert np.allclose(con.ego_coeff, np.array(ego.subs(state), dtype=float).ravel(), rtol=1e-6, atol=1e-9)
    assert con.offset == pytest.approx(float(off.subs(state)), rel=1e-6)


def test_joint6_ellipse_chain_matches_symbolic_oracle():
    dx, dy, ta, tb, va, vb = sp.symbols("dx dy ta tb va vb", real=True)
    ell = sp.Rational(27, 10)
    b_expr = dx**2 / sp.Float(5.4) ** 2 + dy**2 / sp.Float(2.4) ** 2 - 1
    drift = sp.Matrix([vb * sp.cos(tb) - va * sp.cos(ta), vb * sp.sin(tb) - va * sp.sin(ta), 0, 0, 0, 0])
    G = sp.zeros(6, 2)
    G[2, 0], G[4, 1] = va / ell, 1
    H = sp.zeros(6, 2)
    H[3, 0], H[5, 1] = vb / ell, 1
    a1 = lambda a: 0.8 * a + 0.3 * sp.tanh(1.5 * a) + 0.01 * a**3
    a2 = lambda a: 1.2 * a
    psi0, psi1, ego, con_b, off = _symbolic_constraint(b_expr, [dx, dy, ta, tb, va, vb], drift, G, H, a1, a2)
    state = {dx: 12.0, dy: -1.5, ta: 0.1, tb: -0.2, va: 22.0, vb: 18.0}
    model = HocbfModel(EllipseBarrier(5.4, 2.4), [ClassKappaFn.from_effective("lc", [0.8, 0.3, 1.5, 0.01]),
                                                 ClassKappaFn.from_effective("linear", [1.2])])
    xs = np.array([state[s] for s in (dx, dy, ta, tb, va, vb)])
    dyn = JointRelative6(BOX, BOX)
    con = constraint_at(model, dyn, xs)
    assert np.allclose(psi_sequence(model, dyn, xs), [float(psi0.subs(state)), float(psi1.subs(state))], rtol=1e-6)
    assert np.allclose(con.ego_coeff, np.array(ego.subs(state), dtype=float).ravel(), rtol=1e-6, atol=1e-9)
    assert np.allclose(con.contender_coeff, np.array(con_b.subs(state), dtype=float).ravel(), rtol=1e-6, atol=1e-9)
    assert con.offset == pytest.approx(float(off.subs(state)), rel=1e-6)


def test_barrier_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.uniform(-5, 5, (6, 6))
    for bar in (CircleBarrier((1, -1), 2.0), EllipseBarrier(5.4, 2.4), AffineBarrier(rng.normal(size=6), 0.3)):
        G = bar.gradient(X)
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1e-6
            fd = (bar.value(X + e) - bar.value(X - e)) / 2e-6
            assert np.allclose(G[:, i], fd, atol=1e-5)


def test_barrier_zero_sublevel_is_obstacle():
    bar = CircleBarrier((0, 0), 3.0)
    assert bar(np.array([0.0, 2.9, 0, 0])) < 0 < bar(np.array([0.0, 3.1, 0, 0]))
    ell = EllipseBarrier(5.4, 2.4)
    assert ell(np.array([5.3, 0.0])) < 0 < ell(np.array([0.0, 2.5]))


# ------------------------------------------------------------ class-K


KINDS = {"linear": 1, "cubic": 1, "power": 2, "lc": 4}
raw_st = st.floats(-4, 3, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(sorted(KINDS)), st.lists(raw_st, min_size=4, max_size=4))
def test_class_k_properties(kind, raw):
    a = ClassKappaFn(kind, raw[: KINDS[kind]])
    assert a(0.0) == 0.0
    grid = np.linspace(-50, 50, 1000)
    vals = a(grid)
    assert np.all(np.diff(vals) >= 0)
    assert np.all(np.sign(vals) == np.sign(grid))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(KINDS)), st.lists(raw_st, min_size=4, max_size=4), st.floats(0.05, 20))
def test_class_k_parameter_gradients(kind, raw, a0):
    f = ClassKappaFn(kind, raw[: KINDS[kind]])
    for a in (a0, -a0):
        gv, gd = f.grad_value(np.array([a]))[0], f.grad_deriv(np.array([a]))[0]
        for k in range(f.n_params):
            h = 1e-6
            e = np.zeros(f.n_params)
            e[k] = h
            up, dn = f.with_raw(f.raw + e), f.with_raw(f.raw - e)
            fd_v = (up(a) - dn(a)) / (2 * h)
            fd_d = (up.deriv(a) - dn.deriv(a)) / (2 * h)
            assert gv[k] == pytest.approx(fd_v, rel=1e-4, abs=1e-6)
            assert gd[k] == pytest.approx(fd_d, rel=1e-4, abs=1e-6)
        h = 1e-6 * max(1.0, abs(a))
        assert f.deriv(a) == pytest.approx((f(a + h) - f(a - h)) / (2 * h), rel=1e-4, abs=1e-6)


def test_power_effective_roundtrip_and_exponent_floor():
    a = ClassKappaFn.from_effective("power", [0.54, 1.16])
    assert np.allclose(a.effective(), [0.54, 1.16])
    with pytest.raises(ConfigError):
        ClassKappaFn.from_effective("power", [0.5, 0.9])
    with pytest.raises(ConfigError):
        ClassKappaFn("quartic", [1.0])


@given(st.floats(1e-6, 30))
def test_softplus_inverse(p):
    assert softplus(softplus_inv(p)) == pytest.approx(p, rel=1e-9)


def test_steeper_alpha_gives_smaller_unsafe_region():
    """Smaller (more conservative) alphas flag a superset of states as unsafe."""
    dyn = SimpleCar(BOX)
    bar = CircleBarrier((0, 0), 3.0)
    mild = HocbfModel(bar, [ClassKappaFn.from_effective("power", [0.3, 1.1])] * 2)
    steep = HocbfModel(bar, [ClassKappaFn.from_effective("power", [1.0, 1.2])] * 2)
    rng = np.random.default_rng(3)
    X = np.column_stack([rng.uniform(-15, 15, 5000), rng.uniform(-15, 15, 5000),
                         rng.uniform(-np.pi, np.pi, 5000), rng.uniform(0, 8, 5000)])
    X = X[bar.value(X) > 0]
    unsafe_mild = effective_cbf(mild, dyn, X) <= 0
    unsafe_steep = effective_cbf(steep, dyn, X) <= 0
    assert np.all(unsafe_mild | ~unsafe_steep)
    assert unsafe_mild.sum() > unsafe_steep.sum()


# ------------------------------------------------------------ model


def test_model_rejects_high_relative_degree():
    with pytest.raises(ConfigError):
        HocbfModel(CircleBarrier(), [ClassKappaFn("linear", [0.0])] * 3)


def test_relative_degree_check_flags_ego_frame_ellipse():
    m = HocbfModel(EllipseBarrier(), [ClassKappaFn("linear", [0.0])] * 2)
    probes = np.array([[10.0, 1.0, 0.1, 20.0, 22.0], [-8.0, -2.0, -0.2, 25.0, 18.0]])
    with pytest.raises(ConfigError):
        check_relative_degree(m, RelativeHeading5(BOX, BOX), probes)
    check_relative_degree(m, JointRelative6(BOX, BOX), np.array([[10.0, 1.0, 0.1, 0.0, 20.0, 22.0]]))


def test_model_json_roundtrip(tmp_path):
    m = HocbfModel(EllipseBarrier(5.4, 2.4), [ClassKappaFn.from_effective("power", GT[0]),
                                             ClassKappaFn.from_effective("lc", [1, 2, 3, 4])])
    doc = json.loads(m.dumps())
    assert doc["relative_degree"] == 2 and doc["barrier"]["kind"] == "ellipse"
    p = tmp_path / "model.json"
    p.write_text(m.dumps())
    back = HocbfModel.load(p)
    assert np.array_equal(back.raw_params, m.raw_params)
    with pytest.raises(ConfigError):
        HocbfModel.from_dict({"alphas": []})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_constraint_is_affine_in_controls(us):
    dyn = JointRelative6(BOX, BOX)
    m = HocbfModel(EllipseBarrier(), [ClassKappaFn.from_effective("linear", [0.7]),
                                     ClassKappaFn.from_effective("linear", [1.3])])
    x = np.array([9.0, 1.0, 0.05, -0.1, 20.0, 24.0])
    con = constraint_at(m, dyn, x)
    uA, uB = np.array(us[:2]), np.array(us[2:])
    # left-hand side rebuilt from the state rate: d/dt psi_1 + alpha_2(psi_1)
    h = 1e-6
    rate = dyn.evaluate(x, uA, uB)
    psi1 = lambda z: psi_sequence(m, dyn, z)[1]
    grad = np.array([(psi1(x + h * e) - psi1(x - h * e)) / (2 * h) for e in np.eye(6)])
    lhs = grad @ rate + m.alphas[1](psi1(x))
    assert lhs == pytest.approx(con.ego_coeff @ uA + con.contender_coeff @ uB + con.offset, rel=1e-5, abs=1e-5)


# ------------------------------------------------------------ admissible set


def test_admissible_set_full_box_when_slack():
    m, d = di_model(), DoubleIntegrator()
    poly = admissible_control_set(m, d, np.array([50.0, 5.0]))
    assert poly.area() == pytest.approx(2.0)


def test_admissible_set_empty_when_unreachable():
    m, d = di_model(), DoubleIntegrator()
    poly = admissible_control_set(m, d, np.array([0.1, -5.0]))
    assert poly.empty


def test_admissible_set_contender_rules_nest():
    dyn = JointRelative6(BOX, BOX)
    m = HocbfModel(EllipseBarrier(), [ClassKappaFn.from_effective("linear", [0.5])] * 2)
    x = np.array([10.0, 0.5, 0.0, 0.0, 24.0, 20.0])
    wc = admissible_control_set(m, dyn, x, contender_rule="worst-case")
    gt = admissible_control_set(m, dyn, x, contender_rule=np.array([0.0, 0.0]))
    assert wc.empty or gt.area() >= wc.area() - 1e-12


def test_car_following_feasible_region_is_halfplane_cut():
    dyn = JointRelative6(BOX, BOX)
    m = HocbfModel(EllipseBarrier(5.4, 2.4), [ClassKappaFn.from_effective("linear", [0.5])] * 2)
    x = np.array([12.0, 0.0, 0.0, 0.0, 25.0, 20.0])
    poly = admissible_control_set(m, dyn, x, contender_rule=np.zeros(2))
    g = np.linspace(0, 1, 201)
    U = np.array(np.meshgrid(BOX.lower[0] + g * (BOX.upper[0] - BOX.lower[0]),
                             BOX.lower[1] + g * (BOX.upper[1] - BOX.lower[1]), indexing="ij")).reshape(2, -1).T
    con = constraint_at(m, dyn, x)
    inside = U @ con.ego_coeff + con.offset >= 0
    area_box = np.prod(BOX.upper - BOX.lower)
    assert 0 < inside.mean() < 1
    assert poly.area() == pytest.approx(inside.mean() * area_box, rel=0.02)


def test_forward_invariance_double_integrator_episodes():
    """Any control drawn from the admissible interval keeps psi_0 and psi_1 nonnegative."""
    m, d = di_model(1.0, 2.0), DoubleIntegrator()
    rng = np.random.default_rng(7)
    dt, worst = 0.005, np.inf
    for _ in range(100):
        x = np.array([rng.uniform(0.5, 3.0), rng.uniform(-0.5, 1.0)])
        if np.any(psi_sequence(m, d, x) < 0):
            continue
        for _ in range(400):
            con = constraint_at(m, d, x)
            k, c = float(con.ego_coeff[0]), float(con.offset)
            lo, hi = d.ego_box.lower[0], d.ego_box.upper[0]
            lo = max(lo, -c / k) if k > 0 else lo
            u = rng.uniform(lo, hi) if lo <= hi else hi
            x = x + dt * d.evaluate(x, np.array([u]))
            worst = min(worst, psi_sequence(m, d, x).min())
    assert worst >= -1e-3
