"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers,
then asserts. Run with ``pytest tests/test_acceptance.py -v``.
"""
import shutil
import time

import numpy as np
import pytest
from scipy.spatial.distance import directed_hausdorff

from cli_pipeline import run_all
from reachsafe.concepts import SafetyConcept
from reachsafe.dynamics import CommonHeading4, DoubleIntegrator, SimpleCar, steering_box
from reachsafe.game import check_prop1, hamiltonian_constrained
from reachsafe.harness import (
    ToyScenario,
    gen_demo_corpus,
    gen_highway_log,
    ground_truth_model,
    levelset_polylines,
    ordering_violations,
    percentile_report,
    plan_hocbf_qp,
    unsafe_set_iou,
)
from reachsafe.hocbf import AffineBarrier, CircleBarrier, ClassKappaFn, EllipseBarrier, HocbfModel, psi_sequence
from reachsafe.learning import (
    DemoDataset,
    DisturbanceProvider,
    LossWeights,
    default_init,
    fit,
    gradient,
    loss,
    margins,
    satisfaction_rate,
)
from reachsafe.solver import BoundaryFn, Grid, solve

from test_game import U1, _brute_constrained, _random_instance, grid_points, inst


@pytest.fixture
def report(capsys):
    def _report(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    return _report


# ---------------------------------------------------------------- 1


def di_boundary(v):
    """Zero level set p(v) of the double-integrator avoid game for T = 1."""
    return np.where(v >= 0, 0.0, np.where(v >= -1, v**2 / 2, -v - 0.5))


def test_c1_double_integrator_oracle(report):
    grid = Grid([-2.0, -2.0], [2.0, 2.0], [161, 161], names=("p", "v"))
    t0 = time.perf_counter()
    field = solve(DoubleIntegrator(), "worst-case", BoundaryFn.from_barrier(AffineBarrier([1.0, 0.0])), grid, 1.0,
                  workers=1)
    elapsed = time.perf_counter() - t0
    pts = np.concatenate(levelset_polylines(field, {}))
    v = np.linspace(-2.0, 2.0, 40001)
    exact = np.column_stack([di_boundary(v), v])
    exact = exact[(exact[:, 0] >= -2) & (exact[:, 0] <= 2)]
    hd = max(directed_hausdorff(pts, exact)[0], directed_hausdorff(exact, pts)[0])
    cells = hd / grid.spacing[0]
    ok = cells <= 2.0 and elapsed <= 30.0
    report("C1 double-integrator oracle", ok, f"Hausdorff {cells:.3f} cells (<= 2), runtime {elapsed:.2f} s (<= 30)")
    assert cells <= 2.0
    assert elapsed <= 30.0


# ---------------------------------------------------------------- 2


def test_c2_first_mover_and_brute_force(report):
    rng = np.random.default_rng(20)
    feasible = holds = 0
    while feasible < 1000:
        chk = check_prop1(_random_instance(rng))
        if chk.empty:
            continue
        feasible += 1
        holds += bool(chk.holds)
    rng = np.random.default_rng(21)
    G = grid_points(U1, 201)
    h = 2.0 / 200
    agree = compared = 0
    while compared < 500:
        a = rng.choice([-1, 1]) * rng.uniform(0.2, 2)
        b = rng.choice([-1, 1]) * rng.uniform(0.2, 2)
        g = inst(rng.normal(), rng.normal(), rng.normal(), [a], [b], c=rng.uniform(-2.5, 2.5))
        sol = hamiltonian_constrained(g)
        brute = _brute_constrained(g, G, G)
        if sol.infeasible:
            continue
        tol = 2 * (abs(g.A[0]) + abs(g.B[0])) * (1 + abs(b / a) + abs(a / b)) * h
        compared += 1
        agree += bool(abs(sol.value - brute) <= tol)
    ok = holds == 1000 and agree == 500
    report("C2 first-mover inequality + brute force", ok,
           f"inequality holds {holds}/1000, brute-force agreement {agree}/500")
    assert holds == 1000
    assert agree == 500


# ---------------------------------------------------------------- 3


def test_c3_toy_recovery(report):
    t0 = time.perf_counter()
    sc = ToyScenario()
    gt = ground_truth_model(sc)
    dyn = sc.dynamics()
    ds = gen_demo_corpus(gt, 40, seed=0, scenario=sc)
    lo, hi = ds.states.min(axis=0), ds.states.max(axis=0)
    # scale for the IoU threshold: ground truth against itself with 5% parameter jitter
    rng = np.random.default_rng(0)
    base = []
    for k in range(10):
        alphas = []
        for a in gt.alphas:
            p = a.effective().copy()
            p[0] *= 1 + 0.05 * rng.normal()
            p[1] = 1 + (p[1] - 1) * (1 + 0.05 * rng.normal())
            alphas.append(ClassKappaFn.from_effective("power", p))
        base.append(unsafe_set_iou(gt, HocbfModel(gt.barrier, alphas), dyn, lo, hi, seed=k))
    prov = DisturbanceProvider("worst-case")
    res = fit(default_init(sc.barrier(), ["power", "power"]), dyn, ds,
              LossWeights(learning_rate=0.001, steps=150000), prov)
    sat = satisfaction_rate(res.model, dyn, ds, prov)
    iou = unsafe_set_iou(gt, res.model, dyn, lo, hi)
    elapsed = time.perf_counter() - t0
    ok = sat >= 0.99 and iou >= 0.85 and elapsed <= 600
    report("C3 toy recovery", ok,
           f"{len(ds)} samples / 40 episodes, satisfaction {100 * sat:.2f}% (>= 99), IoU {iou:.3f} (>= 0.85; "
           f"jitter baseline mean {np.mean(base):.3f} min {np.min(base):.3f}), "
           f"fitted {np.round(res.model.effective_params(), 3).tolist()}, runtime {elapsed:.0f} s (<= 600)")
    assert sat >= 0.99
    assert iou >= 0.85
    assert elapsed <= 600


# ---------------------------------------------------------------- 4


def test_c4_conservatism_ordering(report):
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    dyn = CommonHeading4(box, box)
    bar = EllipseBarrier(5.4, 2.4)
    model = HocbfModel(bar, [ClassKappaFn.from_effective("linear", [1.0]), ClassKappaFn.from_effective("linear", [1.0])])
    grid = Grid([-30, -6, 10, 10], [30, 6, 35, 35], [21] * 4, names=("dx", "dy", "v_A", "v_B"))
    bnd = BoundaryFn.from_barrier(bar)
    wc = solve(dyn, "worst-case", bnd, grid, 2.0)
    hc = solve(dyn, "constrained", bnd, grid, 2.0, hocbf=model)
    rep = ordering_violations(wc, hc)
    ok = rep.band_fraction <= 0.005
    report("C4 conservatism ordering", ok,
           f"band violations {100 * rep.band_fraction:.4f}% (<= 0.5), raw {100 * rep.raw_fraction:.4f}% "
           f"over {rep.nodes} nodes")
    assert rep.band_fraction <= 0.005


# ---------------------------------------------------------------- 5


def _fd(model, dyn, ds, w, prov, h=1e-5):
    raw = model.raw_params
    g = np.zeros_like(raw)
    for k in range(raw.size):
        e = np.zeros_like(raw)
        e[k] = h
        g[k] = (loss(model.with_raw(raw + e), dyn, ds, w, prov).total
                - loss(model.with_raw(raw - e), dyn, ds, w, prov).total) / (2 * h)
    return g


def test_c5_gradient_correctness(report):
    rng = np.random.default_rng(50)
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    dyn = SimpleCar(box)
    prov = DisturbanceProvider("worst-case")
    w = LossWeights(beta1=1.0, beta2=0.05, beta3=1.0, beta4=0.05, beta5=0.01)
    kinds = [("power", "power"), ("lc", "linear"), ("cubic", "power"), ("linear", "lc")]
    n_par = {"linear": 1, "cubic": 1, "power": 2, "lc": 4}
    errs = []
    while len(errs) < 50:
        X = np.column_stack([rng.uniform(-12, 12, 5), rng.uniform(-12, 12, 5),
                             rng.uniform(-np.pi, np.pi, 5), rng.uniform(0.5, 8, 5)])
        if np.min(np.hypot(X[:, 0], X[:, 1])) <= 3.2:
            continue
        U = np.column_stack([rng.uniform(-0.5, 0.5, 5), rng.uniform(-5, 3, 5)])
        ds = DemoDataset(np.arange(5.0), X, U)
        pair = kinds[len(errs) % len(kinds)]
        model = HocbfModel(CircleBarrier((0, 0), 3.0), [ClassKappaFn(k, rng.uniform(-3, 0.5, n_par[k])) for k in pair])
        m, psi = margins(model, dyn, ds, prov)
        if np.min(np.abs(m)) < 1e-3 or np.min(np.abs(psi)) < 1e-3:
            continue  # central differences straddle a kink
        g = gradient(model, dyn, ds, w, prov)
        fd = _fd(model, dyn, ds, w, prov)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    worst = max(errs)
    ok = worst <= 1e-4
    report("C5 gradient correctness", ok, f"max relative error {worst:.2e} over 50 draws (<= 1e-4)")
    assert worst <= 1e-4


# ---------------------------------------------------------------- 6


def test_c6_forward_invariance(report):
    sc = ToyScenario()
    gt = ground_truth_model(sc)
    dyn = sc.dynamics()
    rng = np.random.default_rng(60)
    episodes, min_b, aborted = 0, np.inf, 0
    while episodes < 100:
        # starts just upstream of the obstacle, roughly heading at it
        x0 = np.array([rng.uniform(-12.0, -3.5), rng.uniform(-4.0, 4.0),
                       rng.uniform(-0.3, 0.3), rng.uniform(*sc.start_speed)])
        if gt.barrier(x0) <= 0 or np.any(np.asarray(psi_sequence(gt, dyn, x0)) < 0):
            continue  # invariance needs every psi_i(x0) >= 0
        res = plan_hocbf_qp(gt, dyn, x0, (sc.goal_x, rng.uniform(*sc.goal_y)))
        episodes += 1
        aborted += int(res.aborted)
        min_b = min(min_b, float(np.min(gt.barrier(res.trajectory))))
    ok = min_b > 0
    report("C6 forward invariance", ok, f"100 episodes ({aborted} aborted), min b = {min_b:.4f} (> 0)")
    assert min_b > 0


# ---------------------------------------------------------------- 7


def test_c7_cli_determinism(report, tmp_path):
    first = run_all(tmp_path, workers=1)
    shutil.rmtree(tmp_path / "out")
    second = run_all(tmp_path, workers=3)
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    diff = sorted(str(k) for k in first if second.get(k) != first[k])
    report("C7 CLI determinism", same,
           f"{len(first)} output files from gen-demos/learn/solve/compare/eval, workers 1 vs 3, "
           f"{'byte-identical' if same else 'differ: ' + ', '.join(diff)}")
    assert same


# ---------------------------------------------------------------- 8


def test_c8_percentile_pipeline(report):
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    dyn = CommonHeading4(box, box)
    concept = SafetyConcept("constant", dyn, BoundaryFn.from_barrier(EllipseBarrier(5.4, 2.4)))
    log = gen_highway_log(10000, seed=8, model="common4")
    rep = percentile_report(concept, log)
    s = sorted(float(v) for v in concept.evaluate(log.states))
    n = len(s)
    exact = {0: s[0], 50: (s[n // 2 - 1] + s[n // 2]) / 2, 100: s[-1]}
    exact_ok = all(rep.percentiles[q] == exact[q] for q in exact)
    step_ok = True
    for q in (5, 95):
        r = q * (n - 1) / 100
        lo, hi = s[int(np.floor(r))], s[int(np.ceil(r))]
        step_ok &= lo <= rep.percentiles[q] <= hi
    ok = exact_ok and step_ok and n == 10000
    report("C8 percentile pipeline", ok,
           f"n={n}, 0/50/100 exact: {exact_ok}, 5/95 within one interpolation step: {step_ok}")
    assert n == 10000
    assert exact_ok
    assert step_ok
