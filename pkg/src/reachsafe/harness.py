"""Experiment plumbing: demo generation, concept comparison, statistics, exports."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from skimage import measure

from .concepts import SafetyConcept
from .dynamics import AffinePairwiseDynamics, ControlBox, SimpleCar, rk4_step, steering_box, wrap_angle
from .errors import ConfigError
from .hocbf import (
    CircleBarrier,
    ClassKappaFn,
    HocbfModel,
    admissible_control_set,
    constraint_at,
    effective_cbf,
    psi_sequence,
)
from .learning import DemoDataset
from .polytope import project
from .solver import Grid, ValueField

# ------------------------------------------------------------ QP planner


@dataclass(frozen=True)
class PlannerConfig:
    """Proportional goal tracker wrapped by the HOCBF safety filter."""

    k_heading: float = 1.5
    k_speed: float = 1.0
    v_des: float = 6.0
    dt: float = 0.05
    horizon: float = 10.0
    goal_tol: float = 0.5
    n_max: int = 10


@dataclass
class PlanResult:
    trajectory: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)
    reference: np.ndarray  # (T, m)
    infeasible: np.ndarray  # (T,) bool
    reached: bool
    aborted: bool


def reference_control(x, goal, cfg: PlannerConfig, box: ControlBox) -> np.ndarray:
    """Steer toward the goal position and track the desired speed."""
    px, py, th, v = x
    heading = math.atan2(goal[1] - py, goal[0] - px)
    u = np.array([cfg.k_heading * wrap_angle(heading - th), cfg.k_speed * (cfg.v_des - v)])
    return box.clip(u)


def safety_filter(model: HocbfModel, dyn: AffinePairwiseDynamics, x, u_ref, box: ControlBox):
    """Closest control to ``u_ref`` inside ``box`` meeting the HOCBF constraint.

    Returns ``(u, feasible)``. When the feasible set is empty the box corner
    that maximizes the constraint left-hand side is returned.
    """
    poly = admissible_control_set(model, dyn, x, box)
    if not poly.empty:
        return project(u_ref, poly), True
    con = constraint_at(model, dyn, np.asarray(x, dtype=float))
    corners = box.corners()
    k = int(np.argmax(corners @ con.ego_coeff))
    return corners[k].copy(), False


def plan_hocbf_qp(
    model: HocbfModel,
    dyn: AffinePairwiseDynamics,
    x0,
    goal,
    box: Optional[ControlBox] = None,
    cfg: PlannerConfig = PlannerConfig(),
) -> PlanResult:
    """Closed-loop reach-avoid episode with a per-step HOCBF quadratic program."""
    box = box or dyn.ego_box
    x = np.asarray(x0, dtype=float).copy()
    if model.barrier(x) <= 0:
        raise ConfigError("initial state lies inside the obstacle")
    if np.any(np.asarray(psi_sequence(model, dyn, x)) < 0):
        raise ConfigError("initial state lies outside the HOCBF safe set")
    states, controls, refs, flags = [x.copy()], [], [], []
    run = 0
    reached = aborted = False
    n_steps = int(round(cfg.horizon / cfg.dt))
    for _ in range(n_steps):
        if np.hypot(x[0] - goal[0], x[1] - goal[1]) < cfg.goal_tol:
            reached = True
            break
        u_ref = reference_control(x, goal, cfg, box)
        u, ok = safety_filter(model, dyn, x, u_ref, box)
        run = 0 if ok else run + 1
        if run > cfg.n_max:
            aborted = True
            break
        x = rk4_step(dyn, x[None, :], u[None, :], np.zeros((1, 0)), cfg.dt)[0]
        x[2] = wrap_angle(x[2])
        states.append(x.copy())
        controls.append(u)
        refs.append(u_ref)
        flags.append(not ok)
    m = box.dim
    return PlanResult(
        np.array(states),
        np.array(controls).reshape(-1, m),
        np.array(refs).reshape(-1, m),
        np.array(flags, dtype=bool),
        reached,
        aborted,
    )


# ----------------------------------------------------------- toy corpus


@dataclass(frozen=True)
class ToyScenario:
    """Circular obstacle between a start strip and a goal strip."""

    center: tuple = (0.0, 0.0)
    radius: float = 3.0
    start_x: tuple = (-20.0, -14.0)
    start_y: tuple = (-3.0, 3.0)
    start_heading: tuple = (-0.2, 0.2)
    start_speed: tuple = (3.0, 7.0)
    goal_x: float = 20.0
    goal_y: tuple = (-3.0, 3.0)
    wheelbase: float = 2.7
    steer: tuple = (-0.5, 0.5)
    accel: tuple = (-5.0, 3.0)

    def dynamics(self) -> SimpleCar:
        return SimpleCar(steering_box(*self.steer, *self.accel), self.wheelbase)

    def barrier(self) -> CircleBarrier:
        return CircleBarrier(self.center, self.radius)


GT_POWER = ([0.54, 1.16], [0.68, 1.11])


def ground_truth_model(scenario: ToyScenario = ToyScenario(), params=GT_POWER) -> HocbfModel:
    return HocbfModel(scenario.barrier(), [ClassKappaFn.from_effective("power", p) for p in params])


def gen_demo_corpus(
    model: HocbfModel,
    n_episodes: int,
    seed: int,
    scenario: ToyScenario = ToyScenario(),
    cfg: PlannerConfig = PlannerConfig(),
    max_tries: int = 1000,
) -> DemoDataset:
    """Planner episodes from random initial conditions, stacked into one dataset.

    Time restarts at zero for each episode; ``metadata["episodes"]`` holds the
    per-episode sample counts.
    """
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    rng = np.random.default_rng(seed)
    dyn = scenario.dynamics()
    times, states, controls, lengths, flagged = [], [], [], [], 0
    tries = 0
    while len(lengths) < n_episodes:
        tries += 1
        if tries > max_tries * n_episodes:
            raise ConfigError("could not sample admissible initial states")
        x0 = np.array([
            rng.uniform(*scenario.start_x),
            rng.uniform(*scenario.start_y),
            rng.uniform(*scenario.start_heading),
            rng.uniform(*scenario.start_speed),
        ])
        goal = (scenario.goal_x, rng.uniform(*scenario.goal_y))
        if model.barrier(x0) <= 0 or np.any(np.asarray(psi_sequence(model, dyn, x0)) < 0):
            continue
        res = plan_hocbf_qp(model, dyn, x0, goal, dyn.ego_box, cfg)
        if res.aborted or len(res.controls) == 0:
            continue
        k = len(res.controls)
        times.append(np.arange(k) * cfg.dt)
        states.append(res.trajectory[:k])
        controls.append(res.controls)
        lengths.append(k)
        flagged += int(res.infeasible.sum())
    meta = {
        "source": "toy-planner",
        "seed": seed,
        "dt": cfg.dt,
        "episodes": lengths,
        "infeasible_steps": flagged,
        "scenario": asdict(scenario),
        "planner": asdict(cfg),
        "model": model.to_dict(),
    }
    return DemoDataset(np.concatenate(times), np.concatenate(states), np.concatenate(controls), None, meta)


# ------------------------------------------------------ highway corpus


@dataclass(frozen=True)
class HighwayConfig:
    """Synthetic multi-lane traffic; pairs are (car, nearest neighbour)."""

    n_cars: int = 12
    lanes: tuple = (0.0, 3.7, 7.4)
    road_length: float = 300.0
    speed: tuple = (15.0, 30.0)
    accel_std: float = 1.0
    dt: float = 0.1
    wheelbase: float = 2.7
    lane_change_rate: float = 0.02


def gen_highway_log(n_samples: int, seed: int, cfg: HighwayConfig = HighwayConfig(), model: str = "joint6") -> DemoDataset:
    """Pairwise relative states and controls from a simple traffic simulation.

    Cars drive on a ring road with noisy speed tracking and occasional lane
    changes steered by a proportional lateral controller. Every frame, each
    car is paired with its nearest neighbour; states follow ``joint6``
    ``(dx, dy, th_A, th_B, v_A, v_B)`` or ``common4`` ``(dx, dy, v_A, v_B)``.
    Controls are ``(tan(steer), accel)``.
    """
    if model not in ("joint6", "common4"):
        raise ConfigError("highway log supports joint6 or common4 states")
    rng = np.random.default_rng(seed)
    n = cfg.n_cars
    lanes = np.array(cfg.lanes)
    lane = rng.integers(0, len(lanes), n)
    pos = np.stack([np.sort(rng.uniform(0, cfg.road_length, n)), lanes[lane]], axis=1)
    th = np.zeros(n)
    v = rng.uniform(*cfg.speed, n)
    v_target = v.copy()
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    rows_x, rows_a, rows_b, rows_t = [], [], [], []
    step = 0
    while len(rows_x) < n_samples:
        # controls
        lat_err = lanes[lane] - pos[:, 1]
        steer = np.clip(0.02 * lat_err - 0.5 * th, box.lower[0], box.upper[0])
        acc = np.clip(0.5 * (v_target - v) + rng.normal(0.0, cfg.accel_std, n), box.lower[1], box.upper[1])
        u = np.stack([steer, acc], axis=1)
        # pairs
        d = pos[None, :, :] - pos[:, None, :]
        d[:, :, 0] = (d[:, :, 0] + cfg.road_length / 2) % cfg.road_length - cfg.road_length / 2
        dist = np.hypot(d[:, :, 0], d[:, :, 1])
        np.fill_diagonal(dist, np.inf)
        nb = np.argmin(dist, axis=1)
        for i in range(n):
            j = nb[i]
            if model == "joint6":
                rows_x.append([d[i, j, 0], d[i, j, 1], th[i], th[j], v[i], v[j]])
            else:
                rows_x.append([d[i, j, 0], d[i, j, 1], v[i], v[j]])
            rows_a.append(u[i])
            rows_b.append(u[j])
            rows_t.append(step * cfg.dt)
            if len(rows_x) == n_samples:
                break
        # advance
        pos[:, 0] = (pos[:, 0] + v * np.cos(th) * cfg.dt) % cfg.road_length
        pos[:, 1] = pos[:, 1] + v * np.sin(th) * cfg.dt
        th = wrap_angle(th + v / cfg.wheelbase * steer * cfg.dt)
        v = np.maximum(v + acc * cfg.dt, 0.0)
        change = rng.random(n) < cfg.lane_change_rate * cfg.dt
        lane = np.where(change, np.clip(lane + rng.choice([-1, 1], n), 0, len(lanes) - 1), lane)
        step += 1
    meta = {"source": "synthetic-highway", "seed": seed, "dt": cfg.dt, "model": model, "config": asdict(cfg)}
    return DemoDataset(np.array(rows_t), np.array(rows_x), np.array(rows_a), np.array(rows_b), meta)


# -------------------------------------------------------------- confusion


def default_state_filter(names: Sequence[str]) -> dict:
    """Speeds in [15, 30] m/s and headings in [-0.4 pi, 0.4 pi] where present."""
    out = {}
    for nm in names:
        if nm in ("v", "v_A", "v_B"):
            out[nm] = (15.0, 30.0)
        elif nm in ("theta", "theta_A", "theta_B", "psi"):
            out[nm] = (-0.4 * math.pi, 0.4 * math.pi)
    return out


@dataclass
class ConfusionMatrix:
    """Rows: reference safe/unsafe. Columns: candidate safe/unsafe."""

    counts: np.ndarray  # (2, 2) int
    labels: tuple = ("safe", "unsafe")
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def percentages(self) -> np.ndarray:
        return 100.0 * self.counts / max(self.total, 1)

    def to_dict(self) -> dict:
        pct = self.percentages
        cells = {}
        for i, r in enumerate(self.labels):
            for j, c in enumerate(self.labels):
                cells[f"reference_{r}/candidate_{c}"] = {"count": int(self.counts[i, j]), "percent": float(pct[i, j])}
        return {"total": self.total, "cells": cells, "meta": self.meta}


def grid_nodes(grid: Grid) -> np.ndarray:
    """Grid nodes without the duplicated endpoint of periodic dims."""
    axes = [ax[:-1] if per else ax for ax, per in zip(grid.axes, grid.periodic)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def filter_states(X: np.ndarray, names: Sequence[str], state_filter: Optional[dict]) -> np.ndarray:
    mask = np.ones(len(X), dtype=bool)
    for nm, (lo, hi) in (state_filter or {}).items():
        if nm not in names:
            raise ConfigError(f"state filter names unknown coordinate {nm!r}")
        i = list(names).index(nm)
        mask &= (X[:, i] >= lo) & (X[:, i] <= hi)
    return mask


def confusion(
    reference: SafetyConcept,
    candidate: SafetyConcept,
    grid: Grid,
    t: Optional[float] = None,
    state_filter: Optional[dict] = None,
    threshold: float = 0.0,
) -> ConfusionMatrix:
    """Cross-tabulate safe/unsafe labels of two concepts over filtered grid nodes.

    ``state_filter=None`` applies :func:`default_state_filter`; pass ``{}`` to
    use every node.
    """
    if state_filter is None:
        state_filter = default_state_filter(grid.names)
    X = grid_nodes(grid)
    X = X[filter_states(X, grid.names, state_filter)]
    if len(X) == 0:
        raise ConfigError("state filter leaves no grid nodes")
    ref = np.asarray(reference.evaluate(X, t)) < threshold
    cand = np.asarray(candidate.evaluate(X, t)) < threshold
    counts = np.array([
        [np.sum(~ref & ~cand), np.sum(~ref & cand)],
        [np.sum(ref & ~cand), np.sum(ref & cand)],
    ], dtype=int)
    meta = {
        "reference": reference.kind,
        "candidate": candidate.kind,
        "state_filter": {k: list(v) for k, v in state_filter.items()},
        "threshold": threshold,
    }
    return ConfusionMatrix(counts, meta=meta)


def epsilon_band(field: ValueField, k: int = -1) -> np.ndarray:
    """Numerical band: value change across two grid cells, ``2 sum_i dx_i |dV/dx_i|``."""
    V = field.values[k]
    grads = np.gradient(V, *field.grid.spacing)
    if V.ndim == 1:
        grads = [grads]
    return 2.0 * sum(np.abs(g) * h for g, h in zip(grads, field.grid.spacing))


@dataclass
class OrderingReport:
    raw_fraction: float  # HOCBF-unsafe and WC-safe
    band_fraction: float  # HOCBF-unsafe and WC value above the band
    nodes: int


def ordering_violations(worst_case: ValueField, constrained: ValueField, mask: Optional[np.ndarray] = None) -> OrderingReport:
    """How often the constrained game flags a node the worst-case game does not."""
    if worst_case.values.shape[1:] != constrained.values.shape[1:]:
        raise ConfigError("value fields are not on matched grids")
    Vw, Vc = worst_case.values[-1], constrained.values[-1]
    eps = epsilon_band(worst_case)
    m = np.ones(Vw.shape, dtype=bool) if mask is None else mask.reshape(Vw.shape)
    n = int(m.sum())
    raw = np.sum((Vc < 0) & (Vw >= 0) & m) / n
    band = np.sum((Vc < 0) & (Vw >= eps) & m) / n
    return OrderingReport(float(raw), float(band), n)


def unsafe_set_iou(a: HocbfModel, b: HocbfModel, dyn: AffinePairwiseDynamics, lower, upper,
                   n: int = 200000, seed: int = 0) -> float:
    """Monte Carlo IoU of ``{psi <= 0}`` for two effective CBFs over a state box."""
    rng = np.random.default_rng(seed)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    X = lower + rng.random((n, len(lower))) * (upper - lower)
    ua = effective_cbf(a, dyn, X) <= 0
    ub = effective_cbf(b, dyn, X) <= 0
    union = np.sum(ua | ub)
    return float(np.sum(ua & ub) / union) if union else 1.0


# ------------------------------------------------------------ statistics


PERCENTILES = (0, 5, 50, 95, 100)


@dataclass
class PercentileReport:
    mean: float
    percentiles: dict
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "percentiles": {str(k): v for k, v in self.percentiles.items()}, "n": self.n}


def percentile_summary(values, qs: Sequence[float] = PERCENTILES) -> PercentileReport:
    """Mean and linearly interpolated percentiles over the sorted values.

    Rank ``h = q (n - 1) / 100``; the result is ``(1 - f) s[lo] + f s[lo + 1]``
    with ``f = h - lo``. Written out (rather than ``np.percentile``) so an
    even-length median is exactly the mean of the two middle values.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ConfigError("no values to summarize")
    if not np.all(np.isfinite(v)):
        raise ConfigError("non-finite values in log evaluation")
    s = np.sort(v)
    out = {}
    for q in qs:
        h = q * (len(s) - 1) / 100.0
        lo = int(math.floor(h))
        f = h - lo
        if f == 0.0:
            out[q] = float(s[lo])
        else:
            a, b = s[lo], s[lo + 1]
            out[q] = float(min(max((1.0 - f) * a + f * b, a), b))
    return PercentileReport(float(np.mean(v)), out, int(v.size))


def percentile_report(concept: SafetyConcept, log: DemoDataset, t: Optional[float] = None) -> PercentileReport:
    return percentile_summary(concept.evaluate(log.states, t))


# --------------------------------------------------------------- exports


def _slice_axes(field: ValueField, slice_spec: dict):
    names = list(field.grid.names)
    fixed = {}
    for k, v in slice_spec.items():
        i = names.index(k) if isinstance(k, str) else int(k)
        fixed[i] = float(v)
    free = [i for i in range(field.grid.ndim) if i not in fixed]
    if len(free) != 2:
        raise ConfigError(f"slice must leave exactly two free coordinates, got {len(free)}")
    return fixed, free


def value_slice(field: ValueField, slice_spec: dict, t: Optional[float] = None):
    """Values on the node lattice of two free coordinates; others fixed."""
    fixed, free = _slice_axes(field, slice_spec)
    ax0, ax1 = field.grid.axes[free[0]], field.grid.axes[free[1]]
    A, B = np.meshgrid(ax0, ax1, indexing="ij")
    X = np.zeros((A.size, field.grid.ndim))
    X[:, free[0]], X[:, free[1]] = A.reshape(-1), B.reshape(-1)
    for i, v in fixed.items():
        X[:, i] = v
    vals = field.value_at(X, field.times[-1] if t is None else t)
    return ax0, ax1, vals.reshape(A.shape), free


def levelset_polylines(field: ValueField, slice_spec: dict, level: float = 0.0, t: Optional[float] = None) -> list:
    """Marching-squares contours of a 2-D slice, in state coordinates."""
    ax0, ax1, S, _ = value_slice(field, slice_spec, t)
    out = []
    for c in measure.find_contours(S, level):
        x = np.interp(c[:, 0], np.arange(len(ax0)), ax0)
        y = np.interp(c[:, 1], np.arange(len(ax1)), ax1)
        out.append(np.stack([x, y], axis=1))
    return out


def export_levelset(field: ValueField, slice_spec: dict, path, level: float = 0.0, t: Optional[float] = None) -> list:
    """Write contour polylines as CSV rows ``polyline, <name0>, <name1>``."""
    lines = levelset_polylines(field, slice_spec, level, t)
    _, free = _slice_axes(field, slice_spec)
    names = [field.grid.names[i] for i in free]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["polyline"] + names)
        for k, line in enumerate(lines):
            for p in line:
                w.writerow([k, format(p[0], ".17g"), format(p[1], ".17g")])
    return lines


def export_controls(concepts: dict, x, path, t: Optional[float] = None) -> dict:
    """Safe-control polygons and game-optimal controls of several concepts at one state."""
    x = np.asarray(x, dtype=float)
    out = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = max(max(c.dyn.ego_dim, c.dyn.contender_dim) for c in concepts.values())
        w.writerow(["concept", "item", "index"] + [f"u{i}" for i in range(dim)])

        def row(name, item, k, u):
            vals = [format(a, ".17g") for a in u]
            w.writerow([name, item, k] + vals + [""] * (dim - len(vals)))

        for name, c in concepts.items():
            poly = c.safe_controls(x, t)
            rec = {"vertices": poly.vertices.tolist(), "empty": poly.empty}
            for k, v in enumerate(poly.vertices):
                row(name, "safe_vertex", k, v)
            if c.is_hj:
                ua, ub, val = c.optimal_controls(x, t)
                rec.update({"u_A": ua.tolist(), "u_B": ub.tolist(), "hamiltonian": val})
                row(name, "optimal_ego", 0, ua)
                row(name, "optimal_contender", 0, ub)
            out[name] = rec
    return out
