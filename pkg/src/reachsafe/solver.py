"""Grid solver for the backward HJI variational inequality (avoid form).

Scheme per step (time runs from 0 back to -T):

    V <- V + dt * min(0, H(x, p_mean) + sum_i alpha_i (p+_i - p-_i) / 2)

with one-sided upwind differences ``p-``/``p+`` (first order, or ENO2),
Lax-Friedrichs dissipation ``alpha_i >= max |dH/dp_i|`` bounded analytically
from the control boxes, and ``dt`` from a CFL condition.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import AffinePairwiseDynamics
from .errors import ConfigError, NumericalAbort
from .game import constrained_batch, worst_case_batch
from .hocbf import BarrierSpec, HocbfModel, barrier_from_dict, constraint_at

log = logging.getLogger(__name__)

VF_MAGIC = "reachsafe-vf"


@dataclass(frozen=True)
class Grid:
    lower: tuple
    upper: tuple
    points: tuple
    periodic: tuple = ()
    names: tuple = ()

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        pts = tuple(int(v) for v in self.points)
        if not (len(lo) == len(hi) == len(pts)):
            raise ConfigError("grid lower/upper/points lengths differ")
        per = tuple(bool(p) for p in self.periodic) or (False,) * len(lo)
        names = tuple(self.names) or tuple(f"x{i}" for i in range(len(lo)))
        if len(per) != len(lo) or len(names) != len(lo):
            raise ConfigError("grid periodic/names lengths differ from dims")
        if any(p < 3 for p in pts):
            raise ConfigError("need at least 3 points per dimension")
        if any(not h > l for l, h in zip(lo, hi)):
            raise ConfigError("grid upper must exceed lower")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "periodic", per)
        object.__setattr__(self, "names", names)

    @classmethod
    def for_dynamics(cls, dyn: AffinePairwiseDynamics, lower, upper, points) -> "Grid":
        return cls(lower, upper, points, dyn.periodic, dyn.state_names)

    @property
    def ndim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple:
        return self.points

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.points) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(l, h, n) for l, h, n in zip(self.lower, self.upper, self.points)]

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    def states(self) -> np.ndarray:
        """All nodes as an ``(N, n)`` array in row-major order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points": list(self.points),
            "periodic": list(self.periodic),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(d["lower"], d["upper"], d["points"], d.get("periodic", ()), d.get("names", ()))


@dataclass
class BoundaryFn:
    """Signed boundary function; the target (collision) set is ``{l < 0}``."""

    fn: Callable[[np.ndarray], np.ndarray]
    spec: Optional[dict] = None

    @classmethod
    def from_barrier(cls, barrier: BarrierSpec) -> "BoundaryFn":
        return cls(barrier.value, barrier.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryFn":
        return cls.from_barrier(barrier_from_dict(d))

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = self.fn(np.atleast_2d(X))
        return float(out[0]) if X.ndim == 1 else out

    def in_target(self, X):
        return np.asarray(self(X)) < 0


# ------------------------------------------------------------ derivatives


def _pad(U: np.ndarray, axis: int, width: int, periodic: bool) -> np.ndarray:
    if periodic:
        return np.pad(U, [(width, width) if a == axis else (0, 0) for a in range(U.ndim)], mode="wrap")
    n = U.shape[axis]
    first = np.take(U, [0], axis=axis)
    second = np.take(U, [1], axis=axis)
    last = np.take(U, [n - 1], axis=axis)
    before = np.take(U, [n - 2], axis=axis)
    left = [first + k * (first - second) for k in range(width, 0, -1)]
    right = [last + k * (last - before) for k in range(1, width + 1)]
    return np.concatenate(left + [U] + right, axis=axis)


def _sl(axis, ndim, start, stop):
    s = [slice(None)] * ndim
    s[axis] = slice(start, stop)
    return tuple(s)


def upwind_derivatives(V: np.ndarray, axis: int, dx: float, periodic: bool, scheme: str = "upwind1"):
    """Left/right one-sided derivatives along ``axis``.

    Periodic axes carry a duplicated endpoint (node ``n-1`` equals node 0).
    """
    nd = V.ndim
    U = np.take(V, range(V.shape[axis] - 1), axis=axis) if periodic else V
    n = U.shape[axis]
    if scheme == "upwind1":
        P = _pad(U, axis, 1, periodic)
        d = np.diff(P, axis=axis) / dx  # n + 1 differences
        left = d[_sl(axis, nd, 0, n)]
        right = d[_sl(axis, nd, 1, n + 1)]
    elif scheme == "eno2":
        P = _pad(U, axis, 2, periodic)
        d = np.diff(P, axis=axis) / dx  # n + 3 first differences
        d2 = np.diff(d, axis=axis) / dx  # n + 2 second differences, d2[k] centred on P[k+1]
        # left derivative at node i (P index i+2): d[i+1] + dx/2 * m(d2[i], d2[i+1])
        dl = d[_sl(axis, nd, 1, n + 1)]
        dr = d[_sl(axis, nd, 2, n + 2)]
        a, b, c = d2[_sl(axis, nd, 0, n)], d2[_sl(axis, nd, 1, n + 1)], d2[_sl(axis, nd, 2, n + 2)]
        left = dl + 0.5 * dx * np.where(np.abs(a) <= np.abs(b), a, b)
        right = dr - 0.5 * dx * np.where(np.abs(b) <= np.abs(c), b, c)
    else:
        raise ConfigError(f"unknown spatial scheme {scheme!r}")
    if periodic:
        left = np.concatenate([left, np.take(left, [0], axis=axis)], axis=axis)
        right = np.concatenate([right, np.take(right, [0], axis=axis)], axis=axis)
    return left, right


# ------------------------------------------------------------ value field


@dataclass
class ValueField:
    grid: Grid
    times: np.ndarray  # descending, times[0] == 0
    values: np.ndarray  # (n_times, *grid.shape)
    meta: dict = field(default_factory=dict)

    def _slice_weights(self, t: float):
        times = self.times
        tmin, tmax = float(times[-1]), float(times[0])
        tol = 1e-9 * max(1.0, abs(tmin))
        if t > tmax + tol or t < tmin - tol:
            raise ValueError(f"time {t} outside stored range [{tmin}, {tmax}]")
        t = min(max(t, tmin), tmax)
        if len(times) == 1:
            return 0, 0, 0.0
        # times descending: find k with times[k] >= t >= times[k+1]
        k = int(np.searchsorted(-times, -t, side="right")) - 1
        k = min(max(k, 0), len(times) - 2)
        w = (times[k] - t) / (times[k] - times[k + 1])
        return k, k + 1, float(w)

    def _spatial(self, data: np.ndarray, X: np.ndarray):
        g = self.grid
        lo, hi, sp = np.array(g.lower), np.array(g.upper), g.spacing
        X = X.copy()
        clamped = np.zeros(len(X), dtype=bool)
        for i in range(g.ndim):
            if g.periodic[i]:
                period = hi[i] - lo[i]
                X[:, i] = lo[i] + np.mod(X[:, i] - lo[i], period)
            else:
                out = (X[:, i] < lo[i] - 1e-12 * sp[i]) | (X[:, i] > hi[i] + 1e-12 * sp[i])
                clamped |= out
                X[:, i] = np.clip(X[:, i], lo[i], hi[i])
        s = (X - lo) / sp
        idx = np.clip(np.floor(s).astype(int), 0, np.array(g.points) - 2)
        w = s - idx
        out = np.zeros(len(X))
        for corner in range(2 ** g.ndim):
            bits = [(corner >> i) & 1 for i in range(g.ndim)]
            weight = np.ones(len(X))
            ii = []
            for i, bit in enumerate(bits):
                weight = weight * (w[:, i] if bit else 1.0 - w[:, i])
                ii.append(idx[:, i] + bit)
            out += weight * data[tuple(ii)]
        return out, clamped

    def interpolate(self, x, t: float):
        """Multilinear in space, linear in time. Returns ``(values, clamped)``."""
        x = np.asarray(x, dtype=float)
        X = np.atleast_2d(x)
        k0, k1, w = self._slice_weights(float(t))
        v0, cl = self._spatial(self.values[k0], X)
        if w > 0:
            v1, _ = self._spatial(self.values[k1], X)
            v = (1.0 - w) * v0 + w * v1
        else:
            v = v0
        if x.ndim == 1:
            return float(v[0]), bool(cl[0])
        return v, cl

    def value_at(self, x, t: Optional[float] = None):
        return self.interpolate(x, self.times[-1] if t is None else t)[0]

    def spatial_gradient(self, x, t: Optional[float] = None):
        """Central differences (one grid spacing) of the interpolated field."""
        t = self.times[-1] if t is None else t
        x = np.asarray(x, dtype=float)
        X = np.atleast_2d(x)
        g = self.grid
        lo, hi, sp = np.array(g.lower), np.array(g.upper), g.spacing
        grad = np.zeros_like(X)
        for i in range(g.ndim):
            xp, xm = X.copy(), X.copy()
            xp[:, i] += sp[i]
            xm[:, i] -= sp[i]
            if not g.periodic[i]:
                xp[:, i] = np.minimum(xp[:, i], hi[i])
                xm[:, i] = np.maximum(xm[:, i], lo[i])
            h = xp[:, i] - xm[:, i]
            grad[:, i] = (self.interpolate(xp, t)[0] - self.interpolate(xm, t)[0]) / h
        return grad[0] if x.ndim == 1 else grad

    def time_derivative(self, x, t: Optional[float] = None):
        """dV/dt from the bracketing stored slices (zero for a single slice)."""
        t = self.times[-1] if t is None else t
        x = np.asarray(x, dtype=float)
        if len(self.times) == 1:
            return 0.0 if x.ndim == 1 else np.zeros(len(x))
        k0, k1, _ = self._slice_weights(float(t))
        X = np.atleast_2d(x)
        d = (self._spatial(self.values[k0], X)[0] - self._spatial(self.values[k1], X)[0]) / (
            self.times[k0] - self.times[k1]
        )
        return float(d[0]) if x.ndim == 1 else d

    # ---------------------------------------------------------------- I/O

    def decimated(self, n_slices: Optional[int]) -> "ValueField":
        if n_slices is None or n_slices >= len(self.times):
            return self
        idx = np.unique(np.round(np.linspace(0, len(self.times) - 1, max(n_slices, 2))).astype(int))
        return ValueField(self.grid, self.times[idx], self.values[idx], dict(self.meta))

    def save(self, path, n_slices: Optional[int] = None) -> None:
        vf = self.decimated(n_slices)
        header = {
            "format": VF_MAGIC,
            "version": 1,
            "grid": vf.grid.to_dict(),
            "times": [float(t) for t in vf.times],
            "dtype": "<f8",
            "order": "C",
            "meta": vf.meta,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for block in vf.values:
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "ValueField":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            if header.get("format") != VF_MAGIC:
                raise ConfigError(f"{path}: not a value-field file")
            raw = fh.read()
        grid = Grid.from_dict(header["grid"])
        times = np.array(header["times"], dtype=float)
        vals = np.frombuffer(raw, dtype="<f8")
        expect = len(times) * grid.size
        if vals.size != expect:
            raise ConfigError(f"{path}: expected {expect} values, found {vals.size}")
        return cls(grid, times, vals.reshape((len(times),) + grid.shape).astype(float), header.get("meta", {}))


# ------------------------------------------------------------------ solve


def dissipation_bounds(dyn: AffinePairwiseDynamics, X: np.ndarray) -> np.ndarray:
    """Per-node, per-axis bound on ``|dH/dp_i| = |f_i(x, u_A, u_B)|`` over the boxes."""
    bound = np.abs(dyn.drift(X))
    bound = bound + np.abs(dyn.ego_gain(X)) @ dyn.ego_box.magnitude
    if dyn.contender_dim:
        bound = bound + np.abs(dyn.contender_gain(X)) @ dyn.contender_box.magnitude
    return bound


@dataclass
class _Precomputed:
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    alpha: np.ndarray
    con_a: Optional[np.ndarray] = None
    con_b: Optional[np.ndarray] = None
    con_c: Optional[np.ndarray] = None


def _hamiltonian_chunk(kind, dyn, pre: _Precomputed, pbar: np.ndarray, sl: slice):
    n = pbar.shape[1]
    f, g, h = pre.f[sl], pre.g[sl], pre.h[sl]
    p = pbar[sl]
    drift = np.zeros(len(p))
    A = np.zeros((len(p), g.shape[2]))
    B = np.zeros((len(p), h.shape[2]))
    for i in range(n):  # fixed accumulation order keeps results chunk-independent
        drift += p[:, i] * f[:, i]
        A += p[:, i : i + 1] * g[:, i, :]
        B += p[:, i : i + 1] * h[:, i, :]
    if kind == "worst-case":
        return worst_case_batch(A, B, drift, dyn.ego_box, dyn.contender_box)[0], np.zeros(len(p), bool)
    val, _, _, infeasible = constrained_batch(
        A, B, drift, pre.con_a[sl], pre.con_b[sl], pre.con_c[sl], dyn.ego_box, dyn.contender_box
    )
    return val, infeasible


KINDS = ("worst-case", "constrained")


def solve(
    dyn: AffinePairwiseDynamics,
    hamiltonian_kind: str,
    boundary: BoundaryFn,
    grid: Grid,
    horizon: float,
    hocbf: Optional[HocbfModel] = None,
    scheme: str = "upwind1",
    dissipation: str = "local",
    cfl: float = 0.5,
    store_every: int = 1,
    workers: int = 1,
    chunk: int = 32768,
    meta: Optional[dict] = None,
) -> ValueField:
    """Solve the avoid-form HJI equation backward from ``t = 0`` to ``-horizon``.

    ``hamiltonian_kind`` is ``"worst-case"`` or ``"constrained"`` (the latter
    needs ``hocbf``). ``dissipation`` selects per-node (``"local"``) or
    grid-wide (``"global"``) Lax-Friedrichs coefficients. Slices are kept
    every ``store_every`` steps; the final slice is always kept.
    """
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    if hamiltonian_kind not in KINDS:
        raise ConfigError(f"unknown Hamiltonian kind {hamiltonian_kind!r}; choose from {KINDS}")
    if (hamiltonian_kind == "constrained") != (hocbf is not None):
        raise ConfigError("an HOCBF model is required for, and only for, the constrained kind")
    if grid.ndim != dyn.state_dim:
        raise ConfigError(f"grid has {grid.ndim} dims but {dyn.name} has {dyn.state_dim}")
    if dissipation not in ("local", "global"):
        raise ConfigError(f"unknown dissipation {dissipation!r}")

    X = grid.states()
    N = len(X)
    pre = _Precomputed(
        dyn.drift(X),
        dyn.ego_gain(X),
        dyn.contender_gain(X),
        dissipation_bounds(dyn, X),
    )
    if hocbf is not None:
        if dyn.contender_dim == 0:
            raise ConfigError("constrained game needs a contender")
        con = constraint_at(hocbf, dyn, X)
        pre.con_a, pre.con_b, pre.con_c = con.ego_coeff, con.contender_coeff, con.offset
    if dissipation == "global":
        pre.alpha = np.broadcast_to(pre.alpha.max(axis=0), pre.alpha.shape)

    dx = grid.spacing
    rate = float(np.max(pre.alpha @ (1.0 / dx))) if N else 0.0
    dt_cfl = cfl / rate if rate > 0 else horizon
    n_steps = max(1, int(math.ceil(horizon / dt_cfl - 1e-12)))
    dt = horizon / n_steps

    V = boundary(X).reshape(grid.shape).astype(float)
    if not np.all(np.isfinite(V)):
        raise NumericalAbort("boundary function is not finite on the grid")
    stored_t, stored_v = [0.0], [V.copy()]
    chunks = [slice(s, min(s + chunk, N)) for s in range(0, N, chunk)]
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    infeasible_nodes = np.zeros(N, dtype=bool)
    try:
        for k in range(n_steps):
            pbar = np.empty((N, grid.ndim))
            diss = np.zeros(N)
            for i in range(grid.ndim):
                left, right = upwind_derivatives(V, i, dx[i], grid.periodic[i], scheme)
                left, right = left.reshape(-1), right.reshape(-1)
                pbar[:, i] = 0.5 * (left + right)
                diss += 0.5 * pre.alpha[:, i] * (right - left)
            if pool is None:
                parts = [_hamiltonian_chunk(hamiltonian_kind, dyn, pre, pbar, sl) for sl in chunks]
            else:
                parts = list(pool.map(lambda sl: _hamiltonian_chunk(hamiltonian_kind, dyn, pre, pbar, sl), chunks))
            H = np.concatenate([p[0] for p in parts])
            infeasible_nodes |= np.concatenate([p[1] for p in parts])
            V_new = V + dt * np.minimum(0.0, H + diss).reshape(grid.shape)
            if not np.all(np.isfinite(V_new)):
                bad = np.argwhere(~np.isfinite(V_new))
                raise NumericalAbort(
                    f"non-finite values at step {k} (t={-(k + 1) * dt:.4g}): {len(bad)} nodes, first {bad[:5].tolist()}",
                    {"step": k, "time": -(k + 1) * dt, "slice": V_new, "previous": V},
                )
            V = V_new
            if (k + 1) % store_every == 0 or k == n_steps - 1:
                stored_t.append(-(k + 1) * dt)
                stored_v.append(V.copy())
    finally:
        if pool is not None:
            pool.shutdown()

    info = {
        "kind": hamiltonian_kind,
        "scheme": scheme,
        "dissipation": dissipation,
        "cfl": cfl,
        "dt": dt,
        "steps": n_steps,
        "dynamics": dyn.config(),
        "boundary": boundary.spec,
        "infeasible_fraction": float(infeasible_nodes.mean()) if N else 0.0,
    }
    if hocbf is not None:
        info["hocbf"] = hocbf.to_dict()
    info.update(meta or {})
    return ValueField(grid, np.array(stored_t), np.stack(stored_v), info)


def value_at(field: ValueField, x, t: float):
    return field.value_at(x, t)


def spatial_gradient(field: ValueField, x, t: float):
    return field.spatial_gradient(x, t)
