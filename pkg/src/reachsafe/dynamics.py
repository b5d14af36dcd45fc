"""Vehicle models in control-disturbance-affine form.

Every model exposes ``xdot = f(x) + g(x) u_A + h(x) u_B`` with batched
evaluators: states are ``(N, n)`` arrays, gains are ``(N, n, m)``.

The steering channel of the affine car models is ``tan(delta)`` rather than
``delta`` itself; the two are related by a monotone map so a steering box
in radians maps to a box in the affine channel (see :func:`steering_box`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ControlBox",
    "SimpleCarState",
    "AffinePairwiseDynamics",
    "SimpleCar",
    "DoubleIntegrator",
    "JointRelative6",
    "RelativeHeading5",
    "CommonHeading4",
    "ZeroDynamics",
    "Trajectory",
    "eval_simple_car",
    "joint_relative_dynamics",
    "steering_box",
    "rollout",
    "rk4_step",
    "make_dynamics",
]


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class ControlBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds shape mismatch: {lo.shape} vs {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"box lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def magnitude(self) -> np.ndarray:
        """Per-channel max |u| over the box."""
        return np.maximum(np.abs(self.lower), np.abs(self.upper))

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)

    def contains(self, u, tol: float = 0.0):
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)

    def corners(self) -> np.ndarray:
        """All 2^m corners, ordered with the all-lower corner first."""
        m = self.dim
        idx = (np.arange(2**m)[:, None] >> np.arange(m)[None, :]) & 1
        return np.where(idx == 1, self.upper, self.lower)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlBox":
        return cls(d["lower"], d["upper"])


EMPTY_BOX = ControlBox(np.zeros(0), np.zeros(0))


def steering_box(steer_lo: float, steer_hi: float, acc_lo: float, acc_hi: float) -> ControlBox:
    """Box over the affine (tan(delta), accel) channels from a steering box in radians."""
    if not (-math.pi / 2 < steer_lo <= steer_hi < math.pi / 2):
        raise ValueError("steering bounds must lie inside (-pi/2, pi/2)")
    return ControlBox([math.tan(steer_lo), acc_lo], [math.tan(steer_hi), acc_hi])


@dataclass(frozen=True)
class SimpleCarState:
    x: float
    y: float
    theta: float
    v: float

    def __post_init__(self):
        vals = (self.x, self.y, self.theta, self.v)
        if not all(math.isfinite(float(c)) for c in vals):
            raise ValueError(f"non-finite car state {vals}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)


def eval_simple_car(state, control, wheelbase: float) -> np.ndarray:
    """Right-hand side of the kinematic simple car.

    ``state`` is ``(x, y, theta, v)`` (or a :class:`SimpleCarState`), ``control``
    is ``(steering [rad], accel)``. Returns ``[v cos th, v sin th, v/l tan d, a]``.
    """
    s = state.as_array() if isinstance(state, SimpleCarState) else np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u)) and math.isfinite(wheelbase)):
        raise ValueError(f"non-finite input: state={s}, control={u}, wheelbase={wheelbase}")
    if wheelbase <= 0:
        raise ValueError("wheelbase must be positive")
    if abs(u[0]) >= math.pi / 2:
        raise ValueError(f"|steering| must be < pi/2, got {u[0]}")
    _, _, th, v = s
    return np.array([v * math.cos(th), v * math.sin(th), v / wheelbase * math.tan(u[0]), u[1]])


class AffinePairwiseDynamics:
    """Base class for ``xdot = f(x) + g(x) u_A + h(x) u_B``.

    Subclasses implement :meth:`drift`, :meth:`drift_jacobian`, :meth:`ego_gain`
    and :meth:`contender_gain` over batched ``(N, n)`` states.
    """

    name = "affine"
    state_names: tuple = ()
    periodic: tuple = ()
    ego_dim = 0
    contender_dim = 0
    wheelbase: Optional[float] = None

    def __init__(self, ego_box: ControlBox, contender_box: ControlBox = EMPTY_BOX):
        if ego_box.dim != self.ego_dim or contender_box.dim != self.contender_dim:
            raise ValueError(
                f"{self.name}: control boxes must have dims ({self.ego_dim}, {self.contender_dim}), "
                f"got ({ego_box.dim}, {contender_box.dim})"
            )
        self.ego_box = ego_box
        self.contender_box = contender_box

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    def drift(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def drift_jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def ego_gain(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contender_gain(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], self.state_dim, self.contender_dim))

    def evaluate(self, x, u_A, u_B=None) -> np.ndarray:
        """State rate for (batched) state and controls."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        uA = np.broadcast_to(np.asarray(u_A, dtype=float), (X.shape[0], self.ego_dim))
        rate = self.drift(X) + np.einsum("nij,nj->ni", self.ego_gain(X), uA)
        if self.contender_dim:
            if u_B is None:
                u_B = np.zeros(self.contender_dim)
            uB = np.broadcast_to(np.asarray(u_B, dtype=float), (X.shape[0], self.contender_dim))
            rate = rate + np.einsum("nij,nj->ni", self.contender_gain(X), uB)
        return rate[0] if single else rate

    def wrap(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for i, per in enumerate(self.periodic):
            if per:
                x[..., i] = wrap_angle(x[..., i])
        return x

    def config(self) -> dict:
        d = {"name": self.name, "ego_box": self.ego_box.to_dict()}
        if self.contender_dim:
            d["contender_box"] = self.contender_box.to_dict()
        if self.wheelbase is not None:
            d["wheelbase"] = self.wheelbase
        return d


class DoubleIntegrator(AffinePairwiseDynamics):
    """``p' = v, v' = u`` with a single ego control."""

    name = "double_integrator"
    state_names = ("p", "v")
    periodic = (False, False)
    ego_dim = 1

    def __init__(self, ego_box: ControlBox = ControlBox([-1.0], [1.0])):
        super().__init__(ego_box)

    def drift(self, x):
        return np.stack([x[:, 1], np.zeros(len(x))], axis=1)

    def drift_jacobian(self, x):
        J = np.zeros((len(x), 2, 2))
        J[:, 0, 1] = 1.0
        return J

    def ego_gain(self, x):
        G = np.zeros((len(x), 2, 1))
        G[:, 1, 0] = 1.0
        return G


class SimpleCar(AffinePairwiseDynamics):
    """Single simple car, controls ``(tan(delta), a)``."""

    name = "simple_car"
    state_names = ("x", "y", "theta", "v")
    periodic = (False, False, True, False)
    ego_dim = 2

    def __init__(self, ego_box: ControlBox, wheelbase: float = 2.7):
        super().__init__(ego_box)
        self.wheelbase = float(wheelbase)

    def drift(self, x):
        th, v = x[:, 2], x[:, 3]
        z = np.zeros(len(x))
        return np.stack([v * np.cos(th), v * np.sin(th), z, z], axis=1)

    def drift_jacobian(self, x):
        th, v = x[:, 2], x[:, 3]
        J = np.zeros((len(x), 4, 4))
        J[:, 0, 2] = -v * np.sin(th)
        J[:, 0, 3] = np.cos(th)
        J[:, 1, 2] = v * np.cos(th)
        J[:, 1, 3] = np.sin(th)
        return J

    def ego_gain(self, x):
        G = np.zeros((len(x), 4, 2))
        G[:, 2, 0] = x[:, 3] / self.wheelbase
        G[:, 3, 1] = 1.0
        return G


class JointRelative6(AffinePairwiseDynamics):
    """Ground-frame relative state ``(dx, dy, th_A, th_B, v_A, v_B)``, ``d* = *_B - *_A``."""

    name = "joint6"
    state_names = ("dx", "dy", "theta_A", "theta_B", "v_A", "v_B")
    periodic = (False, False, True, True, False, False)
    ego_dim = 2
    contender_dim = 2

    def __init__(self, ego_box: ControlBox, contender_box: ControlBox, wheelbase: float = 2.7):
        super().__init__(ego_box, contender_box)
        self.wheelbase = float(wheelbase)

    def drift(self, x):
        thA, thB, vA, vB = x[:, 2], x[:, 3], x[:, 4], x[:, 5]
        f = np.zeros_like(x)
        f[:, 0] = vB * np.cos(thB) - vA * np.cos(thA)
        f[:, 1] = vB * np.sin(thB) - vA * np.sin(thA)
        return f

    def drift_jacobian(self, x):
        thA, thB, vA, vB = x[:, 2], x[:, 3], x[:, 4], x[:, 5]
        J = np.zeros((len(x), 6, 6))
        J[:, 0, 2] = vA * np.sin(thA)
        J[:, 0, 3] = -vB * np.sin(thB)
        J[:, 0, 4] = -np.cos(thA)
        J[:, 0, 5] = np.cos(thB)
        J[:, 1, 2] = -vA * np.cos(thA)
        J[:, 1, 3] = vB * np.cos(thB)
        J[:, 1, 4] = -np.sin(thA)
        J[:, 1, 5] = np.sin(thB)
        return J

    def ego_gain(self, x):
        G = np.zeros((len(x), 6, 2))
        G[:, 2, 0] = x[:, 4] / self.wheelbase
        G[:, 4, 1] = 1.0
        return G

    def contender_gain(self, x):
        H = np.zeros((len(x), 6, 2))
        H[:, 3, 0] = x[:, 5] / self.wheelbase
        H[:, 5, 1] = 1.0
        return H


class RelativeHeading5(AffinePairwiseDynamics):
    """Ego-frame relative state ``(px, py, psi, v_A, v_B)`` with ``psi = th_B - th_A``.

    Only rotation-invariant barriers keep relative degree two here: the ego
    steering rotates the frame, so ``L_g b`` of an axis-aligned ellipse is nonzero.
    """

    name = "relheading5"
    state_names = ("px", "py", "psi", "v_A", "v_B")
    periodic = (False, False, True, False, False)
    ego_dim = 2
    contender_dim = 2

    def __init__(self, ego_box: ControlBox, contender_box: ControlBox, wheelbase: float = 2.7):
        super().__init__(ego_box, contender_box)
        self.wheelbase = float(wheelbase)

    def drift(self, x):
        psi, vA, vB = x[:, 2], x[:, 3], x[:, 4]
        f = np.zeros_like(x)
        f[:, 0] = vB * np.cos(psi) - vA
        f[:, 1] = vB * np.sin(psi)
        return f

    def drift_jacobian(self, x):
        psi, vB = x[:, 2], x[:, 4]
        J = np.zeros((len(x), 5, 5))
        J[:, 0, 2] = -vB * np.sin(psi)
        J[:, 0, 3] = -1.0
        J[:, 0, 4] = np.cos(psi)
        J[:, 1, 2] = vB * np.cos(psi)
        J[:, 1, 4] = np.sin(psi)
        return J

    def ego_gain(self, x):
        px, py, vA = x[:, 0], x[:, 1], x[:, 3]
        w = vA / self.wheelbase
        G = np.zeros((len(x), 5, 2))
        G[:, 0, 0] = w * py
        G[:, 1, 0] = -w * px
        G[:, 2, 0] = -w
        G[:, 3, 1] = 1.0
        return G

    def contender_gain(self, x):
        H = np.zeros((len(x), 5, 2))
        H[:, 2, 0] = x[:, 4] / self.wheelbase
        H[:, 4, 1] = 1.0
        return H


class CommonHeading4(AffinePairwiseDynamics):
    """Lane-aligned reduction ``(dx, dy, v_A, v_B)`` with both headings held at zero.

    Steering channels are kept so control boxes match the 6-D model, but their
    gains vanish; only the accelerations act on the state.
    """

    name = "common4"
    state_names = ("dx", "dy", "v_A", "v_B")
    periodic = (False, False, False, False)
    ego_dim = 2
    contender_dim = 2

    def __init__(self, ego_box: ControlBox, contender_box: ControlBox, wheelbase: float = 2.7):
        super().__init__(ego_box, contender_box)
        self.wheelbase = float(wheelbase)

    def drift(self, x):
        f = np.zeros_like(x)
        f[:, 0] = x[:, 3] - x[:, 2]
        return f

    def drift_jacobian(self, x):
        J = np.zeros((len(x), 4, 4))
        J[:, 0, 2] = -1.0
        J[:, 0, 3] = 1.0
        return J

    def ego_gain(self, x):
        G = np.zeros((len(x), 4, 2))
        G[:, 2, 1] = 1.0
        return G

    def contender_gain(self, x):
        H = np.zeros((len(x), 4, 2))
        H[:, 3, 1] = 1.0
        return H


class ZeroDynamics(AffinePairwiseDynamics):
    """``xdot = 0`` for any control; the value function never changes."""

    name = "zero"
    ego_dim = 1

    def __init__(self, state_dim: int = 2):
        if state_dim < 1:
            raise ValueError("state_dim must be positive")
        self.state_names = tuple(f"x{i}" for i in range(state_dim))
        self.periodic = (False,) * state_dim
        super().__init__(ControlBox([-1.0], [1.0]))

    def drift(self, x):
        return np.zeros_like(x)

    def drift_jacobian(self, x):
        return np.zeros((len(x), self.state_dim, self.state_dim))

    def ego_gain(self, x):
        return np.zeros((len(x), self.state_dim, 1))

    def config(self) -> dict:
        return {"name": self.name, "state_dim": self.state_dim}


def joint_relative_dynamics(
    ego: SimpleCarState,
    contender: SimpleCarState,
    ego_box: Optional[ControlBox] = None,
    contender_box: Optional[ControlBox] = None,
    wheelbase: float = 2.7,
):
    """Pairwise 6-D relative model and the joint state of two simple cars.

    Returns ``(dynamics, x)`` with ``x = (x_B - x_A, y_B - y_A, th_A, th_B, v_A, v_B)``.
    """
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    dyn = JointRelative6(ego_box or box, contender_box or box, wheelbase)
    x = np.array([contender.x - ego.x, contender.y - ego.y, ego.theta, contender.theta, ego.v, contender.v])
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite joint state")
    return dyn, x


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T+1, ..., n)
    ego_controls: np.ndarray  # (T, ..., m_A)
    contender_controls: np.ndarray  # (T, ..., m_B)
    clamp_count: int = 0
    flags: dict = field(default_factory=dict)


Policy = Callable[[float, np.ndarray], np.ndarray]


def _zero_policy(dim):
    return lambda t, x: np.zeros(x.shape[:-1] + (dim,))


def rk4_step(dyn: AffinePairwiseDynamics, X: np.ndarray, uA: np.ndarray, uB: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of batched states ``(N, n)`` under held controls."""

    def rate(s):
        r = dyn.drift(s) + np.einsum("nij,nj->ni", dyn.ego_gain(s), uA)
        if dyn.contender_dim:
            r = r + np.einsum("nij,nj->ni", dyn.contender_gain(s), uB)
        return r

    k1 = rate(X)
    k2 = rate(X + 0.5 * dt * k1)
    k3 = rate(X + 0.5 * dt * k2)
    k4 = rate(X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rollout(
    dyn: AffinePairwiseDynamics,
    x0,
    ego_policy: Optional[Policy] = None,
    contender_policy: Optional[Policy] = None,
    dt: float = 0.05,
    horizon: float = 1.0,
    post_step: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Trajectory:
    """Fixed-step RK4 rollout with zero-order-hold controls.

    ``x0`` may be a single state or a batch ``(N, n)``; policies receive
    ``(t, x)`` with the same leading shape. Controls outside the model's boxes
    are clamped and counted in ``clamp_count``. ``post_step`` is applied to the
    state after every step (used for speed clamping under braking).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    ego_policy = ego_policy or _zero_policy(dyn.ego_dim)
    contender_policy = contender_policy or _zero_policy(dyn.contender_dim)
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x).copy()
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        n_steps = int(math.ceil(horizon / dt))

    states = [X.copy()]
    uAs, uBs = [], []
    clamps = 0
    t = 0.0
    for k in range(n_steps):
        t = k * dt
        uA = np.broadcast_to(np.asarray(ego_policy(t, X), dtype=float), (len(X), dyn.ego_dim))
        uB = np.broadcast_to(np.asarray(contender_policy(t, X), dtype=float), (len(X), dyn.contender_dim))
        uA_c = dyn.ego_box.clip(uA)
        clamps += int(np.count_nonzero(np.any(uA_c != uA, axis=-1)))
        if dyn.contender_dim:
            uB_c = dyn.contender_box.clip(uB)
            clamps += int(np.count_nonzero(np.any(uB_c != uB, axis=-1)))
        else:
            uB_c = uB
        X = rk4_step(dyn, X, uA_c, uB_c, dt)
        if post_step is not None:
            X = post_step(X)
        states.append(X.copy())
        uAs.append(np.array(uA_c))
        uBs.append(np.array(uB_c))

    S = np.stack(states)
    UA = np.stack(uAs)
    UB = np.stack(uBs)
    if single:
        S, UA, UB = S[:, 0], UA[:, 0], UB[:, 0]
    return Trajectory(np.arange(n_steps + 1) * dt, S, UA, UB, clamps)


_MODELS = {
    "double_integrator": DoubleIntegrator,
    "simple_car": SimpleCar,
    "joint6": JointRelative6,
    "relheading5": RelativeHeading5,
    "common4": CommonHeading4,
    "zero": ZeroDynamics,
}


def _box_from_config(d: Optional[dict], default: ControlBox, steering: bool) -> ControlBox:
    if d is None:
        return default
    if steering and "steer" in d:
        s, a = d["steer"], d["accel"]
        return steering_box(s[0], s[1], a[0], a[1])
    return ControlBox.from_dict(d)


def make_dynamics(cfg: dict) -> AffinePairwiseDynamics:
    """Build a model from a config block ``{name, wheelbase, ego_box, contender_box}``.

    Car boxes may be given as ``{"steer": [lo, hi], "accel": [lo, hi]}`` in
    radians, or directly over the affine channels as ``{"lower", "upper"}``.
    """
    name = cfg.get("name")
    if name not in _MODELS:
        raise KeyError(f"unknown dynamics {name!r}; choose from {sorted(_MODELS)}")
    cls = _MODELS[name]
    if cls is ZeroDynamics:
        return ZeroDynamics(int(cfg.get("state_dim", 2)))
    if cls is DoubleIntegrator:
        return DoubleIntegrator(_box_from_config(cfg.get("ego_box"), ControlBox([-1.0], [1.0]), False))
    default = steering_box(-0.5, 0.5, -5.0, 3.0)
    wb = float(cfg.get("wheelbase", 2.7))
    ego = _box_from_config(cfg.get("ego_box"), default, True)
    if cls is SimpleCar:
        return SimpleCar(ego, wb)
    return cls(ego, _box_from_config(cfg.get("contender_box"), default, True), wb)
