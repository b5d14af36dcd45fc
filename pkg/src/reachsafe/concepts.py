"""Safety concepts: a scalar safety value plus a set of allowable ego controls.

Two concepts come from solved value fields (worst-case and HOCBF-constrained
HJ games). Two are open-loop baselines evaluated by rollout: both cars brake
hard with zero steering, or both hold their current speed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import AffinePairwiseDynamics, make_dynamics, rollout
from .errors import ConfigError
from .game import constrained_batch, safety_preserving_control_set, worst_case_batch
from .hocbf import HocbfModel, constraint_at
from .polytope import FeasiblePolytope, box_halfspace
from .solver import BoundaryFn, ValueField

KINDS = ("wc-hj", "hocbf-hj", "brake", "constant")
HJ_KINDS = ("wc-hj", "hocbf-hj")

SAFE, UNSAFE = "safe", "unsafe"


def _speed_index(dyn: AffinePairwiseDynamics, who: str) -> Optional[int]:
    names = dyn.state_names
    for cand in (("v_A", "v") if who == "ego" else ("v_B",)):
        if cand in names:
            return names.index(cand)
    return None


def _brake_policy(dyn: AffinePairwiseDynamics, who: str, dt: float):
    """Zero steering, acceleration at the lower bound until the speed reaches zero.

    The final step applies exactly ``-v/dt`` so the speed lands on zero
    instead of overshooting into reverse.
    """
    box = dyn.ego_box if who == "ego" else dyn.contender_box
    dim = box.dim
    if dim == 0:
        return None
    vi = _speed_index(dyn, who)
    acc = dim - 1

    def policy(t, x):
        u = np.zeros(x.shape[:-1] + (dim,))
        if vi is None:
            u[..., acc] = box.lower[acc]
        else:
            u[..., acc] = np.clip(-x[..., vi] / dt, box.lower[acc], box.upper[acc])
        return u

    return policy


def _zero_policy(dim):
    return lambda t, x: np.zeros(x.shape[:-1] + (dim,))


@dataclass
class SafetyConcept:
    kind: str
    dyn: AffinePairwiseDynamics
    boundary: BoundaryFn
    value_field: Optional[ValueField] = None
    hocbf: Optional[HocbfModel] = None
    horizon: float = 2.0
    dt: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown concept kind {self.kind!r}; choose from {KINDS}")
        if self.kind in HJ_KINDS and self.value_field is None:
            raise ConfigError(f"{self.kind} needs a value field")
        if self.kind == "hocbf-hj" and self.hocbf is None:
            raise ConfigError("hocbf-hj needs an HOCBF model")
        if self.kind not in HJ_KINDS and not (self.horizon > 0 and self.dt > 0):
            raise ConfigError("rollout horizon and dt must be positive")

    @property
    def is_hj(self) -> bool:
        return self.kind in HJ_KINDS

    def _t(self, t):
        if t is None:
            return float(self.value_field.times[-1]) if self.is_hj else -self.horizon
        return float(t)

    # ---------------------------------------------------------- open loop

    def policies(self):
        if self.kind == "brake":
            ego = _brake_policy(self.dyn, "ego", self.dt)
            con = _brake_policy(self.dyn, "contender", self.dt)
        else:
            ego, con = _zero_policy(self.dyn.ego_dim), _zero_policy(self.dyn.contender_dim)
        return ego, con or _zero_policy(0)

    def _post_step(self):
        if self.kind != "brake":
            return None
        idx = [i for i in (_speed_index(self.dyn, "ego"), _speed_index(self.dyn, "contender")) if i is not None]
        if not idx or self.dyn.name == "double_integrator":
            return None

        def clamp(X):
            X[:, idx] = np.maximum(X[:, idx], 0.0)
            return X

        return clamp

    def rollout_value(self, X: np.ndarray, horizon: float) -> np.ndarray:
        """Minimum of the boundary function over the sampled open-loop rollout."""
        if horizon <= 0:
            return self.boundary(X)
        ego, con = self.policies()
        traj = rollout(self.dyn, X, ego, con, dt=min(self.dt, horizon), horizon=horizon, post_step=self._post_step())
        S = traj.states  # (T+1, N, n)
        vals = self.boundary(S.reshape(-1, S.shape[-1])).reshape(S.shape[:2])
        return vals.min(axis=0)

    # ------------------------------------------------------------- queries

    def evaluate(self, x, t: Optional[float] = None):
        """Scalar safety value; negative means a collision is not ruled out."""
        x = np.asarray(x, dtype=float)
        t = self._t(t)
        if self.is_hj:
            return self.value_field.value_at(x, t)
        X = np.atleast_2d(x)
        v = self.rollout_value(X, -t if t < 0 else 0.0)
        return float(v[0]) if x.ndim == 1 else v

    def classify(self, x, t: Optional[float] = None, threshold: float = 0.0):
        v = np.asarray(self.evaluate(x, t))
        lab = np.where(v < threshold, UNSAFE, SAFE)
        return str(lab) if lab.ndim == 0 else lab

    def _gradient_and_rate(self, x, t):
        if self.is_hj:
            return self.value_field.spatial_gradient(x, t), self.value_field.time_derivative(x, t)
        # one-step finite-difference surrogate of the open-loop value
        h = 1e-4 * (1.0 + np.abs(x))
        grad = np.zeros_like(x)
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h[i]
            grad[i] = (self.evaluate(x + e, t) - self.evaluate(x - e, t)) / (2 * h[i])
        return grad, 0.0

    def safe_controls(self, x, t: Optional[float] = None) -> FeasiblePolytope:
        """Ego controls that keep the value from decreasing at ``x``.

        HJ kinds minimize over the contender set of their game (full box, or
        the HOCBF-restricted set); open-loop kinds fix the contender to the
        concept's own policy.
        """
        x = np.asarray(x, dtype=float)
        t = self._t(t)
        if self.kind == "wc-hj":
            return safety_preserving_control_set(x, self.value_field, self.dyn, "worst-case", t)
        if self.kind == "hocbf-hj":
            con = constraint_at(self.hocbf, self.dyn, x)
            return safety_preserving_control_set(x, self.value_field, self.dyn, "hocbf", t, con)
        grad, rate = self._gradient_and_rate(x, t)
        _, con_pol = self.policies()
        uB = np.asarray(con_pol(t, x[None, :])[0]) if self.dyn.contender_dim else np.zeros(0)
        drift_B = grad @ self.dyn.contender_gain(x[None, :])[0] @ uB if self.dyn.contender_dim else 0.0
        A = grad @ self.dyn.ego_gain(x[None, :])[0]
        drift = float(grad @ self.dyn.drift(x[None, :])[0]) + float(drift_B) + float(rate)
        return box_halfspace(self.dyn.ego_box, A, drift)

    def optimal_controls(self, x, t: Optional[float] = None):
        """Equilibrium controls of the concept's Hamiltonian at ``x``.

        Returns ``(u_A, u_B, value)``; only defined for HJ kinds.
        """
        if not self.is_hj:
            raise ConfigError("optimal controls are defined for HJ concepts only")
        x = np.asarray(x, dtype=float)
        t = self._t(t)
        p = self.value_field.spatial_gradient(x, t)
        X = x[None, :]
        drift = np.array([p @ self.dyn.drift(X)[0]])
        A = (p @ self.dyn.ego_gain(X)[0])[None, :]
        B = (p @ self.dyn.contender_gain(X)[0])[None, :]
        if self.kind == "wc-hj":
            v, ua, ub = worst_case_batch(A, B, drift, self.dyn.ego_box, self.dyn.contender_box)
        else:
            con = constraint_at(self.hocbf, self.dyn, x)
            v, ua, ub, _ = constrained_batch(
                A, B, drift, con.ego_coeff[None], con.contender_coeff[None], np.array([con.offset]),
                self.dyn.ego_box, self.dyn.contender_box,
            )
        return ua[0], ub[0], float(v[0])

    # ------------------------------------------------------------- bundle

    def to_dict(self, field_path: Optional[str] = None) -> dict:
        d = {
            "kind": self.kind,
            "dynamics": self.dyn.config(),
            "boundary": self.boundary.spec,
            "horizon": self.horizon,
            "dt": self.dt,
        }
        if field_path is not None:
            d["value_field"] = field_path
        if self.hocbf is not None:
            d["hocbf"] = self.hocbf.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "SafetyConcept":
        try:
            kind = d["kind"]
            dyn = make_dynamics(d["dynamics"])
            boundary = BoundaryFn.from_dict(d["boundary"])
        except KeyError as e:
            raise ConfigError(f"concept entry missing or invalid: {e}") from None
        vf = None
        if kind in HJ_KINDS:
            if "value_field" not in d:
                raise ConfigError(f"{kind} concept needs a value_field path")
            path = Path(d["value_field"])
            vf = ValueField.load(path if path.is_absolute() else base / path)
        model = HocbfModel.from_dict(d["hocbf"]) if d.get("hocbf") else None
        return cls(kind, dyn, boundary, vf, model, float(d.get("horizon", 2.0)), float(d.get("dt", 0.05)))


def save_bundle(path, concepts: dict, field_paths: Optional[dict] = None) -> None:
    """Write ``{name: concept}`` as a JSON manifest referencing ``.vf`` files."""
    field_paths = field_paths or {}
    doc = {"concepts": {k: c.to_dict(field_paths.get(k)) for k, c in concepts.items()}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_bundle(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    return {k: SafetyConcept.from_dict(v, path.parent) for k, v in doc["concepts"].items()}
