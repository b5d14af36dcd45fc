"""High-order control barrier functions for relative degree one and two.

The Lie-derivative chain is closed-form: barriers provide value, gradient and
Hessian; dynamics provide drift, drift Jacobian and gains. Then

    grad(L_f b) = H_b f + J_f^T grad(b)

gives ``L_f^2 b``, ``L_g L_f b`` and ``L_h L_f b`` without autodiff.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .dynamics import AffinePairwiseDynamics, ControlBox
from .errors import ConfigError
from .polytope import FeasiblePolytope, box_extreme, box_halfspace


# ---------------------------------------------------------------- barriers


class BarrierSpec:
    kind = ""
    relative_degree_hint = 2

    def value(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params()}

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        v = self.value(np.atleast_2d(x))
        return float(v[0]) if x.ndim == 1 else v


class CircleBarrier(BarrierSpec):
    """``b = |pos - center|^2 - radius^2``."""

    kind = "circle"

    def __init__(self, center=(0.0, 0.0), radius: float = 1.0, pos_idx=(0, 1)):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.pos_idx = tuple(int(i) for i in pos_idx)
        if self.radius <= 0:
            raise ConfigError("circle radius must be positive")

    def value(self, X):
        d = X[:, self.pos_idx] - self.center
        return np.sum(d * d, axis=1) - self.radius**2

    def gradient(self, X):
        G = np.zeros_like(X)
        G[:, self.pos_idx] = 2.0 * (X[:, self.pos_idx] - self.center)
        return G

    def hessian(self, X):
        H = np.zeros((X.shape[0], X.shape[1], X.shape[1]))
        for i in self.pos_idx:
            H[:, i, i] = 2.0
        return H

    def params(self):
        return {"center": self.center.tolist(), "radius": self.radius, "pos_idx": list(self.pos_idx)}


class EllipseBarrier(BarrierSpec):
    """``b = (dx/a)^2 + (dy/b)^2 - 1`` on the position coordinates."""

    kind = "ellipse"

    def __init__(self, a: float = 5.4, b: float = 2.4, pos_idx=(0, 1), center=(0.0, 0.0)):
        self.a, self.b = float(a), float(b)
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("ellipse semi-axes must be positive")
        self.pos_idx = tuple(int(i) for i in pos_idx)
        self.center = np.asarray(center, dtype=float)
        self._w = np.array([1.0 / self.a**2, 1.0 / self.b**2])

    def value(self, X):
        d = X[:, self.pos_idx] - self.center
        return d**2 @ self._w - 1.0

    def gradient(self, X):
        G = np.zeros_like(X)
        G[:, self.pos_idx] = 2.0 * (X[:, self.pos_idx] - self.center) * self._w
        return G

    def hessian(self, X):
        H = np.zeros((X.shape[0], X.shape[1], X.shape[1]))
        for i, w in zip(self.pos_idx, self._w):
            H[:, i, i] = 2.0 * w
        return H

    def params(self):
        return {"a": self.a, "b": self.b, "pos_idx": list(self.pos_idx), "center": self.center.tolist()}


class AffineBarrier(BarrierSpec):
    """``b = w.x + offset`` (e.g. ``b = p`` for the double integrator)."""

    kind = "affine"

    def __init__(self, weights, offset: float = 0.0):
        self.weights = np.asarray(weights, dtype=float)
        self.offset = float(offset)

    def value(self, X):
        return X @ self.weights + self.offset

    def gradient(self, X):
        return np.broadcast_to(self.weights, X.shape).copy()

    def hessian(self, X):
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))

    def params(self):
        return {"weights": self.weights.tolist(), "offset": self.offset}


_BARRIERS = {"circle": CircleBarrier, "ellipse": EllipseBarrier, "affine": AffineBarrier}


def barrier_from_dict(d: dict) -> BarrierSpec:
    kind = d.get("kind")
    if kind not in _BARRIERS:
        raise ConfigError(f"unknown barrier kind {kind!r}")
    try:
        return _BARRIERS[kind](**d.get("params", {}))
    except TypeError as e:
        raise ConfigError(f"bad {kind} barrier params: {e}") from None


# ---------------------------------------------------------- class-K functions


def softplus(r):
    return np.logaddexp(0.0, r)


def softplus_inv(p):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ConfigError(f"effective parameters must be positive, got {p}")
    return p + np.log(-np.expm1(-p))


_N_PARAMS = {"linear": 1, "cubic": 1, "power": 2, "lc": 4}


class ClassKappaFn:
    """Extended class-K-infinity function with positivity-transformed parameters.

    Kinds (effective parameters ``p``, all positive):

    * ``linear``: ``p0 a``
    * ``cubic``: ``p0 a^3``
    * ``power``: ``p0 sign(a) |a|^p1`` with ``p1 = 1 + softplus(raw)``, so ``p1 > 1``
    * ``lc``: ``p0 a + p1 tanh(p2 a) + p3 a^3``

    Every effective parameter is ``softplus(raw)`` (plus the shift of one for
    the power exponent). Gradients are with respect to ``raw``.
    """

    def __init__(self, kind: str, raw):
        if kind not in _N_PARAMS:
            raise ConfigError(f"unknown class-K kind {kind!r}; choose from {sorted(_N_PARAMS)}")
        raw = np.asarray(raw, dtype=float).reshape(-1)
        if raw.size != _N_PARAMS[kind]:
            raise ConfigError(f"{kind} takes {_N_PARAMS[kind]} parameters, got {raw.size}")
        self.kind = kind
        self.raw = raw

    @classmethod
    def from_effective(cls, kind: str, params) -> "ClassKappaFn":
        p = np.asarray(params, dtype=float).reshape(-1).copy()
        if kind == "power":
            if p.size != 2:
                raise ConfigError("power takes [scale, exponent]")
            if p[1] <= 1.0:
                raise ConfigError(f"power exponent must exceed 1, got {p[1]}")
            p[1] -= 1.0
        return cls(kind, softplus_inv(p))

    @property
    def n_params(self) -> int:
        return self.raw.size

    def effective(self) -> np.ndarray:
        p = softplus(self.raw)
        if self.kind == "power":
            p[1] += 1.0
        return p

    def _chain(self) -> np.ndarray:
        return expit(self.raw)

    def with_raw(self, raw) -> "ClassKappaFn":
        return ClassKappaFn(self.kind, raw)

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        p = self.effective()
        if self.kind == "linear":
            return p[0] * a
        if self.kind == "cubic":
            return p[0] * a**3
        if self.kind == "power":
            return p[0] * np.sign(a) * np.abs(a) ** p[1]
        return p[0] * a + p[1] * np.tanh(p[2] * a) + p[3] * a**3

    def deriv(self, a):
        """``d alpha / d a``."""
        a = np.asarray(a, dtype=float)
        p = self.effective()
        if self.kind == "linear":
            return np.full_like(a, p[0])
        if self.kind == "cubic":
            return 3.0 * p[0] * a**2
        if self.kind == "power":
            return p[0] * p[1] * np.abs(a) ** (p[1] - 1.0)
        sech2 = 1.0 - np.tanh(p[2] * a) ** 2
        return p[0] + p[1] * p[2] * sech2 + 3.0 * p[3] * a**2

    def grad_value(self, a):
        """``d alpha(a) / d raw``, shape ``a.shape + (n_params,)``."""
        a = np.asarray(a, dtype=float)
        p = self.effective()
        if self.kind == "linear":
            g = a[..., None]
        elif self.kind == "cubic":
            g = (a**3)[..., None]
        elif self.kind == "power":
            absa = np.abs(a)
            pw = absa ** p[1]
            log = np.log(np.where(absa > 0, absa, 1.0))
            g = np.stack([np.sign(a) * pw, p[0] * np.sign(a) * pw * log], axis=-1)
        else:
            t = np.tanh(p[2] * a)
            g = np.stack([a, t, p[1] * a * (1.0 - t**2), a**3], axis=-1)
        return g * self._chain()

    def grad_deriv(self, a):
        """``d alpha'(a) / d raw``, shape ``a.shape + (n_params,)``."""
        a = np.asarray(a, dtype=float)
        p = self.effective()
        if self.kind == "linear":
            g = np.ones(a.shape + (1,))
        elif self.kind == "cubic":
            g = (3.0 * a**2)[..., None]
        elif self.kind == "power":
            absa = np.abs(a)
            pw = absa ** (p[1] - 1.0)
            log = np.log(np.where(absa > 0, absa, 1.0))
            g = np.stack([p[1] * pw, p[0] * pw * (1.0 + p[1] * log)], axis=-1)
        else:
            t = np.tanh(p[2] * a)
            s2 = 1.0 - t**2
            g = np.stack(
                [np.ones_like(a), p[2] * s2, p[1] * s2 * (1.0 - 2.0 * p[2] * a * t), 3.0 * a**2], axis=-1
            )
        return g * self._chain()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.effective().tolist(), "raw": self.raw.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassKappaFn":
        if "raw" in d:
            return cls(d["kind"], d["raw"])
        return cls.from_effective(d["kind"], d["params"])

    def __repr__(self):
        return f"ClassKappaFn({self.kind}, {np.round(self.effective(), 6).tolist()})"


# ------------------------------------------------------------------- model


@dataclass
class HocbfModel:
    barrier: BarrierSpec
    alphas: list

    def __post_init__(self):
        if len(self.alphas) not in (1, 2):
            raise ConfigError(
                f"relative degree {len(self.alphas)} not supported (only 1 or 2 have an exact O(b) term)"
            )

    @property
    def relative_degree(self) -> int:
        return len(self.alphas)

    @property
    def raw_params(self) -> np.ndarray:
        return np.concatenate([a.raw for a in self.alphas])

    def effective_params(self) -> np.ndarray:
        return np.concatenate([a.effective() for a in self.alphas])

    def with_raw(self, raw) -> "HocbfModel":
        raw = np.asarray(raw, dtype=float)
        out, k = [], 0
        for a in self.alphas:
            out.append(a.with_raw(raw[k : k + a.n_params]))
            k += a.n_params
        return HocbfModel(self.barrier, out)

    def to_dict(self) -> dict:
        return {
            "barrier": self.barrier.to_dict(),
            "alphas": [a.to_dict() for a in self.alphas],
            "relative_degree": self.relative_degree,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HocbfModel":
        try:
            model = cls(barrier_from_dict(d["barrier"]), [ClassKappaFn.from_dict(a) for a in d["alphas"]])
        except KeyError as e:
            raise ConfigError(f"model document missing field {e}") from None
        if "relative_degree" in d and int(d["relative_degree"]) != model.relative_degree:
            raise ConfigError("relative_degree disagrees with the number of alpha functions")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "HocbfModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LieTerms:
    """Parameter-independent pieces of the HOCBF constraint at a batch of states."""

    b: np.ndarray
    Lfb: np.ndarray
    Lgb: np.ndarray
    Lhb: np.ndarray
    Lf2b: np.ndarray
    LgLfb: np.ndarray
    LhLfb: np.ndarray


def lie_terms(barrier: BarrierSpec, dyn: AffinePairwiseDynamics, X) -> LieTerms:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gb = barrier.gradient(X)
    f = dyn.drift(X)
    g = dyn.ego_gain(X)
    h = dyn.contender_gain(X)
    grad_Lfb = np.einsum("nij,nj->ni", barrier.hessian(X), f) + np.einsum("nji,nj->ni", dyn.drift_jacobian(X), gb)
    return LieTerms(
        b=barrier.value(X),
        Lfb=np.sum(gb * f, axis=1),
        Lgb=np.einsum("ni,nij->nj", gb, g),
        Lhb=np.einsum("ni,nij->nj", gb, h),
        Lf2b=np.sum(grad_Lfb * f, axis=1),
        LgLfb=np.einsum("ni,nij->nj", grad_Lfb, g),
        LhLfb=np.einsum("ni,nij->nj", grad_Lfb, h),
    )


@dataclass
class HocbfAffineConstraint:
    """``ego_coeff . u_A + contender_coeff . u_B + offset >= 0`` (batched on axis 0)."""

    ego_coeff: np.ndarray
    contender_coeff: np.ndarray
    offset: np.ndarray

    def lhs(self, u_A, u_B=None):
        val = np.sum(self.ego_coeff * np.asarray(u_A, dtype=float), axis=-1) + self.offset
        if self.contender_coeff.shape[-1]:
            if u_B is None:
                raise ValueError("contender control required for a pairwise constraint")
            val = val + np.sum(self.contender_coeff * np.asarray(u_B, dtype=float), axis=-1)
        return val

    def __getitem__(self, i) -> "HocbfAffineConstraint":
        return HocbfAffineConstraint(self.ego_coeff[i], self.contender_coeff[i], self.offset[i])


def psi_from_terms(model: HocbfModel, T: LieTerms) -> np.ndarray:
    """``(N, m_r)`` array ``[psi_0, ..., psi_{m_r - 1}]``."""
    if model.relative_degree == 1:
        return T.b[:, None]
    return np.stack([T.b, T.Lfb + model.alphas[0](T.b)], axis=1)


def constraint_from_terms(model: HocbfModel, T: LieTerms) -> HocbfAffineConstraint:
    if model.relative_degree == 1:
        return HocbfAffineConstraint(T.Lgb, T.Lhb, T.Lfb + model.alphas[0](T.b))
    a1, a2 = model.alphas
    psi1 = T.Lfb + a1(T.b)
    offset = T.Lf2b + a1.deriv(T.b) * T.Lfb + a2(psi1)
    return HocbfAffineConstraint(T.LgLfb, T.LhLfb, offset)


def _batched(fn):
    def wrapper(model, dyn, x, *args, **kwargs):
        x = np.asarray(x, dtype=float)
        out = fn(model, dyn, np.atleast_2d(x), *args, **kwargs)
        if x.ndim == 1:
            return out[0]
        return out

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def psi_sequence(model: HocbfModel, dyn: AffinePairwiseDynamics, x):
    """``[psi_0(x), ..., psi_{m_r-1}(x)]`` for a state or a batch of states."""
    return psi_from_terms(model, lie_terms(model.barrier, dyn, x))


@_batched
def effective_cbf(model: HocbfModel, dyn: AffinePairwiseDynamics, x):
    """The last element of the psi chain; its zero level set bounds the learned safe set."""
    return psi_from_terms(model, lie_terms(model.barrier, dyn, x))[:, -1]


@_batched
def constraint_at(model: HocbfModel, dyn: AffinePairwiseDynamics, x) -> HocbfAffineConstraint:
    return constraint_from_terms(model, lie_terms(model.barrier, dyn, x))


def check_relative_degree(model: HocbfModel, dyn: AffinePairwiseDynamics, probes, tol: float = 1e-8):
    """Reject models whose declared relative degree disagrees with the dynamics at ``probes``."""
    T = lie_terms(model.barrier, dyn, probes)
    if model.relative_degree == 2:
        scale = 1.0 + np.max(np.abs(T.Lfb))
        lower = max(np.max(np.abs(T.Lgb), initial=0.0), np.max(np.abs(T.Lhb), initial=0.0))
        if lower > tol * scale:
            raise ConfigError(
                f"barrier has relative degree 1 under {dyn.name} (|L_g b| up to {lower:.3g}); "
                "declare one alpha function or pick a different barrier"
            )
        top = T.LgLfb
    else:
        top = T.Lgb
    if not np.any(np.abs(top) > tol):
        raise ConfigError(f"ego control never enters the barrier chain at relative degree {model.relative_degree}")


def contender_term(coeff, rule, box: Optional[ControlBox] = None):
    """Value of the contender's influence under a selection rule.

    ``rule`` is ``"worst-case"`` (minimize over ``box``), a ``ControlBox``
    (minimize over that interval) or an explicit control array.
    """
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape[-1] == 0:
        return np.zeros(coeff.shape[:-1])
    if isinstance(rule, str):
        if rule != "worst-case":
            raise ConfigError(f"unknown contender rule {rule!r}")
        if box is None:
            raise ConfigError("worst-case contender rule needs a control box")
        return box_extreme(coeff, box, maximize=False)[0]
    if isinstance(rule, ControlBox):
        return box_extreme(coeff, rule, maximize=False)[0]
    return np.sum(coeff * np.asarray(rule, dtype=float), axis=-1)


def admissible_control_set(
    model: HocbfModel, dyn: AffinePairwiseDynamics, x, box: Optional[ControlBox] = None, contender_rule="worst-case"
) -> FeasiblePolytope:
    """Ego controls in ``box`` meeting the HOCBF constraint at a single state.

    The contender's influence is folded into the offset according to
    ``contender_rule`` (see :func:`contender_term`). An empty result is
    reported through ``FeasiblePolytope.empty``.
    """
    box = box or dyn.ego_box
    con = constraint_at(model, dyn, np.asarray(x, dtype=float))
    offset = float(con.offset) + float(contender_term(con.contender_coeff, contender_rule, dyn.contender_box))
    return box_halfspace(box, con.ego_coeff, offset)


def alphas_from_config(spec: Sequence[dict]) -> list:
    return [ClassKappaFn.from_dict(d) for d in spec]
