"""Inner optimizations of the HJI Hamiltonian.

Two behavioral assumptions:

* worst case: ``max_{u_A} min_{u_B}`` of a linear objective over boxes, which
  separates per channel into bang-bang choices;
* HOCBF-constrained: the contender moves first, restricted to controls that
  leave the ego a feasible response, and the ego answers inside the coupled
  halfspace. The follower's best response value is concave (convex) in the
  leader's control, so the leader's optimum sits on a vertex of its feasible
  polytope and vertex enumeration on both levels is exact.

Batched helpers take ``(N, m)`` coefficient arrays; the scalar API wraps them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import ControlBox
from .hocbf import HocbfAffineConstraint
from .polytope import FeasiblePolytope, box_extreme, box_halfspace, candidate_points


@dataclass
class LinearGameInstance:
    """Objective ``drift + A.u_A + B.u_B`` with constraint ``a.u_A + b.u_B + c >= 0``."""

    A: np.ndarray
    B: np.ndarray
    drift: float
    a: np.ndarray
    b: np.ndarray
    c: float
    box_A: ControlBox
    box_B: ControlBox

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=float))
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.A.shape != self.a.shape or self.A.size != self.box_A.dim:
            raise ValueError("ego dimensions inconsistent")
        if self.B.shape != self.b.shape or self.B.size != self.box_B.dim:
            raise ValueError("contender dimensions inconsistent")

    @classmethod
    def from_constraint(cls, A, B, drift, con: HocbfAffineConstraint, box_A, box_B) -> "LinearGameInstance":
        return cls(A, B, drift, con.ego_coeff, con.contender_coeff, float(con.offset), box_A, box_B)

    def objective(self, u_A, u_B):
        return self.drift + np.asarray(u_A) @ self.A + np.asarray(u_B) @ self.B

    def constraint(self, u_A, u_B):
        return np.asarray(u_A) @ self.a + np.asarray(u_B) @ self.b + self.c


@dataclass
class GameSolution:
    value: float
    u_A: np.ndarray
    u_B: np.ndarray
    infeasible: bool = False


@dataclass
class Halfspace:
    """``{u : normal.u + offset >= 0}``."""

    normal: np.ndarray
    offset: float

    def contains(self, u, tol: float = 1e-9):
        return np.asarray(u, dtype=float) @ self.normal + self.offset >= -tol


# ----------------------------------------------------------- batched cores


def worst_case_batch(A, B, drift, box_A: ControlBox, box_B: ControlBox):
    """Separable bang-bang max-min; ties pick the lower bound."""
    va, ua = box_extreme(A, box_A, maximize=True)
    vb, ub = box_extreme(B, box_B, maximize=False)
    return drift + va + vb, ua, ub


def _min_leader(l_obj, f_obj, l_con, f_con, c, l_box: ControlBox, f_box: ControlBox):
    """``min_{u_l in U_l~} max_{u_f in U_f(u_l)} l_obj.u_l + f_obj.u_f``.

    Constraint ``l_con.u_l + f_con.u_f + c >= 0``. Returns
    ``(value, u_l, u_f, empty)``; ``value`` is ``nan`` where ``U_l~`` is empty.
    """
    N = len(c)
    f_best, _ = box_extreme(f_con, f_box, maximize=True)
    L, Lok = candidate_points(l_box, l_con, c + f_best)  # (N, KL, ml)
    KL = L.shape[1]
    r = np.einsum("nkm,nm->nk", L, l_con) + c[:, None]  # residual each leader vertex leaves
    Fp, Fok = candidate_points(f_box, np.repeat(f_con, KL, axis=0), r.reshape(-1))
    KF = Fp.shape[1]
    Fp = Fp.reshape(N, KL, KF, -1)
    Fok = Fok.reshape(N, KL, KF) & Lok[:, :, None]
    fval = np.einsum("nkjm,nm->nkj", Fp, f_obj)
    fval = np.where(Fok, fval, -np.inf)
    jbest = np.argmax(fval, axis=2)  # first maximizer in candidate order
    inner = np.take_along_axis(fval, jbest[:, :, None], axis=2)[:, :, 0]
    total = np.einsum("nkm,nm->nk", L, l_obj) + inner
    total = np.where(Lok & np.isfinite(inner), total, np.inf)
    kbest = np.argmin(total, axis=1)
    val = total[np.arange(N), kbest]
    empty = ~np.isfinite(val)
    u_l = L[np.arange(N), kbest]
    u_f = Fp[np.arange(N), kbest, jbest[np.arange(N), kbest]]
    return np.where(empty, np.nan, val), u_l, u_f, empty


def constrained_batch(A, B, drift, a, b, c, box_A: ControlBox, box_B: ControlBox):
    """HOCBF-constrained Hamiltonian, contender first.

    Where ``U_B~`` is empty the worst-case value is substituted and the
    returned ``infeasible`` flag is set.
    """
    A, B, a, b = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, a, b))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    drift = np.broadcast_to(np.asarray(drift, dtype=float), c.shape)
    val, uB, uA, empty = _min_leader(B, A, b, a, c, box_B, box_A)
    if np.any(empty):
        wv, wa, wb = worst_case_batch(A[empty], B[empty], drift[empty], box_A, box_B)
        val = val.copy()
        val[empty] = wv - drift[empty]
        uA[empty], uB[empty] = wa, wb
    # re-evaluate at the optimizers with the worst-case summation order, so an
    # inactive constraint reproduces the worst-case value bit for bit
    val = drift + np.sum(A * uA, axis=-1) + np.sum(B * uB, axis=-1)
    return val, uA, uB, empty


def maxmin_batch(A, B, drift, a, b, c, box_A: ControlBox, box_B: ControlBox):
    """Ego-first side: ``max_{u_A in U_A~} min_{u_B in U_B(u_A)}``."""
    A, B, a, b = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, a, b))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    val, uA, uB, empty = _min_leader(-A, -B, a, b, c, box_A, box_B)
    return drift - val, uA, uB, empty


# -------------------------------------------------------------- scalar API


def hamiltonian_worst_case(inst: LinearGameInstance) -> GameSolution:
    v, ua, ub = worst_case_batch(inst.A[None], inst.B[None], np.array([inst.drift]), inst.box_A, inst.box_B)
    return GameSolution(float(v[0]), ua[0], ub[0])


def contender_safe_set_halfspace(inst: LinearGameInstance) -> Halfspace:
    """Contender controls that leave the ego some feasible response."""
    best, _ = box_extreme(inst.a, inst.box_A, maximize=True)
    return Halfspace(inst.b.copy(), float(inst.c + best))


def contender_safe_set(inst: LinearGameInstance) -> FeasiblePolytope:
    hs = contender_safe_set_halfspace(inst)
    return box_halfspace(inst.box_B, hs.normal, hs.offset)


def hamiltonian_constrained(inst: LinearGameInstance) -> GameSolution:
    v, ua, ub, empty = constrained_batch(
        inst.A, inst.B, np.array([inst.drift]), inst.a, inst.b, np.array([inst.c]), inst.box_A, inst.box_B
    )
    return GameSolution(float(v[0]), ua[0], ub[0], bool(empty[0]))


@dataclass
class FirstMoverCheck:
    maxmin_value: Optional[float]
    minmax_value: Optional[float]
    holds: Optional[bool]
    empty: bool = False


def check_prop1(inst: LinearGameInstance, tol: float = 1e-9) -> FirstMoverCheck:
    """Both sides of the first-mover inequality by exact vertex enumeration."""
    args = (inst.A, inst.B, np.array([inst.drift]), inst.a, inst.b, np.array([inst.c]), inst.box_A, inst.box_B)
    mm, _, _, e1 = maxmin_batch(*args)
    _, _, _, e2 = constrained_batch(*args)
    if e1[0] or e2[0]:
        return FirstMoverCheck(None, None, None, empty=True)
    mn = hamiltonian_constrained(inst).value
    return FirstMoverCheck(float(mm[0]), mn, bool(mm[0] >= mn - tol))


# ------------------------------------------------------ safe control sets


def contender_min_term(B, box_B: ControlBox, assumption: str, constraint: Optional[HocbfAffineConstraint] = None,
                       box_A: Optional[ControlBox] = None):
    """``min B.u_B`` over the contender set of an assumption (single state).

    Returns ``(value, u_B)``. For ``"hocbf"`` the set is ``U_B~``; if that is
    empty the full box is used.
    """
    B = np.atleast_1d(np.asarray(B, dtype=float))
    if B.size == 0:
        return 0.0, B
    if assumption == "worst-case" or constraint is None:
        v, u = box_extreme(B, box_B, maximize=False)
        return float(v), u
    if assumption != "hocbf":
        raise ValueError(f"unknown assumption {assumption!r}")
    best, _ = box_extreme(constraint.ego_coeff, box_A, maximize=True)
    pts, ok = candidate_points(box_B, np.atleast_2d(constraint.contender_coeff),
                               np.atleast_1d(float(constraint.offset) + float(best)))
    pts, ok = pts[0], ok[0]
    if not ok.any():
        v, u = box_extreme(B, box_B, maximize=False)
        return float(v), u
    vals = np.where(ok, pts @ B, np.inf)
    k = int(np.argmin(vals))
    return float(vals[k]), pts[k]


def safe_set_from_gradient(grad, dVdt: float, x, dyn, assumption: str = "worst-case",
                           constraint: Optional[HocbfAffineConstraint] = None) -> FeasiblePolytope:
    """``{u_A in U_A : grad.f + A.u_A + min B.u_B + dV/dt >= 0}`` at one state."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    grad = np.asarray(grad, dtype=float)
    drift = float(grad @ dyn.drift(x)[0])
    A = grad @ dyn.ego_gain(x)[0]
    B = grad @ dyn.contender_gain(x)[0]
    minB, _ = contender_min_term(B, dyn.contender_box, assumption, constraint, dyn.ego_box)
    return box_halfspace(dyn.ego_box, A, drift + minB + float(dVdt))


def safety_preserving_control_set(x, value_field, dyn, assumption: str = "worst-case", t: Optional[float] = None,
                                  constraint: Optional[HocbfAffineConstraint] = None) -> FeasiblePolytope:
    """Ego controls that keep the value from decreasing under ``assumption``.

    ``value_field`` needs ``spatial_gradient(x, t)`` and ``time_derivative(x, t)``.
    """
    if t is None:
        t = float(value_field.times[-1])
    grad = value_field.spatial_gradient(x, t)
    dVdt = value_field.time_derivative(x, t)
    return safe_set_from_gradient(grad, dVdt, x, dyn, assumption, constraint)
