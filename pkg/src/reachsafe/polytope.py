"""Vertex enumeration for an axis-aligned box cut by one halfspace.

The feasible set ``{u in [lo, hi] : a.u + c >= 0}`` has its vertices among the
box corners and the points where the hyperplane crosses box edges, so a fixed
candidate list of ``2^m + m 2^(m-1)`` points covers it. The batched helpers
keep that candidate layout fixed so callers can vectorize over many halfspaces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ControlBox

FEAS_TOL = 1e-9


def feasibility_tol(box: ControlBox, a, c):
    """Absolute slack used when testing ``a.u + c >= 0`` (scaled by the data)."""
    a = np.asarray(a, dtype=float)
    return FEAS_TOL * (1.0 + np.abs(c) + np.abs(a) @ box.magnitude)


def _edge_layout(m: int):
    """(free coordinate, fixed-corner mask) for each box edge, in a fixed order."""
    out = []
    for k in range(m):
        others = [j for j in range(m) if j != k]
        for bits in range(2 ** (m - 1)):
            fixed = {j: (bits >> i) & 1 for i, j in enumerate(others)}
            out.append((k, fixed))
    return out


def candidate_points(box: ControlBox, a, c):
    """Batched candidate vertices of ``box ∩ {a.u + c >= 0}``.

    Args:
        box: control box of dimension m.
        a: ``(N, m)`` halfspace normals.
        c: ``(N,)`` offsets.

    Returns:
        ``(points, valid)`` with shapes ``(N, K, m)`` and ``(N, K)``. Corners
        come first (all-lower corner first), then edge crossings.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    N, m = a.shape
    if m == 0:
        pts = np.zeros((N, 1, 0))
        return pts, c >= -FEAS_TOL * (1.0 + np.abs(c))
    lo, hi = box.lower, box.upper
    tol = feasibility_tol(box, a, c)
    corners = box.corners()  # (2^m, m)
    pts = [np.broadcast_to(corners, (N,) + corners.shape)]
    cvals = np.einsum("nm,km->nk", a, corners) + c[:, None]
    valid = [cvals >= -tol[:, None]]

    edge_pts, edge_ok = [], []
    for k, fixed in _edge_layout(m):
        p = np.empty((N, m))
        rest = c.copy()
        for j, bit in fixed.items():
            p[:, j] = hi[j] if bit else lo[j]
            rest = rest + a[:, j] * p[:, j]
        ak = a[:, k]
        nz = np.abs(ak) > 1e-300
        with np.errstate(divide="ignore", invalid="ignore"):
            uk = np.where(nz, -rest / np.where(nz, ak, 1.0), lo[k])
        # allow a tolerance slack on the box, then snap inside
        span_tol = FEAS_TOL * (1.0 + abs(lo[k]) + abs(hi[k]))
        ok = nz & (uk >= lo[k] - span_tol) & (uk <= hi[k] + span_tol)
        p[:, k] = np.clip(uk, lo[k], hi[k])
        edge_pts.append(p)
        edge_ok.append(ok)
    if edge_pts:
        pts.append(np.stack(edge_pts, axis=1))
        valid.append(np.stack(edge_ok, axis=1))
    return np.concatenate(pts, axis=1), np.concatenate(valid, axis=1)


@dataclass
class FeasiblePolytope:
    vertices: np.ndarray  # (k, m), deduplicated; counter-clockwise in 2-D
    empty: bool
    box: ControlBox
    normal: np.ndarray
    offset: float

    @property
    def dim(self) -> int:
        return self.box.dim

    def contains(self, u, tol: float = 1e-9):
        u = np.asarray(u, dtype=float)
        in_box = self.box.contains(u, tol)
        return in_box & (u @ self.normal + self.offset >= -tol)

    def area(self) -> float:
        """Lebesgue measure (length in 1-D, area in 2-D)."""
        if self.empty:
            return 0.0
        if self.dim == 1:
            return float(self.vertices.max() - self.vertices.min())
        if self.dim == 2:
            if len(self.vertices) < 3:
                return 0.0
            x, y = self.vertices[:, 0], self.vertices[:, 1]
            return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
        raise NotImplementedError("area only for 1-D/2-D controls")

    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist(), "empty": self.empty}


def _dedupe(points: np.ndarray, scale: float) -> np.ndarray:
    out = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= 1e-12 * scale for q in out):
            out.append(p)
    return np.array(out).reshape(-1, points.shape[1])


def _order_ccw(v: np.ndarray) -> np.ndarray:
    if v.shape[1] != 2 or len(v) < 3:
        return v[np.lexsort(v.T[::-1])] if len(v) else v
    ctr = v.mean(axis=0)
    ang = np.arctan2(v[:, 1] - ctr[1], v[:, 0] - ctr[0])
    return v[np.argsort(ang, kind="stable")]


def box_halfspace(box: ControlBox, normal, offset: float) -> FeasiblePolytope:
    """Polytope ``box ∩ {normal.u + offset >= 0}`` with its vertex list."""
    normal = np.asarray(normal, dtype=float).reshape(box.dim)
    pts, ok = candidate_points(box, normal[None, :], np.array([float(offset)]))
    pts, ok = pts[0], ok[0]
    scale = 1.0 + float(np.max(box.magnitude)) if box.dim else 1.0
    verts = _order_ccw(_dedupe(pts[ok], scale))
    return FeasiblePolytope(verts, len(verts) == 0, box, normal, float(offset))


def project(point, poly: FeasiblePolytope) -> np.ndarray:
    """Euclidean projection onto a nonempty 1-D or 2-D polytope."""
    if poly.empty:
        raise ValueError("cannot project onto an empty polytope")
    p = np.asarray(point, dtype=float)
    if poly.contains(p, tol=0.0):
        return p.copy()
    V = poly.vertices
    if poly.dim == 1:
        return np.clip(p, V.min(axis=0), V.max(axis=0))
    if poly.dim != 2:
        raise NotImplementedError("projection only for 1-D/2-D controls")
    if len(V) == 1:
        return V[0].copy()
    best, best_d = None, np.inf
    for i in range(len(V)):
        s, e = V[i], V[(i + 1) % len(V)]
        d = e - s
        L = d @ d
        t = 0.0 if L == 0 else np.clip((p - s) @ d / L, 0.0, 1.0)
        q = s + t * d
        dist = (p - q) @ (p - q)
        if dist < best_d - 1e-15:
            best, best_d = q, dist
    return best


def box_extreme(coeff, box: ControlBox, maximize: bool):
    """Bang-bang optimum of ``coeff.u`` over a box, batched over rows of ``coeff``.

    Ties (zero coefficient) pick the lower bound. Returns ``(value, argopt)``.
    """
    coeff = np.asarray(coeff, dtype=float)
    if maximize:
        u = np.where(coeff > 0, box.upper, box.lower)
    else:
        u = np.where(coeff < 0, box.upper, box.lower)
    return np.sum(coeff * u, axis=-1), u
