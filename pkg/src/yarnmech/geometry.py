"""Shared geometric primitives.

Polylines with per-interior-vertex twist angles, orthonormal frames,
minimal rotations between directions, cross-section planes and
plane/curve intersections. Everything here is an immutable value and
every operation is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAME_TOL = 1e-9


class DegenerateTurnError(ValueError):
    """Two consecutive edges fold back onto each other."""


class RankError(ValueError):
    """A point cloud is too degenerate for the requested fit."""


def _as_readonly(a, shape_tail=None, dtype=float):
    out = np.array(a, dtype=dtype, copy=True, order="C")
    if shape_tail is not None and out.shape[1:] != shape_tail:
        raise ValueError(f"expected trailing shape {shape_tail}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Polyline:
    """Ordered vertex chain with per-interior-vertex twist angles.

    rest_edge_lengths are the undeformed edge lengths; the effective rest
    length at interior vertex i is the mean of its two adjacent rest
    lengths.
    """

    vertices: np.ndarray
    twist_angles: np.ndarray = None
    rest_edge_lengths: np.ndarray = None
    rest_kappas: np.ndarray = None  # per-interior rest turning vectors; zero = straight rest

    def __post_init__(self):
        v = _as_readonly(self.vertices, (3,))
        if v.shape[0] < 2:
            raise ValueError("polyline needs at least 2 vertices")
        n = v.shape[0]
        tw = self.twist_angles
        tw = np.zeros(n - 2) if tw is None else np.asarray(tw, dtype=float)
        if tw.shape != (n - 2,):
            raise ValueError("twist angle count must be n_vertices - 2")
        rl = self.rest_edge_lengths
        if rl is None:
            rl = np.linalg.norm(np.diff(v, axis=0), axis=1)
        rl = np.asarray(rl, dtype=float)
        if rl.shape != (n - 1,) or np.any(rl <= 0.0):
            raise ValueError("rest edge lengths must be n-1 strictly positive scalars")
        rk = self.rest_kappas
        rk = np.zeros((n - 2, 3)) if rk is None else np.asarray(rk, dtype=float)
        if rk.shape != (n - 2, 3):
            raise ValueError("rest turning vectors must be (n-2, 3)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "twist_angles", _as_readonly(tw))
        object.__setattr__(self, "rest_edge_lengths", _as_readonly(rl))
        object.__setattr__(self, "rest_kappas", _as_readonly(rk))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_edges(self) -> int:
        return self.vertices.shape[0] - 1

    def edges(self) -> np.ndarray:
        """Edge vectors (n-1, 3)."""
        return np.diff(self.vertices, axis=0)

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.edges(), axis=1)

    def tangents(self) -> np.ndarray:
        """Unit edge tangents."""
        e = self.edges()
        return e / np.linalg.norm(e, axis=1)[:, None]

    def effective_rest_lengths(self) -> np.ndarray:
        """Per-interior-vertex mean of adjacent rest edge lengths."""
        rl = self.rest_edge_lengths
        return 0.5 * (rl[:-1] + rl[1:])

    def arc_lengths(self) -> np.ndarray:
        """Cumulative deformed arc length at each vertex (starts at 0)."""
        out = np.zeros(self.n_vertices)
        out[1:] = np.cumsum(self.edge_lengths())
        return out

    def with_vertices(self, vertices, twist_angles=None) -> "Polyline":
        tw = self.twist_angles if twist_angles is None else twist_angles
        return Polyline(vertices, tw, self.rest_edge_lengths, self.rest_kappas)


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal (t, n, b) triple, b = t x n."""

    t: np.ndarray
    n: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        t = _as_readonly(self.t)
        n = _as_readonly(self.n)
        b = _as_readonly(self.b)
        for v in (t, n, b):
            if abs(np.linalg.norm(v) - 1.0) > 1e-8:
                raise ValueError("frame axes must be unit length")
        if abs(np.dot(t, n)) > 1e-8 or np.linalg.norm(np.cross(t, n) - b) > 1e-8:
            raise ValueError("frame must be orthonormal and right-handed (b = t x n)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "b", b)

    def matrix(self) -> np.ndarray:
        """Columns (t, n, b)."""
        return np.stack((self.t, self.n, self.b), axis=1)


@dataclass(frozen=True)
class CrossSectionPlane:
    """Plane through an edge midpoint, normal along the local tangent."""

    origin: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        o = _as_readonly(self.origin)
        nrm = np.asarray(self.normal, dtype=float)
        ln = np.linalg.norm(nrm)
        if not np.isfinite(ln) or ln < 1e-12:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "normal", _as_readonly(nrm / ln))


def normalized(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-300:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def canonical_perpendicular(t: np.ndarray) -> np.ndarray:
    """Deterministic unit vector perpendicular to t.

    Uses the smallest-index canonical axis not (nearly) parallel to t.
    """
    for k in range(3):
        axis = np.zeros(3)
        axis[k] = 1.0
        if abs(np.dot(axis, t)) < 1.0 - 1e-6:
            return normalized(axis - np.dot(axis, t) * t)
    raise ValueError("no canonical axis found (t not unit?)")


def curvature_binormal(e_prev, e_next, rest_prev: float, rest_next: float) -> np.ndarray:
    """Discrete turning vector at the vertex joining two edges.

    2 (e_prev x e_next) / (|rest_prev||rest_next| + e_prev . e_next);
    zero for collinear same-direction edges. Raises DegenerateTurnError
    when the edges are (numerically) anti-parallel.
    """
    e_prev = np.asarray(e_prev, dtype=float)
    e_next = np.asarray(e_next, dtype=float)
    denom = rest_prev * rest_next + np.dot(e_prev, e_next)
    if denom <= 1e-12 * rest_prev * rest_next:
        raise DegenerateTurnError("anti-parallel edges: curvature binormal undefined")
    return 2.0 * np.cross(e_prev, e_next) / denom


def curvature_binormals(points, rest_lengths=None) -> np.ndarray:
    """Turning vectors at every interior vertex of a sampled curve."""
    pts = np.asarray(points, dtype=float)
    e = np.diff(pts, axis=0)
    rl = np.linalg.norm(e, axis=1) if rest_lengths is None else np.asarray(rest_lengths)
    chi = rl[:-1] * rl[1:] + np.einsum("ij,ij->i", e[:-1], e[1:])
    if np.any(chi <= 1e-12 * rl[:-1] * rl[1:]):
        raise DegenerateTurnError("anti-parallel edge pair in curve")
    return 2.0 * np.cross(e[:-1], e[1:]) / chi[:, None]


def minimal_rotation(t0, t1) -> tuple[np.ndarray, bool]:
    """Minimal rotation matrix taking unit vector t0 to t1.

    Returns (R, degenerate). For t1 = -t0 the axis is ambiguous; a
    deterministic perpendicular (smallest-index canonical axis) is used
    for a half-turn and the result is flagged degenerate.
    """
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    c = float(np.dot(t0, t1))
    if c < -1.0 + 1e-12:
        axis = canonical_perpendicular(t0)
        return 2.0 * np.outer(axis, axis) - np.eye(3), True
    v = np.cross(t0, t1)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + (vx @ vx) / (1.0 + c), False


def propagate_frames(tangents, central_index: int, central_frame: Frame):
    """Frames at every tangent, each the minimal rotation of the central one.

    The central frame's tangent must match tangents[central_index].
    Returns (frames, degenerate) where degenerate marks tangents opposite
    to the central one.
    """
    tangents = np.asarray(tangents, dtype=float)
    t0 = central_frame.t
    if np.linalg.norm(tangents[central_index] - t0) > 1e-6:
        raise ValueError("central frame tangent does not match tangents[central_index]")
    frames = []
    flags = []
    for k in range(tangents.shape[0]):
        R, deg = minimal_rotation(t0, tangents[k])
        frames.append(Frame(tangents[k], R @ central_frame.n, R @ central_frame.b))
        flags.append(deg)
    return frames, np.array(flags, dtype=bool)


def principal_normal(polyline: Polyline, i: int):
    """Unit in-plane turning direction at interior vertex i, or None.

    None when the turning vector magnitude is below the scale-aware
    threshold (straight locally).
    """
    if i < 1 or i > polyline.n_vertices - 2:
        raise IndexError("principal normal is defined at interior vertices only")
    e = polyline.edges()
    rl = polyline.rest_edge_lengths
    kb = curvature_binormal(e[i - 1], e[i], rl[i - 1], rl[i])
    tol = 1e-8 / float(np.mean(rl))
    if np.linalg.norm(kb) <= tol:
        return None
    t = normalized(e[i - 1] / np.linalg.norm(e[i - 1]) + e[i] / np.linalg.norm(e[i]))
    return normalized(np.cross(kb, t))


def principal_normal_near(polyline: Polyline, i: int, tangent=None) -> np.ndarray:
    """Principal normal at i, else the nearest interior vertex with one.

    Falls back to a canonical perpendicular of the supplied tangent (or
    the local tangent) when the whole polyline is straight. If a tangent
    is supplied the result is re-orthogonalized against it.
    """
    n_int = polyline.n_vertices - 2
    order = sorted(range(1, n_int + 1), key=lambda j: (abs(j - i), j))
    found = None
    for j in order:
        found = principal_normal(polyline, j)
        if found is not None:
            break
    if tangent is None:
        e = polyline.edges()
        k = min(max(i - 1, 0), polyline.n_edges - 1)
        tangent = normalized(e[k])
    if found is None:
        return canonical_perpendicular(np.asarray(tangent, dtype=float))
    ortho = found - np.dot(found, tangent) * np.asarray(tangent, dtype=float)
    if np.linalg.norm(ortho) < 1e-9:
        return canonical_perpendicular(np.asarray(tangent, dtype=float))
    return normalized(ortho)


def intersect_curves_with_plane(curves, plane: CrossSectionPlane, frame: Frame, max_distance=None):
    """Local crossings of sampled curves with a cross-section plane.

    For each curve the crossing nearest to the plane origin is linearly
    interpolated between the bracketing samples and expressed in the
    plane's 2D frame (the n/b axes of `frame`). Curves with no crossing
    within max_distance of the origin are omitted.

    Returns (points (m, 2), curve_indices (m,)).
    """
    if np.linalg.norm(frame.t - plane.normal) > 1e-9:
        raise ValueError("frame tangent must equal the plane normal")
    pts2d = []
    kept = []
    for ci, curve in enumerate(curves):
        curve = np.asarray(curve, dtype=float)
        if curve.shape[0] < 2:
            continue
        seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
        guard = 1.5 * float(np.mean(seg)) if max_distance is None else float(max_distance)
        s = (curve - plane.origin) @ plane.normal
        cross = np.nonzero((s[:-1] <= 0.0) != (s[1:] <= 0.0))[0]
        best = None
        best_dist = guard
        for j in cross:
            tau = s[j] / (s[j] - s[j + 1])
            p = curve[j] + tau * (curve[j + 1] - curve[j])
            dist = np.linalg.norm(p - plane.origin)
            if dist <= best_dist:
                best_dist = dist
                best = p
        if best is None:
            continue
        rel = best - plane.origin
        pts2d.append((np.dot(rel, frame.n), np.dot(rel, frame.b)))
        kept.append(ci)
    if not pts2d:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    return np.array(pts2d), np.array(kept, dtype=int)


def edge_frames(polyline: Polyline, ref_normal=None):
    """Per-edge material frames: parallel transport plus accumulated twist.

    The first edge's normal is ref_normal (projected perpendicular to the
    tangent) or a canonical perpendicular; each subsequent edge's frame is
    the minimal rotation of the previous one, then rotated about its own
    tangent by the twist angle at the shared interior vertex.
    """
    tans = polyline.tangents()
    t0 = tans[0]
    if ref_normal is None:
        n = canonical_perpendicular(t0)
    else:
        ref_normal = np.asarray(ref_normal, dtype=float)
        n = ref_normal - np.dot(ref_normal, t0) * t0
        n = canonical_perpendicular(t0) if np.linalg.norm(n) < 1e-9 else normalized(n)
    b = np.cross(t0, n)
    frames = [Frame(t0, n, b)]
    tw = polyline.twist_angles
    for j in range(1, polyline.n_edges):
        R, _ = minimal_rotation(tans[j - 1], tans[j])
        n = R @ n
        b = R @ b
        theta = tw[j - 1]  # twist at the interior vertex shared with edge j-1
        if theta != 0.0:
            cs, sn = np.cos(theta), np.sin(theta)
            n, b = cs * n + sn * b, -sn * n + cs * b
        frames.append(Frame(tans[j], n, b))
    return frames


# --- polyline text format -------------------------------------------------

def format_polyline(polyline: Polyline, include_twist: bool = True) -> str:
    lines = [f"POLYLINE {polyline.n_vertices}"]
    for v in polyline.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    if include_twist and polyline.n_vertices > 2:
        lines.append("TWIST")
        lines.append(" ".join(f"{m:.17g}" for m in polyline.twist_angles))
    return "\n".join(lines) + "\n"


def parse_polyline(lines, start: int = 0) -> tuple[Polyline, int]:
    """Parse a polyline block from a list of lines.

    Returns (polyline, index of the first unconsumed line).
    """
    header = lines[start].split()
    if header[0] != "POLYLINE":
        raise ValueError(f"expected POLYLINE header, got {header[0]!r}")
    n = int(header[1])
    pos = start + 1
    verts = np.array([[float(x) for x in lines[pos + i].split()] for i in range(n)])
    pos += n
    twist = None
    if pos < len(lines) and lines[pos].strip() == "TWIST":
        twist = np.array([float(x) for x in lines[pos + 1].split()])
        pos += 2
    return Polyline(verts, twist), pos


def read_polyline(path) -> Polyline:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    pl, _ = parse_polyline(lines)
    return pl


def write_polyline(path, polyline: Polyline) -> None:
    with open(path, "w") as fh:
        fh.write(format_polyline(polyline))
