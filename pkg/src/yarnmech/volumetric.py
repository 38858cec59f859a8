"""Volumetric contact model and explicit time stepping.

Collision and friction are modeled as resistance to deformation of the
strand volume: each edge carries a deformation gradient whose QR factors
split into tangential stretch, shear along the strand and cross-section
deformation. Quadratic energies on the shear and cross-section parts
(evaluated on deviations from the rest factors, so a rest scene is
force-free) produce contact/friction forces through a background grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import accel
from .geometry import Frame, Polyline, canonical_perpendicular, edge_frames, normalized
from .rod import RodParams, RodState

# Reference single-fiber contact-energy constants (shear, cross-section).
FIBER_EXTERNAL_DEFAULTS = dict(gamma=9.60e5, mu=3.51e5, lambda_lame=1.01e6)

DEFAULT_DT = 2e-5
PSD_EIG_TOL = -1e-10


class StrainDegenerateError(ValueError):
    """Deformed material directions are singular."""


class StepDivergedError(RuntimeError):
    """The explicit step produced non-finite state."""


class SettleFailedError(RuntimeError):
    def __init__(self, residual):
        super().__init__(f"quasistatic settle did not converge; residual speed {residual:g}")
        self.residual = residual


class GridOverflowError(RuntimeError):
    """A particle left the valid interior of the background grid."""


# --- strain state types ----------------------------------------------------

@dataclass(frozen=True)
class EdgeElement:
    """Per-edge strain state: deformation gradient, rest directions, volume."""

    F: np.ndarray
    D: np.ndarray
    V0: float

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        D = np.asarray(self.D, dtype=float)
        if F.shape != (3, 3) or D.shape != (3, 3):
            raise ValueError("F and D must be 3x3")
        if abs(np.linalg.det(D)) < 1e-12:
            raise ValueError("rest material directions must be nonsingular")
        if self.V0 <= 0:
            raise ValueError("effective volume must be positive")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "D", D)


@dataclass(frozen=True)
class QRFactors:
    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class RParts:
    """Entries of the upper-triangular strain factor."""

    r11: float
    r12: float
    r13: float
    r22: float
    r23: float
    r33: float

    def reassemble(self) -> np.ndarray:
        """Product of the three elementary factors (cross-section, shear, stretch)."""
        r1 = np.diag([self.r11, 1.0, 1.0])
        r2 = np.array([[1.0, self.r12, self.r13], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        r3 = np.array([[1.0, 0.0, 0.0], [0.0, self.r22, self.r23], [0.0, 0.0, self.r33]])
        return r3 @ r2 @ r1

    def as_array(self) -> np.ndarray:
        return np.array([self.r11, self.r12, self.r13, self.r22, self.r23, self.r33])


@dataclass(frozen=True)
class FiberExternalParams:
    """Fiber-level contact energy constants."""

    gamma: float
    mu: float
    lambda_lame: float

    def __post_init__(self):
        if self.gamma < 0 or self.mu < 0 or self.lambda_lame < 0:
            raise ValueError("fiber contact constants must be non-negative")

    def as_ab(self) -> np.ndarray:
        """Equivalent six-coefficient quadratic form.

        gamma (r12^2 + r13^2) maps to a = (gamma, 0, gamma); the
        cross-section energy mu (s22^2 + s33^2) + lambda/2 (s22 + s33)^2
        expands to b = (mu + lambda/2, lambda, mu + lambda/2).
        """
        g, m, lam = self.gamma, self.mu, self.lambda_lame
        return np.array([g, 0.0, g, m + 0.5 * lam, lam, m + 0.5 * lam])


@dataclass(frozen=True)
class YarnExternalParams:
    """Yarn-level quadratic contact coefficients; A and B must be PSD."""

    a1: float
    a2: float
    a3: float
    b1: float
    b2: float
    b3: float

    def matrix_a(self) -> np.ndarray:
        return np.array([[self.a1, 0.5 * self.a2], [0.5 * self.a2, self.a3]])

    def matrix_b(self) -> np.ndarray:
        return np.array([[self.b1, 0.5 * self.b2], [0.5 * self.b2, self.b3]])

    def __post_init__(self):
        for m in (self.matrix_a(), self.matrix_b()):
            if np.linalg.eigvalsh(m).min() < PSD_EIG_TOL:
                raise ValueError("quadratic form coefficients must be PSD")

    def as_ab(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3, self.b1, self.b2, self.b3])


ZERO_EXTERNAL = YarnExternalParams(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def qr_decompose(F, D) -> QRFactors:
    """QR factors of F D with non-negative diagonal."""
    F = np.asarray(F, dtype=float)
    D = np.asarray(D, dtype=float)
    d = F @ D
    if abs(np.linalg.det(d)) < 1e-12 * max(np.abs(d).max() ** 3, 1e-300):
        raise StrainDegenerateError("singular deformed directions F D")
    q, r = accel.signed_qr(d[None])
    return QRFactors(q[0], r[0])


def split_R(R) -> RParts:
    """Entrywise split of an upper-triangular strain factor."""
    R = np.asarray(R, dtype=float)
    return RParts(R[0, 0], R[0, 1], R[0, 2], R[1, 1], R[1, 2], R[2, 2])


def psi_fiber(parts: RParts, p: FiberExternalParams) -> float:
    """Fiber-level contact energy density (zero at the rest factors)."""
    s22 = parts.r22 - 1.0
    s33 = parts.r33 - 1.0
    return (
        p.gamma * (parts.r12**2 + parts.r13**2)
        + p.mu * (s22**2 + s33**2)
        + 0.5 * p.lambda_lame * (s22 + s33) ** 2
    )


def psi_yarn(parts: RParts, p: YarnExternalParams) -> float:
    """Yarn-level contact energy density (zero at the rest factors)."""
    s22 = parts.r22 - 1.0
    s33 = parts.r33 - 1.0
    return (
        p.a1 * parts.r12**2
        + p.a2 * parts.r12 * parts.r13
        + p.a3 * parts.r13**2
        + p.b1 * s22**2
        + p.b2 * s22 * s33
        + p.b3 * s33**2
    )


def dpsi_dR_entries(rparts: np.ndarray, ab: np.ndarray) -> np.ndarray:
    """Upper-triangular energy gradient w.r.t. the strain factor entries.

    rparts is (m, 6) ordered (r11, r12, r13, r22, r23, r33); returns
    (m, 3, 3) with nonzeros at (0,1), (0,2), (1,1), (2,2).
    """
    a1, a2, a3, b1, b2, b3 = ab
    r12, r13 = rparts[:, 1], rparts[:, 2]
    s22, s33 = rparts[:, 3] - 1.0, rparts[:, 5] - 1.0
    out = np.zeros((rparts.shape[0], 3, 3))
    out[:, 0, 1] = 2.0 * a1 * r12 + a2 * r13
    out[:, 0, 2] = a2 * r12 + 2.0 * a3 * r13
    out[:, 1, 1] = 2.0 * b1 * s22 + b2 * s33
    out[:, 2, 2] = b2 * s22 + 2.0 * b3 * s33
    return out


# --- grid and colliders ----------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Background node lattice: origin corner, spacing and node counts."""

    origin: np.ndarray
    h: float
    dims: np.ndarray

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    def node_positions(self, flat_idx) -> np.ndarray:
        ny, nz = int(self.dims[1]), int(self.dims[2])
        k = flat_idx % nz
        j = (flat_idx // nz) % ny
        i = flat_idx // (ny * nz)
        return self.origin + self.h * np.stack((i, j, k), axis=-1).astype(float)

    def check_inside(self, points) -> None:
        base = np.floor((points - self.origin) / self.h - 0.5)
        if base.min() < 0 or np.any(base > self.dims - 3):
            raise GridOverflowError("points outside the valid grid interior")

    @staticmethod
    def build(points, h, margin_cells: int = 4, extra_points=None) -> "Grid":
        """Grid covering the points (plus extras) with a safety margin.

        The origin is snapped onto the spacing lattice so that identical
        inputs always produce identical node placements.
        """
        pts = np.asarray(points, dtype=float)
        if extra_points is not None and len(extra_points):
            pts = np.vstack([pts, np.asarray(extra_points, dtype=float)])
        lo = np.floor(pts.min(axis=0) / h).astype(int) - margin_cells
        hi = np.ceil(pts.max(axis=0) / h).astype(int) + margin_cells
        return Grid(lo * h, h, hi - lo + 1)


@dataclass
class Collider:
    """Rigid cylinder moving along a straight line then holding still."""

    point: np.ndarray
    axis: np.ndarray
    radius: float
    speed: float
    travel: float
    motion: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.axis = normalized(np.asarray(self.axis, dtype=float))
        self.motion = normalized(np.asarray(self.motion, dtype=float))
        if self.radius <= 0 or self.speed < 0 or self.travel < 0:
            raise ValueError("collider radius must be positive, speed/travel non-negative")

    def center_at(self, disp: float) -> np.ndarray:
        return self.point + self.motion * min(disp, self.travel)

    def swept_bounds_points(self) -> np.ndarray:
        ends = np.array([self.center_at(0.0), self.center_at(self.travel)])
        pad = 2.0 * self.radius + self.travel
        return np.vstack([ends - pad, ends + pad])


@dataclass(frozen=True)
class Scene:
    """A set of rods sharing one material and one contact model."""

    rods: list
    rod_params: RodParams
    external: object = ZERO_EXTERNAL
    colliders: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = DEFAULT_DT
    radius: float = 0.05
    density: float = 1.0
    grid_h: float = None
    fixed: list = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        gh = self.grid_h if self.grid_h is not None else 3.0 * self.radius
        object.__setattr__(self, "grid_h", float(gh))
        if self.fixed is None:
            object.__setattr__(
                self, "fixed", [np.zeros(r.polyline.n_vertices, dtype=bool) for r in self.rods]
            )

    def external_ab(self) -> np.ndarray:
        return self.external.as_ab()


# --- flat simulation buffers ------------------------------------------------

class SimBuffers:
    """Mutable array-of-struct state for stepping a Scene.

    One instance is owned by a single stepping loop; Scene objects stay
    immutable at the module boundary.
    """

    def __init__(self, scene: Scene, grid: Grid = None):
        rods = scene.rods
        counts = [r.polyline.n_vertices for r in rods]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        self.rod_slices = [(int(offsets[i]), int(offsets[i + 1])) for i in range(len(rods))]
        self.pos = np.vstack([r.polyline.vertices for r in rods])
        self.vel = np.vstack([r.velocities for r in rods])
        self.n_verts = self.pos.shape[0]

        edges = []
        triples = []
        rest = []
        for (s, _), r in zip(self.rod_slices, rods):
            n = r.polyline.n_vertices
            idx = np.arange(n - 1)
            edges.append(np.stack((idx, idx + 1), axis=1) + s)
            rest.append(r.polyline.rest_edge_lengths)
            if n >= 3:
                j = np.arange(1, n - 1)
                triples.append(np.stack((j - 1, j, j + 1), axis=1) + s)
        self.edges = np.vstack(edges).astype(np.int64)
        self.rest_len = np.concatenate(rest)
        self.triples = (
            np.vstack(triples).astype(np.int64) if triples else np.zeros((0, 3), dtype=np.int64)
        )
        self.rest_prev = np.concatenate(
            [r.polyline.rest_edge_lengths[:-1] for r in rods if r.polyline.n_vertices >= 3]
        ) if triples else np.zeros(0)
        self.rest_next = np.concatenate(
            [r.polyline.rest_edge_lengths[1:] for r in rods if r.polyline.n_vertices >= 3]
        ) if triples else np.zeros(0)
        self.lbar = np.concatenate(
            [r.polyline.effective_rest_lengths() for r in rods if r.polyline.n_vertices >= 3]
        ) if triples else np.zeros(0)
        self.rest_kappa = np.vstack(
            [r.polyline.rest_kappas for r in rods if r.polyline.n_vertices >= 3]
        ) if triples else np.zeros((0, 3))
        self.twist = np.concatenate([r.polyline.twist_angles for r in rods])
        self.twist_rate = np.concatenate([r.twist_rates for r in rods])

        # per-edge strain state; the initial shape is the rest shape
        tang = self.pos[self.edges[:, 1]] - self.pos[self.edges[:, 0]]
        tang = tang / np.linalg.norm(tang, axis=1)[:, None]
        self.D = np.empty((self.edges.shape[0], 3, 3))
        for e in range(self.edges.shape[0]):
            d1 = tang[e]
            d2 = canonical_perpendicular(d1)
            self.D[e] = np.stack((d1, d2, np.cross(d1, d2)), axis=1)
        self.F = np.broadcast_to(np.eye(3), self.D.shape).copy()
        area = np.pi * scene.radius**2
        self.V0 = area * self.rest_len

        vert_v0 = np.zeros(self.n_verts)
        np.add.at(vert_v0, self.edges[:, 0], 0.5 * self.V0)
        np.add.at(vert_v0, self.edges[:, 1], 0.5 * self.V0)
        self.vert_v0 = vert_v0
        self.mass = scene.density * vert_v0
        self.inertia = (
            np.maximum(self.mass[self.triples[:, 1]], 1e-300) * scene.radius**2
            if len(self.triples)
            else np.zeros(0)
        )

        self.fixed = np.concatenate(scene.fixed)
        self.prescribed_vel = np.zeros((self.n_verts, 3))
        self.params = scene.rod_params
        self.ab = scene.external_ab()
        self.gravity = scene.gravity
        self.dt = scene.dt
        self.colliders = [replace_collider(c) for c in scene.colliders]
        self.collider_disp = np.zeros(len(self.colliders))
        self.collider_speed = np.zeros(len(self.colliders))
        self.time = 0.0
        self.scene = scene

        if grid is None:
            extra = []
            for c in self.colliders:
                extra.append(c.swept_bounds_points())
            extra = np.vstack(extra) if extra else None
            grid = Grid.build(self.pos, scene.grid_h, extra_points=extra)
        self.grid = grid
        # frame continuity reference for recording
        self.ref_normals = []
        for (s, _), r in zip(self.rod_slices, rods):
            t0 = normalized(self.pos[s + 1] - self.pos[s])
            self.ref_normals.append(canonical_perpendicular(t0))

    # -- forces --------------------------------------------------------------

    def rod_forces(self):
        f = accel.stretch_forces(self.pos, self.edges, self.rest_len, self.params.k, self.n_verts)
        if len(self.triples):
            f = f + accel.bend_forces(
                self.pos, self.triples, self.rest_prev, self.rest_next, self.lbar,
                self.rest_kappa, self.params.alpha, self.n_verts,
            )
            torques = -self.params.beta * self.twist / self.lbar
        else:
            torques = np.zeros(0)
        return f, torques

    def external_vertex_forces(self):
        if not np.any(self.ab):
            return np.zeros((self.n_verts, 3))
        return external_forces_arrays(
            self.pos, self.mass, self.edges, self.rest_len,
            self.F, self.D, self.V0, self.ab, self.grid,
        )

    # -- stepping ------------------------------------------------------------

    def step(self, damping: float = 1.0):
        g = self.grid
        f_rod, torques = self.rod_forces()
        f = f_rod + self.external_vertex_forces()
        f = f + self.mass[:, None] * self.gravity
        inv_m = 1.0 / self.mass
        self.vel = damping * (self.vel + self.dt * f * inv_m[:, None])
        if len(self.twist_rate):
            self.twist_rate = damping * (self.twist_rate + self.dt * torques / self.inertia)
        self.vel[self.fixed] = self.prescribed_vel[self.fixed]

        # grid velocity pass: collider projection plus the velocity-field
        # smoothing that carries strand-strand contact. Skipped entirely
        # when neither contact energy nor colliders are present, leaving
        # pure rod dynamics.
        gradv = None
        if self.colliders or np.any(self.ab):
            g.check_inside(self.pos)
            node_mass, node_mom = accel.p2g(
                self.pos, self.mass, self.mass[:, None] * self.vel, g.origin, g.h, g.dims
            )
            active = node_mass > 0.0
            node_v = np.zeros_like(node_mom)
            node_v[active] = node_mom[active] / node_mass[active, None]
            if self.colliders:
                node_v = self._project_colliders(node_v, active)
                self.collider_disp += self.collider_speed * self.dt
            self.vel = accel.gather_vec(self.pos, node_v, g.origin, g.h, g.dims)
            self.vel[self.fixed] = self.prescribed_vel[self.fixed]
            gv = accel.gather_gradv(self.pos, node_v, g.origin, g.h, g.dims)
            gradv = 0.5 * (gv[self.edges[:, 0]] + gv[self.edges[:, 1]])

        self.pos = self.pos + self.dt * self.vel
        if len(self.twist):
            self.twist = self.twist + self.dt * self.twist_rate

        d = self.F @ self.D
        enew = self.pos[self.edges[:, 1]] - self.pos[self.edges[:, 0]]
        d[:, :, 0] = enew / self.rest_len[:, None]
        if gradv is not None:
            upd = np.eye(3) + self.dt * gradv
            d[:, :, 1:] = upd @ d[:, :, 1:]
        self.F = d @ self.D.transpose(0, 2, 1)

        self.time += self.dt
        if not (np.isfinite(self.pos).all() and np.isfinite(self.vel).all()):
            raise StepDivergedError("non-finite positions or velocities")

    def _project_colliders(self, node_v, active):
        g = self.grid
        idx = np.nonzero(active)[0]
        npos = g.node_positions(idx)
        out = node_v.copy()
        for c, disp, speed in zip(self.colliders, self.collider_disp, self.collider_speed):
            center = c.center_at(disp)
            vcol = c.motion * (speed if disp < c.travel else 0.0)
            rel = npos - center
            rad = rel - np.outer(rel @ c.axis, c.axis)
            dist = np.linalg.norm(rad, axis=1)
            inside = dist < c.radius
            if not inside.any():
                continue
            nrm = rad[inside] / np.maximum(dist[inside], 1e-12)[:, None]
            sel = idx[inside]
            vrel = out[sel] - vcol
            vn = np.einsum("ij,ij->i", vrel, nrm)
            pushing = vn < 0.0
            sub = sel[pushing]
            out[sub] = vcol + vrel[pushing] - vn[pushing, None] * nrm[pushing]
        return out

    def max_free_speed(self) -> float:
        free = ~self.fixed
        if not free.any():
            return 0.0
        return float(np.linalg.norm(self.vel[free], axis=1).max())

    # -- state export ---------------------------------------------------------

    def rod_states(self):
        out = []
        e_off = 0
        t_off = 0
        for (s, t), r in zip(self.rod_slices, self.scene.rods):
            n = t - s
            pl = Polyline(
                self.pos[s:t].copy(),
                self.twist[t_off : t_off + n - 2].copy(),
                r.polyline.rest_edge_lengths,
                r.polyline.rest_kappas,
            )
            out.append(
                RodState(pl, self.vel[s:t].copy(), self.twist_rate[t_off : t_off + n - 2].copy())
            )
            e_off += n - 1
            t_off += n - 2
        return out

    def rod_edge_F(self):
        out = []
        e_off = 0
        for (s, t), _ in zip(self.rod_slices, self.scene.rods):
            n = t - s
            out.append(self.F[e_off : e_off + n - 1].copy())
            e_off += n - 1
        return out


def replace_collider(c: Collider) -> Collider:
    return Collider(c.point.copy(), c.axis.copy(), c.radius, c.speed, c.travel, c.motion.copy())


# --- external force field (array level) -------------------------------------

def external_forces_arrays(pos, mass, edges, rest_len, F, D, V0, ab, grid: Grid):
    """Per-vertex forces of the volumetric contact energy.

    Negative gradient of sum_e V0 psi(F_e) under the grid-lifted motion:
    the tangential column of the deformed directions follows the edge
    endpoints directly; the two cross-section columns follow the grid
    velocity field sampled at edge midpoints.
    """
    ab = np.asarray(ab, dtype=float)
    # the tangential column of the deformed directions is defined by the
    # edge endpoints; evaluate the gradient at that synchronized state
    d_sync = F @ D
    e = pos[edges[:, 1]] - pos[edges[:, 0]]
    d_sync[:, :, 0] = e / rest_len[:, None]
    F_sync = d_sync @ np.transpose(D, (0, 2, 1))
    dpsi_dd, d, _, _ = accel.edge_strain_response(F_sync, D, ab)
    f = np.zeros((pos.shape[0], 3))
    coef1 = (V0 / rest_len)[:, None] * dpsi_dd[:, :, 0]
    np.add.at(f, edges[:, 0], coef1)
    np.add.at(f, edges[:, 1], -coef1)

    # each edge's cross-section response is carried half/half by its
    # endpoints; co-locating the scatter with the mass-carrying vertices
    # keeps the force transfer exactly momentum-free
    grid.check_inside(pos)
    pa, pb = pos[edges[:, 0]], pos[edges[:, 1]]
    pts = np.vstack((pa, pb, pa, pb))
    c2 = -0.5 * V0[:, None] * dpsi_dd[:, :, 1]
    c3 = -0.5 * V0[:, None] * dpsi_dd[:, :, 2]
    coefs = np.vstack((c2, c2, c3, c3))
    dirs = np.vstack((d[:, :, 1], d[:, :, 1], d[:, :, 2], d[:, :, 2]))
    node_f = accel.scatter_grad_force(pts, coefs, dirs, grid.origin, grid.h, grid.dims)
    node_mass, _ = accel.p2g(pos, mass, np.zeros_like(pos), grid.origin, grid.h, grid.dims)
    acc = np.zeros_like(node_f)
    active = node_mass > 0.0
    acc[active] = node_f[active] / node_mass[active, None]
    f += mass[:, None] * accel.gather_vec(pos, acc, grid.origin, grid.h, grid.dims)
    return f


def lifted_external_energy(pos, mass, edges, rest_len, F, D, V0, ab, grid: Grid, delta):
    """Total contact energy after a virtual vertex displacement.

    The displacement field is lifted through the grid with the kernel
    weights frozen at the undisplaced positions; this is the map whose
    negative gradient external_forces_arrays computes, and the basis of
    the finite-difference validation of those forces.
    """
    ab = np.asarray(ab, dtype=float)
    node_mass, node_mom = accel.p2g(
        pos, mass, mass[:, None] * np.asarray(delta, dtype=float), grid.origin, grid.h, grid.dims
    )
    node_disp = np.zeros_like(node_mom)
    active = node_mass > 0.0
    node_disp[active] = node_mom[active] / node_mass[active, None]
    gv = accel.gather_gradv(pos, node_disp, grid.origin, grid.h, grid.dims)
    gradu = 0.5 * (gv[edges[:, 0]] + gv[edges[:, 1]])

    pos2 = pos + delta
    d = F @ D
    enew = pos2[edges[:, 1]] - pos2[edges[:, 0]]
    d2 = d.copy()
    d2[:, :, 0] = enew / rest_len[:, None]
    d2[:, :, 1:] = d[:, :, 1:] + gradu @ d[:, :, 1:]
    F2 = d2 @ np.transpose(D, (0, 2, 1))
    _, _, psi, _ = accel.edge_strain_response(F2, D, ab)
    return float(np.sum(V0 * psi))


# --- public operation wrappers -----------------------------------------------

def build_grid_for_scene(scene: Scene) -> Grid:
    pts = np.vstack([r.polyline.vertices for r in scene.rods])
    extra = [c.swept_bounds_points() for c in scene.colliders]
    extra = np.vstack(extra) if extra else None
    return Grid.build(pts, scene.grid_h, extra_points=extra)


def external_forces(scene: Scene, grid: Grid = None) -> np.ndarray:
    """Per-vertex contact forces for a freshly constructed scene."""
    buf = SimBuffers(scene, grid)
    return buf.external_vertex_forces()


def step_explicit(scene: Scene, grid: Grid = None) -> Scene:
    """One symplectic Euler step; returns the advanced scene."""
    buf = SimBuffers(scene, grid)
    buf.step()
    return replace(scene, rods=buf.rod_states())


@dataclass(frozen=True)
class SettledState:
    """One recorded equilibrium: per-rod polyline, strain and frames."""

    time: float
    collider_disp: np.ndarray
    rods: list
    edge_F: list
    frames: list


def run_quasistatic(
    scene: Scene,
    schedule=None,
    settle_tol: float = None,
    max_settle_steps: int = 200000,
    damping: float = 0.95,
    drift_window: int = 400,
) -> list:
    """Drive colliders through a displacement schedule, settling after each.

    schedule lists cumulative collider displacement fractions in (0, 1];
    after each increment the scene is stepped with velocity damping until
    either the fastest free vertex or the windowed displacement rate
    (which ignores bounded contact oscillation) drops below settle_tol.
    Returns the list of SettledState records (initial settled state first).
    """
    if settle_tol is None:
        settle_tol = 2e-2 * scene.radius
    buf = SimBuffers(scene)
    records = []

    def settle():
        buf.collider_speed[:] = 0.0
        snapshot = buf.pos.copy()
        best = np.inf
        for it in range(max_settle_steps):
            buf.step(damping=damping)
            speed = buf.max_free_speed()
            best = min(best, speed)
            if speed < settle_tol:
                return
            if (it + 1) % drift_window == 0:
                rate = np.linalg.norm(buf.pos - snapshot, axis=1).max() / (
                    drift_window * buf.dt
                )
                best = min(best, rate)
                if rate < settle_tol:
                    return
                snapshot = buf.pos.copy()
        raise SettleFailedError(best)

    def record():
        rods = buf.rod_states()
        frames = [
            edge_frames(r.polyline, ref_normal=buf.ref_normals[i]) for i, r in enumerate(rods)
        ]
        records.append(
            SettledState(buf.time, buf.collider_disp.copy(), rods, buf.rod_edge_F(), frames)
        )

    settle()
    record()
    if schedule is None:
        schedule = []
    for frac in schedule:
        if buf.colliders:
            targets = np.array([c.travel * frac for c in buf.colliders])
            while np.any(buf.collider_disp < targets - 1e-15):
                speeds = np.array(
                    [c.speed if buf.collider_disp[i] < targets[i] else 0.0
                     for i, c in enumerate(buf.colliders)]
                )
                if not speeds.any():
                    break
                buf.collider_speed[:] = speeds
                buf.step(damping=damping)
        settle()
        record()
    return records
