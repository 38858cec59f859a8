"""Yarn-level material parameter fitting.

Internal rod coefficients are matched against fiber-level probe forces by
binary search. Contact coefficients come from an inverse pipeline: at a
settled state the contact forces must balance the rod forces; transferring
that balance to a background grid yields a linear system for the per-vertex
energy gradients, whose upper-triangular strain-factor form is finally fit
by a PSD-constrained least squares over the six quadratic coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import accel
from ._kernels_numpy import _flat_index, _weights
from .geometry import Polyline, RankError, normalized
from .rod import RodParams, RodState, internal_forces
from .volumetric import (
    Grid,
    Scene,
    SimBuffers,
    StrainDegenerateError,
    YarnExternalParams,
    dpsi_dR_entries,
    qr_decompose,
    split_R,
)


class BracketError(RuntimeError):
    """Binary-search bracket cannot straddle the target response."""


class NonEquilibriumError(ValueError):
    """A state offered as an equilibrium is still moving."""


class IllPosedError(RuntimeError):
    def __init__(self, nullspace_dim: int, cond: float):
        super().__init__(
            f"grid force system is rank deficient (nullspace {nullspace_dim}, cond {cond:.3g})"
        )
        self.nullspace_dim = nullspace_dim
        self.cond = cond


@dataclass(frozen=True)
class InternalFitConfig:
    """Probe magnitudes and search controls for the internal-coefficient fits."""

    deltas: tuple = (0.005, 0.01, 0.02)  # stretch pulls, fraction of rest length
    bend_deltas: tuple = (0.05, 0.1)  # perpendicular end displacement, same units
    twist_angles: tuple = (0.5, 1.0)  # radians
    bracket: tuple = (1e-6, 1e6)
    rel_tol: float = 1e-4

    def __post_init__(self):
        for vals, name in (
            (self.deltas, "deltas"),
            (self.bend_deltas, "bend_deltas"),
            (self.twist_angles, "twist_angles"),
        ):
            if len(vals) == 0 or any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be non-empty and strictly positive")
        if not self.bracket[0] < self.bracket[1]:
            raise ValueError("bracket must satisfy lo < hi")


@dataclass(frozen=True)
class GradientEstimate:
    """Affine fit of a deformed point cloud: x ~ F x_rest + t."""

    F: np.ndarray
    t: np.ndarray
    residual: float


def binary_search_monotone(fn, target, lo, hi, rel_tol, max_expand: int = 80):
    """Parameter at which the increasing response fn matches target."""
    flo = fn(lo)
    fhi = fn(hi)
    expansions = 0
    while flo > target:
        lo *= 0.25
        flo = fn(lo)
        expansions += 1
        if expansions > max_expand:
            raise BracketError(f"response at lo={lo:g} still above target {target:g}")
    while fhi < target:
        hi *= 4.0
        fhi = fn(hi)
        expansions += 1
        if expansions > max_expand:
            raise BracketError(f"response at hi={hi:g} still below target {target:g}")
    while (hi - lo) > rel_tol * max(abs(hi), abs(lo), 1e-300):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_stretch_k(fiber_ref, yarn_probe, cfg: InternalFitConfig) -> float:
    """Stretch coefficient matching fiber-level pull forces.

    fiber_ref(delta) returns the measured fiber-bundle pull force;
    yarn_probe(k, delta) the yarn-level response. One search per probe
    magnitude, averaged.
    """
    ks = []
    for dx in cfg.deltas:
        target = fiber_ref(dx)
        ks.append(
            binary_search_monotone(
                lambda k: yarn_probe(k, dx), target, cfg.bracket[0], cfg.bracket[1], cfg.rel_tol
            )
        )
    return float(np.mean(ks))


def fit_bend_alpha(fiber_ref, yarn_probe, cfg: InternalFitConfig) -> float:
    vals = []
    for dx in cfg.bend_deltas:
        target = fiber_ref(dx)
        vals.append(
            binary_search_monotone(
                lambda a: yarn_probe(a, dx), target, cfg.bracket[0], cfg.bracket[1], cfg.rel_tol
            )
        )
    return float(np.mean(vals))


def fit_twist_beta(fiber_ref, yarn_probe, cfg: InternalFitConfig) -> float:
    vals = []
    for theta in cfg.twist_angles:
        target = fiber_ref(theta)
        vals.append(
            binary_search_monotone(
                lambda b: yarn_probe(b, theta), target, cfg.bracket[0], cfg.bracket[1], cfg.rel_tol
            )
        )
    return float(np.mean(vals))


# --- probe harness -----------------------------------------------------------

@dataclass
class ProbeOptions:
    speed: float = 2.0
    settle_tol: float = None  # defaults to 2e-3 x scene radius
    max_settle_steps: int = 120000
    damping: float = 0.95


def run_driven_probe(scene: Scene, driven: np.ndarray, target_fn, opts: ProbeOptions):
    """Settle a scene while moving a driven vertex set along a path.

    target_fn(progress in [0, 1], rest_positions) returns the driven
    vertices' positions; the path is traversed at opts.speed (path length
    measured at progress scale 1), then held while the free vertices
    settle. Returns the settled SimBuffers.
    """
    buf = SimBuffers(scene)
    buf.fixed = buf.fixed | driven
    rest = buf.pos[driven].copy()
    end = target_fn(1.0, rest)
    path_len = float(np.linalg.norm(end - rest, axis=1).max())
    settle_tol = opts.settle_tol if opts.settle_tol is not None else 2e-3 * scene.radius
    if path_len > 0.0:
        n_steps = max(int(np.ceil(path_len / (opts.speed * buf.dt))), 1)
        for i in range(n_steps):
            goal = target_fn((i + 1) / n_steps, rest)
            buf.prescribed_vel[driven] = (goal - buf.pos[driven]) / buf.dt
            buf.step(damping=opts.damping)
    buf.prescribed_vel[driven] = 0.0
    snapshot = buf.pos.copy()
    window = 400
    for it in range(opts.max_settle_steps):
        buf.step(damping=opts.damping)
        if buf.max_free_speed() < settle_tol:
            break
        if (it + 1) % window == 0:
            rate = np.linalg.norm(buf.pos - snapshot, axis=1).max() / (window * buf.dt)
            if rate < settle_tol:
                break
            snapshot = buf.pos.copy()
    else:
        from .volumetric import SettleFailedError

        raise SettleFailedError(buf.max_free_speed())
    return buf


def constraint_force(buf: SimBuffers, mask: np.ndarray, direction) -> float:
    """Force the holder of the masked vertices must resist, along direction."""
    f_rod, _ = buf.rod_forces()
    f = f_rod + buf.external_vertex_forces() + buf.mass[:, None] * buf.gravity
    return float(-(f[mask] @ np.asarray(direction, dtype=float)).sum())


def constraint_torque(buf: SimBuffers, mask: np.ndarray, axis_point, axis_dir) -> float:
    f_rod, _ = buf.rod_forces()
    f = f_rod + buf.external_vertex_forces() + buf.mass[:, None] * buf.gravity
    r = buf.pos[mask] - np.asarray(axis_point, dtype=float)
    tau = np.cross(r, f[mask]) @ np.asarray(axis_dir, dtype=float)
    return float(-tau.sum())


def _end_masks(scene: Scene):
    """Boolean masks over the flat vertex array for the two end cross-sections."""
    counts = [r.polyline.n_vertices for r in scene.rods]
    total = sum(counts)
    first = np.zeros(total, dtype=bool)
    last = np.zeros(total, dtype=bool)
    off = 0
    for n in counts:
        first[off] = True
        last[off + n - 1] = True
        off += n
    return first, last


def stretch_probe_force(scene: Scene, delta: float, opts: ProbeOptions = None) -> float:
    """Pull the far end cross-section by delta along +x; report the tension."""
    opts = opts or ProbeOptions()
    first, last = _end_masks(scene)
    scene = _with_fixed(scene, first | last)
    shift = np.array([delta, 0.0, 0.0])
    buf = run_driven_probe(scene, last, lambda s, rest: rest + s * shift, opts)
    return constraint_force(buf, last, [-1.0, 0.0, 0.0])


def bend_probe_force(scene: Scene, delta: float, opts: ProbeOptions = None) -> float:
    """Fix one end and the middle, push the far end by delta along +z."""
    opts = opts or ProbeOptions()
    first, last = _end_masks(scene)
    mid = np.zeros_like(first)
    counts = [r.polyline.n_vertices for r in scene.rods]
    off = 0
    for n in counts:
        mid[off + n // 2] = True
        off += n
    scene = _with_fixed(scene, first | mid | last)
    shift = np.array([0.0, 0.0, delta])
    buf = run_driven_probe(scene, last, lambda s, rest: rest + s * shift, opts)
    return constraint_force(buf, last, [0.0, 0.0, -1.0])


def twist_probe_torque(scene: Scene, theta: float, opts: ProbeOptions = None) -> float:
    """Rotate the far end cross-section by theta about the x axis; report torque."""
    opts = opts or ProbeOptions()
    first, last = _end_masks(scene)
    scene = _with_fixed(scene, first | last)

    def target(s, rest):
        ang = s * theta
        c, sn = np.cos(ang), np.sin(ang)
        out = rest.copy()
        out[:, 1] = c * rest[:, 1] - sn * rest[:, 2]
        out[:, 2] = sn * rest[:, 1] + c * rest[:, 2]
        return out

    buf = run_driven_probe(scene, last, target, opts)
    return constraint_torque(buf, last, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])


def yarn_twist_torque(params: RodParams, polyline: Polyline, theta: float) -> float:
    """Holding torque of a straight yarn twisted by theta at the far end.

    With per-interior-vertex twist angles the constrained minimum of the
    twist energy distributes the total angle proportionally to the
    effective rest lengths, giving a uniform torque beta * theta / L.
    """
    return params.beta * theta / float(np.sum(polyline.effective_rest_lengths()))


def _with_fixed(scene: Scene, mask: np.ndarray) -> Scene:
    from dataclasses import replace

    parts = []
    off = 0
    for r in scene.rods:
        n = r.polyline.n_vertices
        parts.append(mask[off : off + n])
        off += n
    return replace(scene, fixed=parts)


# --- deformation gradient estimation -------------------------------------------

def estimate_segment_F(rest_points, deformed_points) -> GradientEstimate:
    """Least-squares affine map from rest to deformed point clouds."""
    X = np.asarray(rest_points, dtype=float)
    Y = np.asarray(deformed_points, dtype=float)
    if X.shape != Y.shape or X.shape[0] < 4 or X.shape[1] != 3:
        raise ValueError("need matching rest/deformed clouds of at least 4 points")
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    A = Xc.T @ Xc
    evals = np.linalg.eigvalsh(A)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise RankError("rest points are (nearly) coplanar; affine fit is rank deficient")
    F = np.linalg.solve(A, Xc.T @ Yc).T
    t = ym - F @ xm
    res = float(np.sum((X @ F.T + t - Y) ** 2))
    return GradientEstimate(F, t, res)


def estimate_external_forces(
    state: RodState,
    params: RodParams,
    gravity=None,
    masses=None,
    speed_tol: float = None,
) -> np.ndarray:
    """Contact forces implied by force balance at a settled state.

    At equilibrium the contact force on each vertex is the negative of the
    rod force (minus any gravity load).
    """
    if speed_tol is not None:
        top = float(np.linalg.norm(state.velocities, axis=1).max())
        if top > speed_tol:
            raise NonEquilibriumError(f"state moves at {top:g} > {speed_tol:g}")
    f_int, _ = internal_forces(state, params)
    f = -f_int
    if gravity is not None:
        if masses is None:
            raise ValueError("gravity correction needs vertex masses")
        f = f - np.asarray(masses, dtype=float)[:, None] * np.asarray(gravity, dtype=float)
    return f


# --- grid inverse problem --------------------------------------------------------

@dataclass(frozen=True)
class VertexElement:
    """Per-vertex strain element of the inverse problem."""

    position: np.ndarray
    F: np.ndarray
    D: np.ndarray
    V0: float


@dataclass
class ExternalFitProblem:
    """Assembled least-squares system relating grid forces to strain gradients."""

    matrix: np.ndarray  # (rows, 2n) coefficients, shared by all 3 components
    targets: np.ndarray  # (rows, 3)
    elements: list
    grid: Grid
    row_nodes: np.ndarray


@dataclass
class DpsiSolution:
    dpsi_dF2: np.ndarray  # (n, 3)
    dpsi_dF3: np.ndarray  # (n, 3)
    cond: float
    rank: int


def vertex_elements_from_edges(positions, edge_F, edge_D, edge_V0) -> list:
    """Aggregate per-edge strain states onto vertices (mean of incident edges)."""
    n = positions.shape[0]
    out = []
    for v in range(n):
        inc = [e for e in (v - 1, v) if 0 <= e < n - 1]
        F = np.mean([edge_F[e] for e in inc], axis=0)
        D = np.mean([edge_D[e] for e in inc], axis=0)
        V0 = sum(0.5 * edge_V0[e] for e in inc)
        out.append(VertexElement(np.asarray(positions[v], dtype=float), F, D, V0))
    return out


def transfer_forces_to_grid(positions, forces, grid: Grid) -> np.ndarray:
    """Plain kernel-weighted transfer of vertex forces to grid nodes."""
    ones = np.ones(positions.shape[0])
    _, node_f = accel.p2g(
        np.asarray(positions, dtype=float), ones, np.asarray(forces, dtype=float),
        grid.origin, grid.h, grid.dims,
    )
    return node_f


def grid_forces_from_elements(elements, dpsi_dF2, dpsi_dF3, grid: Grid) -> np.ndarray:
    """Model grid forces generated by per-vertex strain gradients."""
    pos = np.array([e.position for e in elements])
    d = np.array([e.F @ e.D for e in elements])
    V0 = np.array([e.V0 for e in elements])
    pts = np.vstack((pos, pos))
    coefs = np.vstack((-V0[:, None] * dpsi_dF2, -V0[:, None] * dpsi_dF3))
    dirs = np.vstack((d[:, :, 1], d[:, :, 2]))
    return accel.scatter_grad_force(pts, coefs, dirs, grid.origin, grid.h, grid.dims)


def assemble_external_fit(
    elements, vertex_forces, grid: Grid, exclude_mask=None
) -> ExternalFitProblem:
    """Build the least-squares system tying grid force targets to unknowns.

    exclude_mask marks vertices whose force estimate is untrusted (e.g.
    clamped ends); every grid node they touch is dropped from the rows, so
    the remaining equations involve trusted vertices only.
    """
    pos = np.array([e.position for e in elements])
    n = pos.shape[0]
    grid.check_inside(pos)
    base, w, dw = _weights(pos, grid.origin, grid.h)
    n_nodes = grid.n_nodes
    dims = grid.dims
    d = np.array([e.F @ e.D for e in elements])
    V0 = np.array([e.V0 for e in elements])
    exclude = np.zeros(n, dtype=bool) if exclude_mask is None else np.asarray(exclude_mask)

    touched_good = np.zeros(n_nodes, dtype=bool)
    touched_bad = np.zeros(n_nodes, dtype=bool)
    cols = np.zeros((n_nodes, 2 * n))
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                idx = _flat_index(base, dims, di, dj, dk)
                wx, wy, wz = w[:, 0, di], w[:, 1, dj], w[:, 2, dk]
                ww = wx * wy * wz
                gw = np.stack(
                    (dw[:, 0, di] * wy * wz, wx * dw[:, 1, dj] * wz, wx * wy * dw[:, 2, dk]),
                    axis=1,
                )
                touched_good[idx[(ww > 0) & ~exclude]] = True
                touched_bad[idx[(ww > 0) & exclude]] = True
                s2 = -V0 * np.einsum("ij,ij->i", d[:, :, 1], gw)
                s3 = -V0 * np.einsum("ij,ij->i", d[:, :, 2], gw)
                keep = ~exclude
                vi = np.nonzero(keep)[0]
                np.add.at(cols, (idx[keep], 2 * vi), s2[keep])
                np.add.at(cols, (idx[keep], 2 * vi + 1), s3[keep])
    rows = touched_good & ~touched_bad
    targets = transfer_forces_to_grid(
        pos[~exclude], np.asarray(vertex_forces, dtype=float)[~exclude], grid
    )
    return ExternalFitProblem(
        matrix=cols[rows],
        targets=targets[rows],
        elements=list(elements),
        grid=grid,
        row_nodes=np.nonzero(rows)[0],
    )


def solve_dpsi_dF(
    vertex_forces, grid: Grid, elements, exclude_mask=None, strict: bool = True
) -> DpsiSolution:
    """Per-vertex strain-gradient columns best reproducing the grid forces.

    The unknowns are the two non-tangential gradient columns per vertex;
    each Cartesian component decouples into the same coefficient matrix.
    """
    problem = assemble_external_fit(elements, vertex_forces, grid, exclude_mask)
    return solve_fit_problem(problem, exclude_mask, strict)


def solve_fit_problem(problem: ExternalFitProblem, exclude_mask=None, strict=True):
    n = len(problem.elements)
    exclude = np.zeros(n, dtype=bool) if exclude_mask is None else np.asarray(exclude_mask)
    W = problem.matrix
    active_cols = np.nonzero(np.repeat(~exclude, 2))[0]
    Wa = W[:, active_cols]
    sol, _, rank, svals = np.linalg.lstsq(Wa, problem.targets, rcond=None)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if rank < Wa.shape[1]:
        if strict:
            raise IllPosedError(Wa.shape[1] - rank, cond)
        warnings.warn(
            f"grid force system rank deficient ({Wa.shape[1] - rank} null directions); "
            "minimum-norm solution used",
            stacklevel=2,
        )
    full = np.zeros((2 * n, 3))
    full[active_cols] = sol
    u = full.reshape(n, 2, 3)
    return DpsiSolution(dpsi_dF2=u[:, 0, :], dpsi_dF3=u[:, 1, :], cond=cond, rank=int(rank))


# --- strain-factor gradient recovery ----------------------------------------------

def compute_dpsi_dR(dpsi_dF, Q, R, D) -> np.ndarray:
    """Upper-triangular energy gradient w.r.t. the strain factor entries.

    Conjugating the gradient through the QR factors leaves its upper
    triangle intact; right-multiplying by the inverse transpose of the
    (upper-triangular) factor then exposes the factor-entry gradient.
    """
    R = np.asarray(R, dtype=float)
    D = np.asarray(D, dtype=float)
    if abs(np.linalg.det(R)) < 1e-300 or abs(np.linalg.det(D)) < 1e-300:
        raise StrainDegenerateError("singular strain factor or rest directions")
    dinv_t = np.linalg.inv(D).T
    ktilde = np.asarray(Q).T @ np.asarray(dpsi_dF, dtype=float) @ dinv_t @ R.T
    out = ktilde @ np.linalg.inv(R).T
    return np.triu(out)


def forward_dpsi_dF(dpsi_dR, Q, R, D) -> np.ndarray:
    """Full-matrix gradient w.r.t. F from its strain-factor form.

    Inverse of compute_dpsi_dR on consistent inputs: build the symmetrized
    product, rotate by Q and carry the triangular and rest-direction
    factors back.
    """
    K = np.asarray(dpsi_dR, dtype=float) @ np.asarray(R, dtype=float).T
    up = np.triu(K)
    M = up + up.T - np.diag(np.diag(K))
    dpsi_dd = np.asarray(Q) @ M @ np.linalg.inv(R).T
    return dpsi_dd @ np.asarray(D, dtype=float).T


# --- PSD-constrained quadratic coefficient fit --------------------------------------

def psd_quadratic_fit(us, gs):
    """2x2 PSD matrix A minimizing sum ||2 A u_s - g_s||^2.

    Convex with a cone constraint: if the unconstrained optimum is PSD it
    is returned directly; otherwise the optimum lies on the cone boundary
    (rank <= 1) and is found by a fine angular scan with golden-section
    refinement of the closed-form scale.
    """
    us = np.asarray(us, dtype=float)
    gs = np.asarray(gs, dtype=float)
    basis = np.array(
        [
            [[1.0, 0.0], [0.0, 0.0]],
            [[0.0, 1.0 / np.sqrt(2.0)], [1.0 / np.sqrt(2.0), 0.0]],
            [[0.0, 0.0], [0.0, 1.0]],
        ]
    )
    # objective in orthonormal-coordinates c: ||L c - y||^2
    L = np.stack([2.0 * us @ b.T for b in basis], axis=2).reshape(-1, 3)
    y = gs.reshape(-1)
    H = L.T @ L
    rhs = L.T @ y
    evals = np.linalg.eigvalsh(H)
    deficient = evals[0] <= 1e-12 * max(evals[-1], 1e-300)
    if deficient:
        warnings.warn(
            "quadratic-coefficient fit is rank deficient; minimum-norm solution",
            stacklevel=2,
        )
        c = np.linalg.lstsq(L, y, rcond=None)[0]
    else:
        c = np.linalg.solve(H, rhs)
    A = np.tensordot(c, basis, axes=(0, 0))
    w = np.linalg.eigvalsh(A)
    if w[0] >= -1e-14 * max(abs(w[1]), 1.0):
        wc, vc = np.linalg.eigh(A)
        return (vc * np.maximum(wc, 0.0)) @ vc.T

    def rho_and_obj(theta):
        q = np.array([np.cos(theta), np.sin(theta)])
        qu = us @ q
        qg = gs @ q
        denom = 4.0 * np.sum(qu * qu)
        if denom <= 0.0:
            return 0.0, float(np.sum(gs * gs))
        rho = max(0.0, 2.0 * np.sum(qu * qg) / denom)
        resid = 2.0 * rho * qu[:, None] * q[None, :] - gs
        return rho, float(np.sum(resid * resid))

    thetas = np.linspace(0.0, np.pi, 721, endpoint=False)
    objs = [rho_and_obj(t)[1] for t in thetas]
    best = int(np.argmin(objs))
    lo = thetas[best] - np.pi / 720
    hi = thetas[best] + np.pi / 720
    phi = 0.5 * (np.sqrt(5.0) - 1.0)
    a, b = lo, hi
    x1 = b - phi * (b - a)
    x2 = a + phi * (b - a)
    f1, f2 = rho_and_obj(x1)[1], rho_and_obj(x2)[1]
    for _ in range(90):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - phi * (b - a)
            f1 = rho_and_obj(x1)[1]
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (b - a)
            f2 = rho_and_obj(x2)[1]
    theta = 0.5 * (a + b)
    rho, obj = rho_and_obj(theta)
    if obj > np.sum(gs * gs):
        return np.zeros((2, 2))
    q = np.array([np.cos(theta), np.sin(theta)])
    return rho * np.outer(q, q)


def fit_ab(samples) -> YarnExternalParams:
    """Six quadratic contact coefficients from strain-gradient samples.

    samples are (RParts, target upper-triangular gradient) pairs; the
    shear block and the cross-section block decouple and are each fit
    under their PSD constraint.
    """
    if len(samples) < 3:
        raise ValueError("need at least 3 samples for a well-posed coefficient fit")
    us = np.array([[p.r12, p.r13] for p, _ in samples])
    ga = np.array([[g[0, 1], g[0, 2]] for _, g in samples])
    ss = np.array([[p.r22 - 1.0, p.r33 - 1.0] for p, _ in samples])
    gb = np.array([[g[1, 1], g[2, 2]] for _, g in samples])
    A = psd_quadratic_fit(us, ga)
    B = psd_quadratic_fit(ss, gb)
    return YarnExternalParams(A[0, 0], 2.0 * A[0, 1], A[1, 1], B[0, 0], 2.0 * B[0, 1], B[1, 1])


def fit_ab_objective(params: YarnExternalParams, samples) -> float:
    """Residual the coefficient fit minimizes, for optimality checks."""
    total = 0.0
    ab = params.as_ab()
    for parts, target in samples:
        rp = parts.as_array()[None, :]
        G = dpsi_dR_entries(rp, ab)[0]
        for i, j in ((0, 1), (0, 2), (1, 1), (2, 2)):
            total += (G[i, j] - target[i, j]) ** 2
    return float(total)


# --- end-to-end contact-coefficient pipeline -----------------------------------------

@dataclass
class FiberSceneState:
    """One settled fiber-level configuration plus its rest geometry."""

    rest_fibers: list  # list of (m, 3) arrays
    deformed_fibers: list
    yarn_radius: float
    clamp_fraction: float = 0.08  # span fraction near each end excluded from the fit


def extract_centerline(fibers) -> np.ndarray:
    """Per-station centroid of a fiber bundle (stations = sample indices)."""
    stack = np.stack([np.asarray(f, dtype=float) for f in fibers])
    return stack.mean(axis=0)


def canonical_rest_rotation(rest_centerline, rest_fibers) -> np.ndarray:
    """Rotation taking the straight rest axis to +x with a bundle-anchored roll.

    The in-plane orientation is anchored on the first fiber's first-sample
    offset so that the whole pipeline is equivariant under rigid rotations
    of its input.
    """
    axis = normalized(rest_centerline[-1] - rest_centerline[0])
    anchor = np.asarray(rest_fibers[0], dtype=float)[0] - rest_centerline[0]
    anchor = anchor - np.dot(anchor, axis) * axis
    if np.linalg.norm(anchor) < 1e-12:
        for f in rest_fibers:
            anchor = np.asarray(f, dtype=float)[0] - rest_centerline[0]
            anchor = anchor - np.dot(anchor, axis) * axis
            if np.linalg.norm(anchor) >= 1e-12:
                break
        else:
            from .geometry import canonical_perpendicular

            anchor = canonical_perpendicular(axis)
    n = normalized(anchor)
    b = np.cross(axis, n)
    return np.stack((axis, n, b), axis=0)  # rows map world -> canonical


def homogenize_external(scene_states, yarn_params: RodParams, grid_h=None):
    """Contact coefficients reproducing settled fiber-level force balances.

    Per scene: canonicalize, extract the centerline, estimate per-edge
    deformation gradients by segment shape matching, recover the contact
    forces from rod-force balance, invert the grid transfer for the
    strain-gradient columns, convert to strain-factor gradients and
    finally fit the six coefficients across all scenes.
    """
    samples = []
    for st in scene_states:
        samples.extend(_scene_samples(st, yarn_params, grid_h))
    return fit_ab(samples)


def _scene_samples(st: FiberSceneState, yarn_params: RodParams, grid_h=None):
    rest_cl = extract_centerline(st.rest_fibers)
    G0 = canonical_rest_rotation(rest_cl, st.rest_fibers)
    rest = [np.asarray(f, dtype=float) @ G0.T for f in st.rest_fibers]
    deformed = [np.asarray(f, dtype=float) @ G0.T for f in st.deformed_fibers]
    rest_cl = extract_centerline(rest)
    def_cl = extract_centerline(deformed)

    n = rest_cl.shape[0]
    rest_x = rest_cl[:, 0]
    pl = Polyline(def_cl, rest_edge_lengths=np.diff(rest_x))
    n_edges = n - 1

    rest_pts = np.vstack(rest)
    def_pts = np.vstack(deformed)
    edge_F = []
    for e in range(n_edges):
        lo = rest_x[e] - 0.5 * (rest_x[e] - rest_x[e - 1]) if e > 0 else rest_x[0]
        hi = rest_x[e + 1] + 0.5 * (rest_x[e + 2] - rest_x[e + 1]) if e < n_edges - 1 else rest_x[-1]
        sel = (rest_pts[:, 0] >= lo) & (rest_pts[:, 0] <= hi)
        est = estimate_segment_F(rest_pts[sel], def_pts[sel])
        edge_F.append(est.F)
    edge_D = [np.eye(3)] * n_edges
    area = np.pi * st.yarn_radius**2
    edge_V0 = area * np.diff(rest_x)

    elements = vertex_elements_from_edges(def_cl, edge_F, edge_D, edge_V0)
    f_v = estimate_external_forces(RodState(pl), yarn_params)

    h = grid_h if grid_h is not None else 1.5 * 2.0 * st.yarn_radius
    grid = Grid.build(def_cl, h)
    span = rest_x[-1] - rest_x[0]
    exclude = (rest_x < rest_x[0] + st.clamp_fraction * span) | (
        rest_x > rest_x[-1] - st.clamp_fraction * span
    )
    sol = solve_dpsi_dF(f_v, grid, elements, exclude_mask=exclude, strict=False)

    out = []
    for v in range(n):
        if exclude[v]:
            continue
        el = elements[v]
        try:
            qr = qr_decompose(el.F, el.D)
        except StrainDegenerateError:
            continue
        dpsi_dF = np.stack(
            (np.zeros(3), sol.dpsi_dF2[v], sol.dpsi_dF3[v]), axis=1
        )
        target = compute_dpsi_dR(dpsi_dF, qr.Q, qr.R, el.D)
        out.append((split_R(qr.R), target))
    return out
