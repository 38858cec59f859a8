"""Procedural fiber geometry.

Fibers are circular helices around a straight yarn axis, with sampled
radii, optional sinusoidal radius migration and optional plying; straight
fibers can be reshaped by per-station 2x2 cross-section transforms and
warped onto an arbitrary centerline with per-edge frames.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, Polyline, edge_frames, normalized


class SpanError(ValueError):
    """Fiber axial extent exceeds the centerline arc length."""


@dataclass(frozen=True)
class MigrationParams:
    enabled: bool = False
    r_min: float = 0.7
    r_max: float = 1.0
    rate: float = 1.0  # angular rate of the radius oscillation along z

    def __post_init__(self):
        if self.r_min > self.r_max:
            raise ValueError("migration r_min must not exceed r_max")


@dataclass(frozen=True)
class ProceduralYarnParams:
    """Helix, radius-distribution and ply parameters of one yarn."""

    fiber_count: int = 60
    pitch: float = 0.5
    eps1: float = 0.0
    eps2: float = 0.0
    migration: MigrationParams = field(default_factory=MigrationParams)
    ply_count: int = 1
    ply_radius: float = 0.0
    ply_pitch: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.fiber_count < 1:
            raise ValueError("fiber_count must be at least 1")
        if self.pitch <= 0 or self.ply_pitch <= 0:
            raise ValueError("pitches must be positive")
        if not (0.0 <= self.eps1 < 0.5):
            raise ValueError("eps1 must lie in [0, 0.5)")
        if self.eps2 < 0:
            raise ValueError("eps2 must be non-negative")
        if self.ply_count < 1:
            raise ValueError("ply_count must be at least 1")

    @property
    def total_fibers(self) -> int:
        return self.fiber_count * self.ply_count


@dataclass(frozen=True)
class FiberCurve:
    """Sampled fiber polyline with identity within its yarn."""

    samples: np.ndarray
    fiber_id: int = 0
    ply_id: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] < 2:
            raise ValueError("fiber needs at least 2 3D samples")
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class CrossSectionDeform:
    """A 2x2 cross-section transform stationed at arc length z."""

    T: np.ndarray
    z: float

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        if T.shape != (2, 2) or not np.isfinite(T).all():
            raise ValueError("T must be a finite 2x2 matrix")
        if np.linalg.det(T) <= 0.0:
            warnings.warn("cross-section transform has non-positive determinant", stacklevel=2)
        object.__setattr__(self, "T", T)


def radius_density(r, eps1: float, eps2: float):
    """Unnormalized fiber-radius density on [0, 1)."""
    r = np.asarray(r, dtype=float)
    return (1.0 - 2.0 * eps1) * ((np.e - np.exp(r)) / (np.e - 1.0)) ** eps2


def sample_fiber_radius(params: ProceduralYarnParams, rng) -> float:
    """One radius draw in [0, 1) by rejection against the flat envelope."""
    peak = radius_density(0.0, params.eps1, params.eps2)
    while True:
        r = rng.random()
        if rng.random() * peak <= radius_density(r, params.eps1, params.eps2):
            return float(r)


def generate_straight_fiber(
    r: float,
    theta: float,
    pitch: float,
    z_samples,
    migration: MigrationParams = None,
    fiber_id: int = 0,
    ply_id: int = 0,
) -> FiberCurve:
    """Helix around the z axis sampled at the given axial stations.

    With migration enabled the radius oscillates sinusoidally between the
    scaled migration bounds, phase-shifted by the fiber's own phase.
    """
    z = np.asarray(z_samples, dtype=float)
    if pitch <= 0:
        raise ValueError("pitch must be positive")
    if migration is not None and migration.enabled:
        lo, hi = r * migration.r_min, r * migration.r_max
        rr = lo + (hi - lo) * 0.5 * (1.0 + np.sin(migration.rate * z + theta))
    else:
        rr = np.full_like(z, r)
    ang = theta + 2.0 * np.pi * z / pitch
    pts = np.stack((rr * np.cos(ang), rr * np.sin(ang), z), axis=1)
    return FiberCurve(pts, fiber_id, ply_id)


def build_plied_yarn(
    params: ProceduralYarnParams,
    length: float,
    n_samples: int,
    yarn_radius: float = 1.0,
) -> list:
    """All fibers of a (possibly plied) straight yarn along the z axis.

    Unit-scale helix radii are scaled by yarn_radius. With a single
    centered ply this reduces exactly to independent fiber generation;
    otherwise each ply is generated in its own frame and wound around the
    yarn axis at ply_radius / ply_pitch.
    """
    rng = np.random.default_rng(params.seed)
    z = np.linspace(0.0, length, n_samples)
    fibers = []
    fid = 0
    single = params.ply_count == 1 and params.ply_radius == 0.0
    for ply in range(params.ply_count):
        local = []
        for _ in range(params.fiber_count):
            r = sample_fiber_radius(params, rng) * yarn_radius
            theta = rng.random() * 2.0 * np.pi
            local.append(
                generate_straight_fiber(
                    r, theta, params.pitch, z, params.migration, fiber_id=fid, ply_id=ply
                )
            )
            fid += 1
        if single:
            fibers.extend(local)
            continue
        fibers.extend(_wind_ply(local, params, ply, length))
    return fibers


def _wind_ply(local_fibers, params: ProceduralYarnParams, ply: int, length: float):
    """Warp one ply's straight fibers onto its helical ply centerline."""
    phase = 2.0 * np.pi * ply / params.ply_count
    R, pitch = params.ply_radius, params.ply_pitch
    kappa = np.sqrt(1.0 + (2.0 * np.pi * R / pitch) ** 2)
    n = max(len(local_fibers[0].samples) * 2, 16)
    # sample the ply centerline so its arc length covers the fiber span
    zc = np.linspace(0.0, length / kappa * 1.001 + 1e-12, n)
    ang = phase + 2.0 * np.pi * zc / pitch
    centerline = Polyline(np.stack((R * np.cos(ang), R * np.sin(ang), zc), axis=1))
    frames = edge_frames(centerline)
    return [warp_to_centerline(f, centerline, frames) for f in local_fibers]


def apply_cross_section_transform(fiber: FiberCurve, deforms) -> FiberCurve:
    """Reshape a straight-yarn fiber by interpolated cross-section transforms.

    Transform entries are interpolated componentwise between stations
    (clamped beyond the first/last), and applied to the x/y components;
    z is untouched.
    """
    if not deforms:
        return fiber
    deforms = sorted(deforms, key=lambda d: d.z)
    zs = np.array([d.z for d in deforms])
    mats = np.array([d.T for d in deforms])
    z = fiber.samples[:, 2]
    T = np.empty((z.shape[0], 2, 2))
    for i in range(2):
        for j in range(2):
            T[:, i, j] = np.interp(z, zs, mats[:, i, j])
    xy = np.einsum("nij,nj->ni", T, fiber.samples[:, :2])
    out = np.concatenate((xy, z[:, None]), axis=1)
    return FiberCurve(out, fiber.fiber_id, fiber.ply_id)


def warp_to_centerline(fiber: FiberCurve, centerline: Polyline, frames) -> FiberCurve:
    """Bend a straight-yarn fiber to follow a centerline.

    The fiber's z coordinate is interpreted as arc length along the
    centerline; its x/y offsets ride on the interpolated per-edge
    normal/binormal directions.
    """
    arc = centerline.arc_lengths()
    z = fiber.samples[:, 2]
    if z.min() < -1e-9 * arc[-1] or z.max() > arc[-1] * (1.0 + 1e-9):
        raise SpanError(
            f"fiber span [{z.min():g}, {z.max():g}] exceeds centerline arc length {arc[-1]:g}"
        )
    z = np.clip(z, 0.0, arc[-1])
    alpha = np.empty((z.shape[0], 3))
    for c in range(3):
        alpha[:, c] = np.interp(z, arc, centerline.vertices[:, c])
    mid = 0.5 * (arc[:-1] + arc[1:])
    nmat = np.array([f.n for f in frames])
    bmat = np.array([f.b for f in frames])
    nv = np.empty_like(alpha)
    bv = np.empty_like(alpha)
    for c in range(3):
        nv[:, c] = np.interp(z, mid, nmat[:, c])
        bv[:, c] = np.interp(z, mid, bmat[:, c])
    nv = nv / np.linalg.norm(nv, axis=1)[:, None]
    bv = bv - np.einsum("ij,ij->i", bv, nv)[:, None] * nv
    bv = bv / np.linalg.norm(bv, axis=1)[:, None]
    out = alpha + fiber.samples[:, 0:1] * nv + fiber.samples[:, 1:2] * bv
    return FiberCurve(out, fiber.fiber_id, fiber.ply_id)


# --- fiber geometry files ---------------------------------------------------

def write_fiber_curves(path, curves, binary: bool = False, meta: dict = None) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(b"YMFIBB1\n")
            fh.write(struct.pack("<q", len(curves)))
            for c in curves:
                fh.write(struct.pack("<3q", c.fiber_id, c.ply_id, c.samples.shape[0]))
                fh.write(np.ascontiguousarray(c.samples, dtype="<f8").tobytes())
        return
    with open(path, "w") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"META {key} {val}\n")
        fh.write(f"FIBERS {len(curves)}\n")
        for c in curves:
            fh.write(f"FIBER {c.fiber_id} {c.ply_id} {c.samples.shape[0]}\n")
            for p in c.samples:
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_fiber_curves(path):
    """Read fiber geometry (text or binary); returns (curves, meta)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head == b"YMFIBB1\n":
            count = struct.unpack("<q", fh.read(8))[0]
            curves = []
            for _ in range(count):
                fid, ply, n = struct.unpack("<3q", fh.read(24))
                pts = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3)
                curves.append(FiberCurve(pts.copy(), fid, ply))
            return curves, {}
    meta = {}
    curves = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    pos = 0
    while lines[pos].startswith("META "):
        _, key, val = lines[pos].split(" ", 2)
        meta[key] = val
        pos += 1
    count = int(lines[pos].split()[1])
    pos += 1
    for _ in range(count):
        _, fid, ply, n = lines[pos].split()
        pos += 1
        n = int(n)
        pts = np.array([[float(x) for x in lines[pos + i].split()] for i in range(n)])
        pos += n
        curves.append(FiberCurve(pts, int(fid), int(ply)))
    return curves, meta


# --- parameter files ----------------------------------------------------------

PROC_KEYS = (
    "fiber_count", "pitch", "eps1", "eps2", "migration", "r_min", "r_max",
    "migration_rate", "ply_count", "ply_radius", "ply_pitch", "seed",
)


def proc_params_to_dict(p: ProceduralYarnParams) -> dict:
    return {
        "fiber_count": p.fiber_count,
        "pitch": p.pitch,
        "eps1": p.eps1,
        "eps2": p.eps2,
        "migration": int(p.migration.enabled),
        "r_min": p.migration.r_min,
        "r_max": p.migration.r_max,
        "migration_rate": p.migration.rate,
        "ply_count": p.ply_count,
        "ply_radius": p.ply_radius,
        "ply_pitch": p.ply_pitch,
        "seed": p.seed,
    }


def proc_params_from_dict(d: dict) -> ProceduralYarnParams:
    mig = MigrationParams(
        enabled=bool(int(d.get("migration", 0))),
        r_min=float(d.get("r_min", 0.7)),
        r_max=float(d.get("r_max", 1.0)),
        rate=float(d.get("migration_rate", 1.0)),
    )
    return ProceduralYarnParams(
        fiber_count=int(d.get("fiber_count", 60)),
        pitch=float(d.get("pitch", 0.5)),
        eps1=float(d.get("eps1", 0.0)),
        eps2=float(d.get("eps2", 0.0)),
        migration=mig,
        ply_count=int(d.get("ply_count", 1)),
        ply_radius=float(d.get("ply_radius", 0.0)),
        ply_pitch=float(d.get("ply_pitch", 1.0)),
        seed=int(d.get("seed", 0)),
    )
