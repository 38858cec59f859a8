"""Scenario configuration, scene construction and file formats.

Scenario files are key=value text. A canonical scene is a straight yarn
along the +x axis, clamped at both ends, pressed by rigid cylinders
arranged by one of four built-in patterns (or an explicit collider list).
Trajectory dumps and material parameter files are written here too.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, Polyline, format_polyline, parse_polyline
from .procyarn import ProceduralYarnParams, proc_params_from_dict, proc_params_to_dict
from .rod import RodParams, RodState
from .volumetric import (
    Collider,
    FiberExternalParams,
    Scene,
    SettledState,
    YarnExternalParams,
)

PATTERN_IDS = (1, 2, 3, 4)
SPACING_IDS = (1, 2, 3, 4, 5, 6)


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent stream for one pipeline stage, derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def config_hash(*chunks) -> str:
    digest = hashlib.sha256()
    for c in chunks:
        digest.update(repr(c).encode())
        digest.update(b"\x00")
    return digest.hexdigest()[:16]


# --- key=value files ---------------------------------------------------------

def parse_kv(text: str) -> dict:
    """key=value lines; '#' comments; repeated keys collect into lists."""
    out: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            if not isinstance(out[key], list):
                out[key] = [out[key]]
            out[key].append(val)
        else:
            out[key] = val
    return out


def format_kv(d: dict) -> str:
    lines = []
    for key, val in d.items():
        vals = val if isinstance(val, list) else [val]
        for v in vals:
            lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def _vec3(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split(",")])


def parse_collider(spec: str) -> Collider:
    """point;axis;radius;speed;travel;motion with comma-separated vectors."""
    parts = [p.strip() for p in spec.split(";")]
    if len(parts) != 6:
        raise ValueError("collider spec needs point;axis;radius;speed;travel;motion")
    return Collider(
        point=_vec3(parts[0]),
        axis=_vec3(parts[1]),
        radius=float(parts[2]),
        speed=float(parts[3]),
        travel=float(parts[4]),
        motion=_vec3(parts[5]),
    )


def format_collider(c: Collider) -> str:
    v = lambda a: ",".join(f"{x:.17g}" for x in a)  # noqa: E731
    return f"{v(c.point)};{v(c.axis)};{c.radius:.17g};{c.speed:.17g};{c.travel:.17g};{v(c.motion)}"


# --- scenario ------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    level: str = "yarn"
    length: float = 2.0
    vertices: int = 81
    yarn_radius: float = 0.05
    fiber_radius: float = 0.007
    density: float = 1.0
    dt: float = 2e-5
    settle_tol: float = None
    max_settle_steps: int = 120000
    damping: float = 0.95
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed: int = 0
    clamp: str = "ends"
    pattern: int = 0
    spacing: int = 1
    increments: int = 5
    cylinder_speed: float = 2.0
    press_depth: float = 0.6
    press_gap: float = 0.5
    colliders: list = field(default_factory=list)
    grid_h: float = None
    rod: RodParams = None
    external: object = None
    proc: ProceduralYarnParams = None
    raw: dict = field(default_factory=dict)

    def effective_settle_tol(self) -> float:
        return self.settle_tol if self.settle_tol is not None else 2e-2 * self.yarn_radius

    def schedule(self) -> list:
        if not self.colliders and self.pattern == 0:
            return []
        return [(i + 1) / self.increments for i in range(self.increments)]


def scenario_from_dict(d: dict) -> ScenarioConfig:
    cfg = ScenarioConfig(raw=dict(d))
    simple = {
        "level": str, "length": float, "vertices": int, "yarn_radius": float,
        "fiber_radius": float, "density": float, "dt": float, "settle_tol": float,
        "max_settle_steps": int, "damping": float, "seed": int, "clamp": str,
        "pattern": int, "spacing": int, "increments": int, "cylinder_speed": float,
        "press_depth": float, "press_gap": float, "grid_h": float,
    }
    for key, typ in simple.items():
        if key in d:
            setattr(cfg, key, typ(d[key]))
    if "gravity" in d:
        cfg.gravity = _vec3(d["gravity"])
    if "collider" in d:
        specs = d["collider"] if isinstance(d["collider"], list) else [d["collider"]]
        cfg.colliders = [parse_collider(s) for s in specs]
    if cfg.level not in ("yarn", "fiber"):
        raise ValueError(f"level must be yarn or fiber, got {cfg.level!r}")
    if cfg.pattern and cfg.pattern not in PATTERN_IDS:
        raise ValueError(f"pattern must be one of {PATTERN_IDS}")
    if cfg.spacing not in SPACING_IDS:
        raise ValueError(f"spacing must be one of {SPACING_IDS}")
    if {"k", "alpha", "beta"} <= d.keys():
        cfg.rod = RodParams(float(d["k"]), float(d["alpha"]), float(d["beta"]))
    cfg.external = external_from_dict(d)
    if any(k in d for k in ("fiber_count", "pitch", "eps1", "eps2")):
        cfg.proc = proc_params_from_dict(d)
    return cfg


def external_from_dict(d: dict):
    if {"a1", "a2", "a3", "b1", "b2", "b3"} <= d.keys():
        return YarnExternalParams(*(float(d[k]) for k in ("a1", "a2", "a3", "b1", "b2", "b3")))
    if {"gamma", "mu", "lambda"} <= d.keys():
        return FiberExternalParams(float(d["gamma"]), float(d["mu"]), float(d["lambda"]))
    return None


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        return scenario_from_dict(parse_kv(fh.read()))


def pattern_colliders(
    pattern: int,
    spacing_id: int,
    length: float,
    yarn_radius: float,
    speed: float = 2.0,
    press_depth: float = 0.6,
    press_gap: float = 0.5,
) -> list:
    """Built-in cylinder arrangements pressing on the yarn middle.

    Cylinder axes run along y; motion is along -/+z. Spacing ids 1..6 map
    to 1.5x..4x the yarn diameter between neighboring cylinders;
    press_depth and press_gap are in units of the yarn radius.
    """
    if pattern not in PATTERN_IDS:
        raise ValueError(f"pattern must be one of {PATTERN_IDS}")
    if spacing_id not in SPACING_IDS:
        raise ValueError(f"spacing must be one of {SPACING_IDS}")
    d = 2.0 * yarn_radius
    s = (1.0 + 0.5 * spacing_id) * d
    rc = 1.5 * yarn_radius
    gap = press_gap * yarn_radius
    depth = press_depth * yarn_radius
    z0 = yarn_radius + rc + gap
    travel = gap + depth
    mid = 0.5 * length
    axis = np.array([0.0, 1.0, 0.0])

    def cyl(x, above: bool):
        sign = 1.0 if above else -1.0
        return Collider(
            point=np.array([x, 0.0, sign * z0]),
            axis=axis,
            radius=rc,
            speed=speed,
            travel=travel,
            motion=np.array([0.0, 0.0, -sign]),
        )

    if pattern == 1:
        return [cyl(mid - s, True), cyl(mid, True), cyl(mid + s, True)]
    if pattern == 2:
        return [cyl(mid - s, True), cyl(mid, False), cyl(mid + s, True)]
    if pattern == 3:
        return [cyl(mid - 0.5 * s, True), cyl(mid - 0.5 * s, False),
                cyl(mid + 0.5 * s, True), cyl(mid + 0.5 * s, False)]
    return [cyl(mid - 1.5 * s, True), cyl(mid - 0.5 * s, False),
            cyl(mid + 0.5 * s, True), cyl(mid + 1.5 * s, False)]


def straight_yarn_polyline(length: float, vertices: int) -> Polyline:
    x = np.linspace(0.0, length, vertices)
    pts = np.stack((x, np.zeros_like(x), np.zeros_like(x)), axis=1)
    return Polyline(pts)


def fiber_to_world(samples: np.ndarray) -> np.ndarray:
    """Procedural (x, y, z-axis) coordinates to world (yarn along +x)."""
    return samples[:, (2, 0, 1)]


def world_to_fiber(samples: np.ndarray) -> np.ndarray:
    return samples[:, (1, 2, 0)]


def clamp_mask(n: int, mode: str) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if mode == "ends":
        mask[0] = mask[-1] = True
    elif mode == "none":
        pass
    else:
        raise ValueError(f"unknown clamp mode {mode!r}")
    return mask


def build_scene(cfg: ScenarioConfig, rod: RodParams = None, external=None) -> Scene:
    """Construct the Scene a scenario describes (yarn- or fiber-level)."""
    rod = rod or cfg.rod
    external = external if external is not None else cfg.external
    if rod is None:
        raise ValueError("scenario provides no rod parameters (k, alpha, beta)")
    colliders = list(cfg.colliders)
    if not colliders and cfg.pattern:
        colliders = pattern_colliders(
            cfg.pattern, cfg.spacing, cfg.length, cfg.yarn_radius, cfg.cylinder_speed,
            cfg.press_depth, cfg.press_gap,
        )
    if cfg.level == "yarn":
        if external is None:
            raise ValueError("yarn-level scenario needs a1..b3 contact coefficients")
        pl = straight_yarn_polyline(cfg.length, cfg.vertices)
        rods = [RodState(pl)]
        radius = cfg.yarn_radius
        grid_h = cfg.grid_h if cfg.grid_h else 1.5 * 2.0 * cfg.yarn_radius
    else:
        if external is None:
            raise ValueError("fiber-level scenario needs gamma/mu/lambda contact constants")
        if cfg.proc is None:
            raise ValueError("fiber-level scenario needs procedural yarn parameters")
        from .geometry import curvature_binormals
        from .procyarn import build_plied_yarn

        fibers = build_plied_yarn(cfg.proc, cfg.length, cfg.vertices, cfg.yarn_radius)
        rods = []
        for f in fibers:
            pts = fiber_to_world(f.samples)
            # the procedural shape is the zero-energy rest configuration
            rods.append(RodState(Polyline(pts, rest_kappas=curvature_binormals(pts))))
        radius = cfg.fiber_radius
        grid_h = cfg.grid_h if cfg.grid_h else 3.0 * 2.0 * cfg.fiber_radius
    fixed = [clamp_mask(r.polyline.n_vertices, cfg.clamp) for r in rods]
    return Scene(
        rods=rods,
        rod_params=rod,
        external=external,
        colliders=colliders,
        gravity=cfg.gravity,
        dt=cfg.dt,
        radius=radius,
        density=cfg.density,
        grid_h=grid_h,
        fixed=fixed,
    )


# --- trajectory dumps -----------------------------------------------------------

def write_trajectory(path, meta: dict, states: list) -> None:
    with open(path, "w") as fh:
        fh.write("TRAJ 1\n")
        for key in sorted(meta):
            fh.write(f"META {key} {meta[key]}\n")
        n_rods = len(states[0].rods) if states else 0
        fh.write(f"RODS {n_rods}\n")
        fh.write(f"STATES {len(states)}\n")
        for si, st in enumerate(states):
            fh.write(f"STATE {si}\n")
            fh.write(f"TIME {st.time:.17g}\n")
            fh.write("PROGRESS " + " ".join(f"{x:.17g}" for x in st.collider_disp) + "\n")
            for ri, rodstate in enumerate(st.rods):
                fh.write(f"ROD {ri}\n")
                fh.write(format_polyline(rodstate.polyline))
                F = st.edge_F[ri]
                fh.write(f"DEFGRAD {F.shape[0]}\n")
                for m in F:
                    fh.write(" ".join(f"{x:.17g}" for x in m.reshape(9)) + "\n")
                frames = st.frames[ri]
                fh.write(f"FRAME {len(frames)}\n")
                for fr in frames:
                    row = np.concatenate((fr.t, fr.n, fr.b))
                    fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_trajectory(path):
    """Returns (meta, states) with the same structure write_trajectory saves."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if lines[0].split()[0] != "TRAJ":
        raise ValueError("not a trajectory dump")
    pos = 1
    meta = {}
    while lines[pos].startswith("META "):
        _, key, val = lines[pos].split(" ", 2)
        meta[key] = val
        pos += 1
    n_rods = int(lines[pos].split()[1])
    pos += 1
    n_states = int(lines[pos].split()[1])
    pos += 1
    states = []
    for _ in range(n_states):
        assert lines[pos].startswith("STATE")
        pos += 1
        time = float(lines[pos].split()[1])
        pos += 1
        prog = np.array([float(x) for x in lines[pos].split()[1:]])
        pos += 1
        rods = []
        edge_F = []
        frames = []
        for _ in range(n_rods):
            assert lines[pos].startswith("ROD")
            pos += 1
            pl, pos = parse_polyline(lines, pos)
            assert lines[pos].startswith("DEFGRAD")
            ne = int(lines[pos].split()[1])
            pos += 1
            F = np.array(
                [[float(x) for x in lines[pos + i].split()] for i in range(ne)]
            ).reshape(ne, 3, 3)
            pos += ne
            assert lines[pos].startswith("FRAME")
            nf = int(lines[pos].split()[1])
            pos += 1
            fr = []
            for i in range(nf):
                row = np.array([float(x) for x in lines[pos + i].split()])
                fr.append(Frame(row[0:3], row[3:6], row[6:9]))
            pos += nf
            rods.append(RodState(pl))
            edge_F.append(F)
            frames.append(fr)
        states.append(SettledState(time, prog, rods, edge_F, frames))
    return meta, states


# --- material parameter files -----------------------------------------------------

def write_material_params(path, rod: RodParams, external=None, meta: dict = None) -> None:
    d = {"k": f"{rod.k:.17g}", "alpha": f"{rod.alpha:.17g}", "beta": f"{rod.beta:.17g}"}
    if isinstance(external, YarnExternalParams):
        for key in ("a1", "a2", "a3", "b1", "b2", "b3"):
            d[key] = f"{getattr(external, key):.17g}"
    elif isinstance(external, FiberExternalParams):
        d["gamma"] = f"{external.gamma:.17g}"
        d["mu"] = f"{external.mu:.17g}"
        d["lambda"] = f"{external.lambda_lame:.17g}"
    for key, val in (meta or {}).items():
        d[f"provenance.{key}"] = val
    with open(path, "w") as fh:
        fh.write(format_kv(d))


def read_material_params(path):
    """Returns (RodParams, external-or-None, provenance dict)."""
    with open(path) as fh:
        d = parse_kv(fh.read())
    rod = RodParams(float(d["k"]), float(d["alpha"]), float(d["beta"]))
    external = external_from_dict(d)
    meta = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("provenance.")}
    return rod, external, meta


def scene_meta(cfg: ScenarioConfig, extra: dict = None) -> dict:
    meta = {
        "config_hash": config_hash(sorted(cfg.raw.items())),
        "seed": cfg.seed,
        "level": cfg.level,
        "dt": f"{cfg.dt:.17g}",
        "yarn_radius": f"{cfg.yarn_radius:.17g}",
        "fiber_radius": f"{cfg.fiber_radius:.17g}",
        "length": f"{cfg.length:.17g}",
    }
    meta.update(extra or {})
    return meta
