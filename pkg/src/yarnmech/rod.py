"""Elastic rod internal energies and forces.

The same discrete model runs at fiber and yarn level with different
coefficients: quadratic edge-length stretching, curvature-binormal
bending and a per-interior-vertex twist angle evolved as an independent
degree of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel
from .geometry import DegenerateTurnError, Polyline

# Reference single-fiber material constants (stretch, bend, twist).
FIBER_ROD_DEFAULTS = dict(k=1.87e11, alpha=4.07e5, beta=1.08e3)


@dataclass(frozen=True)
class RodParams:
    """Stretch (k), bending (alpha) and twisting (beta) coefficients."""

    k: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.k < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("rod coefficients must be non-negative")


@dataclass(frozen=True)
class RodState:
    """A polyline plus per-vertex velocities and twist-angle rates."""

    polyline: Polyline
    velocities: np.ndarray = None
    twist_rates: np.ndarray = None

    def __post_init__(self):
        n = self.polyline.n_vertices
        v = self.velocities
        v = np.zeros((n, 3)) if v is None else np.asarray(v, dtype=float)
        if v.shape != (n, 3):
            raise ValueError("velocity count must match vertex count")
        w = self.twist_rates
        w = np.zeros(n - 2) if w is None else np.asarray(w, dtype=float)
        if w.shape != (n - 2,):
            raise ValueError("twist rate count must match interior vertex count")
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "twist_rates", w)


def _interior_arrays(polyline: Polyline):
    n = polyline.n_vertices
    idx = np.arange(1, n - 1)
    triples = np.stack((idx - 1, idx, idx + 1), axis=1).astype(np.int64)
    rl = polyline.rest_edge_lengths
    return triples, rl[:-1], rl[1:], polyline.effective_rest_lengths()


def _check_turns(polyline: Polyline):
    e = polyline.edges()
    rl = polyline.rest_edge_lengths
    chi = rl[:-1] * rl[1:] + np.einsum("ij,ij->i", e[:-1], e[1:])
    if np.any(chi <= 1e-12 * rl[:-1] * rl[1:]):
        raise DegenerateTurnError("anti-parallel edge pair in polyline")


def stretch_energy(state: RodState, params: RodParams) -> float:
    """Sum of (k/2)(|e| - |e_rest|)^2 over edges."""
    pl = state.polyline
    dl = pl.edge_lengths() - pl.rest_edge_lengths
    return 0.5 * params.k * float(np.dot(dl, dl))


def bend_twist_energy(state: RodState, params: RodParams) -> tuple[float, float]:
    """Bending and twisting energies summed over interior vertices."""
    pl = state.polyline
    if pl.n_vertices < 3:
        return 0.0, 0.0
    _check_turns(pl)
    e = pl.edges()
    rl = pl.rest_edge_lengths
    chi = rl[:-1] * rl[1:] + np.einsum("ij,ij->i", e[:-1], e[1:])
    kb = 2.0 * np.cross(e[:-1], e[1:]) / chi[:, None] - pl.rest_kappas
    lbar = pl.effective_rest_lengths()
    e_bend = float(np.sum(params.alpha * np.einsum("ij,ij->i", kb, kb) / (2.0 * lbar)))
    m = pl.twist_angles
    e_twist = float(np.sum(params.beta * m**2 / (2.0 * lbar)))
    return e_bend, e_twist


def total_energy(state: RodState, params: RodParams) -> float:
    eb, et = bend_twist_energy(state, params)
    return stretch_energy(state, params) + eb + et


def internal_forces(state: RodState, params: RodParams, method: str = "analytic"):
    """Forces (-dE/dx) and twist torques (-dE/dm).

    method "analytic" uses the closed-form gradients; "fd" differentiates
    the energies by central differences (slow, for debugging/validation).
    """
    if method == "fd":
        return _internal_forces_fd(state, params)
    if method != "analytic":
        raise ValueError(f"unknown force method {method!r}")
    pl = state.polyline
    n = pl.n_vertices
    pos = pl.vertices
    edges = np.stack((np.arange(n - 1), np.arange(1, n)), axis=1).astype(np.int64)
    f = accel.stretch_forces(pos, edges, pl.rest_edge_lengths, params.k, n)
    if n >= 3:
        _check_turns(pl)
        triples, rp, rn, lbar = _interior_arrays(pl)
        f = f + accel.bend_forces(pos, triples, rp, rn, lbar, pl.rest_kappas, params.alpha, n)
        torques = -params.beta * pl.twist_angles / lbar
    else:
        torques = np.zeros(0)
    return f, torques


def _internal_forces_fd(state: RodState, params: RodParams, step_scale: float = 1e-6):
    pl = state.polyline
    n = pl.n_vertices
    h = step_scale * float(np.mean(pl.rest_edge_lengths))
    forces = np.zeros((n, 3))
    base = pl.vertices.copy()
    for i in range(n):
        for c in range(3):
            plus = base.copy()
            plus[i, c] += h
            minus = base.copy()
            minus[i, c] -= h
            ep = total_energy(RodState(pl.with_vertices(plus)), params)
            em = total_energy(RodState(pl.with_vertices(minus)), params)
            forces[i, c] = -(ep - em) / (2.0 * h)
    torques = np.zeros(max(n - 2, 0))
    hm = step_scale
    for j in range(n - 2):
        tw = pl.twist_angles.copy()
        tw[j] += hm
        ep = total_energy(RodState(pl.with_vertices(base, tw)), params)
        tw[j] -= 2.0 * hm
        em = total_energy(RodState(pl.with_vertices(base, tw)), params)
        torques[j] = -(ep - em) / (2.0 * hm)
    return forces, torques
