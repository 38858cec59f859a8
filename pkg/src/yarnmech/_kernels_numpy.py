"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend (and the reference the numba backend is
checked against). All functions are pure: they allocate and return their
outputs. Grid node arrays are flat, node index = (i * ny + j) * nz + k.

The interpolation kernel is the quadratic B-spline with a 3-node support
per axis; weights over the support sum to one for any point at least one
cell away from the grid boundary.
"""

import numpy as np

BACKEND = "numpy"


def _weights(points, origin, h):
    """Base node index, per-axis weights and weight derivatives.

    Returns (base (n,3) int64, w (n,3,3), dw (n,3,3)); the last axis of
    w/dw indexes the 3 support offsets, dw is in real units (1/h).
    """
    gx = (points - origin) / h
    base = np.floor(gx - 0.5).astype(np.int64)
    fx = gx - base  # in [0.5, 1.5)
    w = np.empty(points.shape + (3,))
    dw = np.empty(points.shape + (3,))
    w[..., 0] = 0.5 * (1.5 - fx) ** 2
    w[..., 1] = 0.75 - (fx - 1.0) ** 2
    w[..., 2] = 0.5 * (fx - 0.5) ** 2
    dw[..., 0] = (fx - 1.5) / h
    dw[..., 1] = -2.0 * (fx - 1.0) / h
    dw[..., 2] = (fx - 0.5) / h
    return base, w, dw


def _flat_index(base, dims, di, dj, dk):
    ny, nz = dims[1], dims[2]
    return ((base[:, 0] + di) * ny + (base[:, 1] + dj)) * nz + (base[:, 2] + dk)


def p2g(points, masses, vectors, origin, h, dims):
    """Scatter per-point masses and vectors to grid nodes.

    Returns (node_mass (N,), node_vec (N, 3)) with N = prod(dims).
    """
    n_nodes = int(dims[0] * dims[1] * dims[2])
    node_mass = np.zeros(n_nodes)
    node_vec = np.zeros((n_nodes, 3))
    base, w, _ = _weights(points, origin, h)
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                idx = _flat_index(base, dims, di, dj, dk)
                ww = w[:, 0, di] * w[:, 1, dj] * w[:, 2, dk]
                np.add.at(node_mass, idx, ww * masses)
                np.add.at(node_vec, idx, ww[:, None] * vectors)
    return node_mass, node_vec


def gather_vec(points, node_vec, origin, h, dims):
    """Interpolate a grid vector field at the given points."""
    out = np.zeros((points.shape[0], 3))
    base, w, _ = _weights(points, origin, h)
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                idx = _flat_index(base, dims, di, dj, dk)
                ww = w[:, 0, di] * w[:, 1, dj] * w[:, 2, dk]
                out += ww[:, None] * node_vec[idx]
    return out


def gather_gradv(points, node_vec, origin, h, dims):
    """Gradient of the interpolated grid vector field at the points.

    out[p, a, b] = d(v_a)/d(x_b).
    """
    out = np.zeros((points.shape[0], 3, 3))
    base, w, dw = _weights(points, origin, h)
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                idx = _flat_index(base, dims, di, dj, dk)
                wx, wy, wz = w[:, 0, di], w[:, 1, dj], w[:, 2, dk]
                gw = np.stack(
                    (dw[:, 0, di] * wy * wz, wx * dw[:, 1, dj] * wz, wx * wy * dw[:, 2, dk]),
                    axis=1,
                )
                out += node_vec[idx][:, :, None] * gw[:, None, :]
    return out


def scatter_grad_force(points, coefs, dirs, origin, h, dims):
    """Accumulate node_vec[i] += coef * (dir . grad_w_i) over all points.

    points/coefs/dirs are (m, 3); returns node_vec (N, 3).
    """
    n_nodes = int(dims[0] * dims[1] * dims[2])
    node_vec = np.zeros((n_nodes, 3))
    base, w, dw = _weights(points, origin, h)
    for di in range(3):
        for dj in range(3):
            for dk in range(3):
                idx = _flat_index(base, dims, di, dj, dk)
                wx, wy, wz = w[:, 0, di], w[:, 1, dj], w[:, 2, dk]
                s = (
                    dirs[:, 0] * dw[:, 0, di] * wy * wz
                    + dirs[:, 1] * wx * dw[:, 1, dj] * wz
                    + dirs[:, 2] * wx * wy * dw[:, 2, dk]
                )
                np.add.at(node_vec, idx, coefs * s[:, None])
    return node_vec


def stretch_forces(pos, edges, rest_len, k, n_verts):
    """Per-vertex forces of the quadratic edge-length energy."""
    out = np.zeros((n_verts, 3))
    e = pos[edges[:, 1]] - pos[edges[:, 0]]
    elen = np.linalg.norm(e, axis=1)
    coef = k * (elen - rest_len) / np.maximum(elen, 1e-300)
    f = coef[:, None] * e
    np.add.at(out, edges[:, 0], f)
    np.add.at(out, edges[:, 1], -f)
    return out


def bend_forces(pos, triples, rest_prev, rest_next, lbar, rest_kappa, alpha, n_verts):
    """Per-vertex forces of the curvature-binormal bending energy.

    triples rows are (i_prev, i, i_next) vertex indices of interior
    vertices; rest_prev/rest_next are the rest lengths of the adjacent
    edges, lbar the effective rest length and rest_kappa the rest turning
    vector at the interior vertex.
    """
    out = np.zeros((n_verts, 3))
    ep = pos[triples[:, 1]] - pos[triples[:, 0]]
    en = pos[triples[:, 2]] - pos[triples[:, 1]]
    c = np.cross(ep, en)
    chi = rest_prev * rest_next + np.einsum("ij,ij->i", ep, en)
    v = 2.0 * c / chi[:, None] - rest_kappa
    cv = np.einsum("ij,ij->i", c, v)
    # grad of |kb - kb_rest|^2 through kb = 2 (ep x en) / chi
    gp = (4.0 / chi)[:, None] * np.cross(en, v) - (4.0 * cv / chi**2)[:, None] * en
    gn = (4.0 / chi)[:, None] * np.cross(v, ep) - (4.0 * cv / chi**2)[:, None] * ep
    scale = (alpha / (2.0 * lbar))[:, None]
    gp = gp * scale
    gn = gn * scale
    np.add.at(out, triples[:, 0], gp)
    np.add.at(out, triples[:, 1], gn - gp)
    np.add.at(out, triples[:, 2], -gn)
    return out


def _triu_inverse(R):
    """Batched inverse of upper-triangular 3x3 matrices."""
    a, b, c = R[:, 0, 0], R[:, 0, 1], R[:, 0, 2]
    d, f = R[:, 1, 1], R[:, 1, 2]
    g = R[:, 2, 2]
    inv = np.zeros_like(R)
    inv[:, 0, 0] = 1.0 / a
    inv[:, 0, 1] = -b / (a * d)
    inv[:, 0, 2] = (b * f - c * d) / (a * d * g)
    inv[:, 1, 1] = 1.0 / d
    inv[:, 1, 2] = -f / (d * g)
    inv[:, 2, 2] = 1.0 / g
    return inv


def signed_qr(mats):
    """Batched QR with the sign convention diag(R) >= 0."""
    q, r = np.linalg.qr(mats)
    s = np.sign(np.einsum("ijj->ij", r))
    s[s == 0.0] = 1.0
    q = q * s[:, None, :]
    r = r * s[:, :, None]
    return q, r


def edge_strain_response(F, D, ab):
    """Per-edge shear/cross-section energy density and its d-gradient.

    F, D are (e, 3, 3); ab = (a1, a2, a3, b1, b2, b3). Returns
    (dpsi_dd (e,3,3), d (e,3,3), psi (e,), rparts (e,6)) where rparts
    columns are (r11, r12, r13, r22, r23, r33) of the QR factor with
    non-negative diagonal. Cross-section diagonal terms enter through
    their deviation from 1 so the response vanishes at F = I.
    """
    a1, a2, a3, b1, b2, b3 = ab
    d = F @ D
    q, r = signed_qr(d)
    r11, r12, r13 = r[:, 0, 0], r[:, 0, 1], r[:, 0, 2]
    r22, r23, r33 = r[:, 1, 1], r[:, 1, 2], r[:, 2, 2]
    s22 = r22 - 1.0
    s33 = r33 - 1.0
    psi = (
        a1 * r12**2
        + a2 * r12 * r13
        + a3 * r13**2
        + b1 * s22**2
        + b2 * s22 * s33
        + b3 * s33**2
    )
    G = np.zeros_like(F)
    G[:, 0, 1] = 2.0 * a1 * r12 + a2 * r13
    G[:, 0, 2] = a2 * r12 + 2.0 * a3 * r13
    G[:, 1, 1] = 2.0 * b1 * s22 + b2 * s33
    G[:, 2, 2] = b2 * s22 + 2.0 * b3 * s33
    K = G @ r.transpose(0, 2, 1)
    up = np.triu(K)
    M = up + up.transpose(0, 2, 1)
    diag = np.einsum("ijj->ij", K)
    M[:, np.arange(3), np.arange(3)] -= diag
    rinv_t = _triu_inverse(r).transpose(0, 2, 1)
    dpsi_dd = q @ M @ rinv_t
    rparts = np.stack((r11, r12, r13, r22, r23, r33), axis=1)
    return dpsi_dd, d, psi, rparts
