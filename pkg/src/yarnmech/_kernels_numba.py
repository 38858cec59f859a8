"""Numba-compiled implementations of the hot kernels.

Same call surface as ``_kernels_numpy``; serial loops only, so results are
deterministic. Compiled artifacts are cached on disk.
"""

import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True, inline="always")
def _axis_weights(x, ox, h):
    gx = (x - ox) / h
    base = int(np.floor(gx - 0.5))
    fx = gx - base
    w0 = 0.5 * (1.5 - fx) ** 2
    w1 = 0.75 - (fx - 1.0) ** 2
    w2 = 0.5 * (fx - 0.5) ** 2
    d0 = (fx - 1.5) / h
    d1 = -2.0 * (fx - 1.0) / h
    d2 = (fx - 0.5) / h
    return base, w0, w1, w2, d0, d1, d2


@njit(cache=True)
def p2g(points, masses, vectors, origin, h, dims):
    n_nodes = dims[0] * dims[1] * dims[2]
    node_mass = np.zeros(n_nodes)
    node_vec = np.zeros((n_nodes, 3))
    ny, nz = dims[1], dims[2]
    for p in range(points.shape[0]):
        bx, wx0, wx1, wx2, _, _, _ = _axis_weights(points[p, 0], origin[0], h)
        by, wy0, wy1, wy2, _, _, _ = _axis_weights(points[p, 1], origin[1], h)
        bz, wz0, wz1, wz2, _, _, _ = _axis_weights(points[p, 2], origin[2], h)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        wz = (wz0, wz1, wz2)
        for di in range(3):
            for dj in range(3):
                row = ((bx + di) * ny + (by + dj)) * nz + bz
                wij = wx[di] * wy[dj]
                for dk in range(3):
                    ww = wij * wz[dk]
                    idx = row + dk
                    node_mass[idx] += ww * masses[p]
                    node_vec[idx, 0] += ww * vectors[p, 0]
                    node_vec[idx, 1] += ww * vectors[p, 1]
                    node_vec[idx, 2] += ww * vectors[p, 2]
    return node_mass, node_vec


@njit(cache=True)
def gather_vec(points, node_vec, origin, h, dims):
    out = np.zeros((points.shape[0], 3))
    ny, nz = dims[1], dims[2]
    for p in range(points.shape[0]):
        bx, wx0, wx1, wx2, _, _, _ = _axis_weights(points[p, 0], origin[0], h)
        by, wy0, wy1, wy2, _, _, _ = _axis_weights(points[p, 1], origin[1], h)
        bz, wz0, wz1, wz2, _, _, _ = _axis_weights(points[p, 2], origin[2], h)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        wz = (wz0, wz1, wz2)
        for di in range(3):
            for dj in range(3):
                row = ((bx + di) * ny + (by + dj)) * nz + bz
                wij = wx[di] * wy[dj]
                for dk in range(3):
                    ww = wij * wz[dk]
                    idx = row + dk
                    out[p, 0] += ww * node_vec[idx, 0]
                    out[p, 1] += ww * node_vec[idx, 1]
                    out[p, 2] += ww * node_vec[idx, 2]
    return out


@njit(cache=True)
def gather_gradv(points, node_vec, origin, h, dims):
    out = np.zeros((points.shape[0], 3, 3))
    ny, nz = dims[1], dims[2]
    for p in range(points.shape[0]):
        bx, wx0, wx1, wx2, dx0, dx1, dx2 = _axis_weights(points[p, 0], origin[0], h)
        by, wy0, wy1, wy2, dy0, dy1, dy2 = _axis_weights(points[p, 1], origin[1], h)
        bz, wz0, wz1, wz2, dz0, dz1, dz2 = _axis_weights(points[p, 2], origin[2], h)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        wz = (wz0, wz1, wz2)
        dx = (dx0, dx1, dx2)
        dy = (dy0, dy1, dy2)
        dz = (dz0, dz1, dz2)
        for di in range(3):
            for dj in range(3):
                row = ((bx + di) * ny + (by + dj)) * nz + bz
                for dk in range(3):
                    idx = row + dk
                    g0 = dx[di] * wy[dj] * wz[dk]
                    g1 = wx[di] * dy[dj] * wz[dk]
                    g2 = wx[di] * wy[dj] * dz[dk]
                    for a in range(3):
                        va = node_vec[idx, a]
                        out[p, a, 0] += va * g0
                        out[p, a, 1] += va * g1
                        out[p, a, 2] += va * g2
    return out


@njit(cache=True)
def scatter_grad_force(points, coefs, dirs, origin, h, dims):
    n_nodes = dims[0] * dims[1] * dims[2]
    node_vec = np.zeros((n_nodes, 3))
    ny, nz = dims[1], dims[2]
    for p in range(points.shape[0]):
        bx, wx0, wx1, wx2, dx0, dx1, dx2 = _axis_weights(points[p, 0], origin[0], h)
        by, wy0, wy1, wy2, dy0, dy1, dy2 = _axis_weights(points[p, 1], origin[1], h)
        bz, wz0, wz1, wz2, dz0, dz1, dz2 = _axis_weights(points[p, 2], origin[2], h)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        wz = (wz0, wz1, wz2)
        dx = (dx0, dx1, dx2)
        dy = (dy0, dy1, dy2)
        dz = (dz0, dz1, dz2)
        for di in range(3):
            for dj in range(3):
                row = ((bx + di) * ny + (by + dj)) * nz + bz
                for dk in range(3):
                    idx = row + dk
                    s = (
                        dirs[p, 0] * dx[di] * wy[dj] * wz[dk]
                        + dirs[p, 1] * wx[di] * dy[dj] * wz[dk]
                        + dirs[p, 2] * wx[di] * wy[dj] * dz[dk]
                    )
                    node_vec[idx, 0] += coefs[p, 0] * s
                    node_vec[idx, 1] += coefs[p, 1] * s
                    node_vec[idx, 2] += coefs[p, 2] * s
    return node_vec


@njit(cache=True)
def stretch_forces(pos, edges, rest_len, k, n_verts):
    out = np.zeros((n_verts, 3))
    for e in range(edges.shape[0]):
        a, b = edges[e, 0], edges[e, 1]
        ex = pos[b, 0] - pos[a, 0]
        ey = pos[b, 1] - pos[a, 1]
        ez = pos[b, 2] - pos[a, 2]
        elen = np.sqrt(ex * ex + ey * ey + ez * ez)
        if elen < 1e-300:
            continue
        coef = k * (elen - rest_len[e]) / elen
        out[a, 0] += coef * ex
        out[a, 1] += coef * ey
        out[a, 2] += coef * ez
        out[b, 0] -= coef * ex
        out[b, 1] -= coef * ey
        out[b, 2] -= coef * ez
    return out


@njit(cache=True)
def bend_forces(pos, triples, rest_prev, rest_next, lbar, rest_kappa, alpha, n_verts):
    out = np.zeros((n_verts, 3))
    for t in range(triples.shape[0]):
        ip, i, inx = triples[t, 0], triples[t, 1], triples[t, 2]
        ep = pos[i] - pos[ip]
        en = pos[inx] - pos[i]
        c0 = ep[1] * en[2] - ep[2] * en[1]
        c1 = ep[2] * en[0] - ep[0] * en[2]
        c2 = ep[0] * en[1] - ep[1] * en[0]
        chi = rest_prev[t] * rest_next[t] + ep[0] * en[0] + ep[1] * en[1] + ep[2] * en[2]
        v0 = 2.0 * c0 / chi - rest_kappa[t, 0]
        v1 = 2.0 * c1 / chi - rest_kappa[t, 1]
        v2 = 2.0 * c2 / chi - rest_kappa[t, 2]
        cv = c0 * v0 + c1 * v1 + c2 * v2
        # en x v and v x ep
        exv0 = en[1] * v2 - en[2] * v1
        exv1 = en[2] * v0 - en[0] * v2
        exv2 = en[0] * v1 - en[1] * v0
        vxp0 = v1 * ep[2] - v2 * ep[1]
        vxp1 = v2 * ep[0] - v0 * ep[2]
        vxp2 = v0 * ep[1] - v1 * ep[0]
        inv1 = 4.0 / chi
        inv2 = 4.0 * cv / (chi * chi)
        scale = alpha / (2.0 * lbar[t])
        gp0 = scale * (inv1 * exv0 - inv2 * en[0])
        gp1 = scale * (inv1 * exv1 - inv2 * en[1])
        gp2 = scale * (inv1 * exv2 - inv2 * en[2])
        gn0 = scale * (inv1 * vxp0 - inv2 * ep[0])
        gn1 = scale * (inv1 * vxp1 - inv2 * ep[1])
        gn2 = scale * (inv1 * vxp2 - inv2 * ep[2])
        out[ip, 0] += gp0
        out[ip, 1] += gp1
        out[ip, 2] += gp2
        out[i, 0] += gn0 - gp0
        out[i, 1] += gn1 - gp1
        out[i, 2] += gn2 - gp2
        out[inx, 0] -= gn0
        out[inx, 1] -= gn1
        out[inx, 2] -= gn2
    return out


@njit(cache=True)
def signed_qr(mats):
    n = mats.shape[0]
    qs = np.empty_like(mats)
    rs = np.empty_like(mats)
    for e in range(n):
        q, r = np.linalg.qr(mats[e])
        for j in range(3):
            if r[j, j] < 0.0:
                for i in range(3):
                    q[i, j] = -q[i, j]
                    r[j, i] = -r[j, i]
        qs[e] = q
        rs[e] = r
    return qs, rs


@njit(cache=True)
def edge_strain_response(F, D, ab):
    a1, a2, a3, b1, b2, b3 = ab[0], ab[1], ab[2], ab[3], ab[4], ab[5]
    n = F.shape[0]
    d = np.empty_like(F)
    for e in range(n):
        d[e] = F[e] @ D[e]
    q, r = signed_qr(d)
    dpsi_dd = np.empty_like(F)
    psi = np.empty(n)
    rparts = np.empty((n, 6))
    for e in range(n):
        r11, r12, r13 = r[e, 0, 0], r[e, 0, 1], r[e, 0, 2]
        r22, r23, r33 = r[e, 1, 1], r[e, 1, 2], r[e, 2, 2]
        s22 = r22 - 1.0
        s33 = r33 - 1.0
        psi[e] = (
            a1 * r12 * r12
            + a2 * r12 * r13
            + a3 * r13 * r13
            + b1 * s22 * s22
            + b2 * s22 * s33
            + b3 * s33 * s33
        )
        G = np.zeros((3, 3))
        G[0, 1] = 2.0 * a1 * r12 + a2 * r13
        G[0, 2] = a2 * r12 + 2.0 * a3 * r13
        G[1, 1] = 2.0 * b1 * s22 + b2 * s33
        G[2, 2] = b2 * s22 + 2.0 * b3 * s33
        K = G @ r[e].T
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                if i < j:
                    M[i, j] = K[i, j]
                    M[j, i] = K[i, j]
                elif i == j:
                    M[i, j] = K[i, j]
        # inverse-transpose of the upper-triangular factor
        ia = 1.0 / r11
        id_ = 1.0 / r22
        ig = 1.0 / r33
        i01 = -r12 * ia * id_
        i12 = -r23 * id_ * ig
        i02 = (r12 * r23 - r13 * r22) * ia * id_ * ig
        rinv = np.zeros((3, 3))
        rinv[0, 0] = ia
        rinv[0, 1] = i01
        rinv[0, 2] = i02
        rinv[1, 1] = id_
        rinv[1, 2] = i12
        rinv[2, 2] = ig
        dpsi_dd[e] = q[e] @ (M @ rinv.T)
        rparts[e, 0] = r11
        rparts[e, 1] = r12
        rparts[e, 2] = r13
        rparts[e, 3] = r22
        rparts[e, 4] = r23
        rparts[e, 5] = r33
    return dpsi_dd, d, psi, rparts
