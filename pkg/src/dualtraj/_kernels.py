"""Numba kernels for the per-parameter dynamics bases.

Loops are written per sample over a flat batch dimension; arrays are small
(n joints, 4*(n+1) parameters) so the cost is dominated by the batch size.
"""

import numba
import numpy as np
from numba import njit

CORIOLIS_FD_STEP = 1e-6


@njit(cache=True)
def _single_mass_basis(lengths, q, out):
    """Fill out (P, n, n) with per-parameter mass-matrix contributions."""
    n = lengths.size
    phi = np.empty(n)
    acc = 0.0
    for j in range(n):
        acc += q[j]
        phi[j] = acc
    cphi = np.cos(phi)
    sphi = np.sin(phi)
    # tail[k] = sum_{j>=k} l_j * d(u(phi_j))/dphi
    tailx = np.zeros(n + 1)
    taily = np.zeros(n + 1)
    for k in range(n - 1, -1, -1):
        tailx[k] = tailx[k + 1] - lengths[k] * sphi[k]
        taily[k] = taily[k + 1] + lengths[k] * cphi[k]
    vx = np.empty(n)
    vy = np.empty(n)
    om = np.empty(n)
    for body in range(n + 1):
        e = body if body < n else n
        a = body if body < n else n - 1
        ca = cphi[a]
        sa = sphi[a]
        for k in range(n):
            if k < e:
                vx[k] = tailx[k] - tailx[e]
                vy[k] = taily[k] - taily[e]
            else:
                vx[k] = 0.0
                vy[k] = 0.0
            om[k] = 1.0 if k <= a else 0.0
        p0 = 4 * body
        for i in range(n):
            for j in range(n):
                out[p0 + 0, i, j] = vx[i] * vx[j] + vy[i] * vy[j]
                cross_x = vx[i] * om[j] + om[i] * vx[j]
                cross_y = vy[i] * om[j] + om[i] * vy[j]
                out[p0 + 1, i, j] = -sa * cross_x + ca * cross_y
                out[p0 + 2, i, j] = -ca * cross_x - sa * cross_y
                out[p0 + 3, i, j] = om[i] * om[j]


@njit(cache=True)
def mass_basis_nb(lengths, q2d):
    B, n = q2d.shape
    P = 4 * (n + 1)
    out = np.empty((B, P, n, n))
    for b in range(B):
        _single_mass_basis(lengths, q2d[b], out[b])
    return out


@njit(cache=True)
def gravity_basis_nb(lengths, gx, gy, q2d):
    B, n = q2d.shape
    P = 4 * (n + 1)
    out = np.zeros((B, P, n))
    for b in range(B):
        q = q2d[b]
        phi = np.empty(n)
        acc = 0.0
        for j in range(n):
            acc += q[j]
            phi[j] = acc
        cphi = np.cos(phi)
        sphi = np.sin(phi)
        tailx = np.zeros(n + 1)
        taily = np.zeros(n + 1)
        for k in range(n - 1, -1, -1):
            tailx[k] = tailx[k + 1] - lengths[k] * sphi[k]
            taily[k] = taily[k + 1] + lengths[k] * cphi[k]
        for body in range(n + 1):
            e = body if body < n else n
            a = body if body < n else n - 1
            ca = cphi[a]
            sa = sphi[a]
            p0 = 4 * body
            for k in range(n):
                if k < e:
                    out[b, p0 + 0, k] = -(
                        gx * (tailx[k] - tailx[e]) + gy * (taily[k] - taily[e])
                    )
                if k <= a:
                    out[b, p0 + 1, k] = gx * sa - gy * ca
                    out[b, p0 + 2, k] = gx * ca + gy * sa
    return out


@njit(cache=True)
def coriolis_basis_nb(lengths, q2d, dq2d):
    """Christoffel construction with dM/dq by central finite differences."""
    B, n = q2d.shape
    P = 4 * (n + 1)
    h = CORIOLIS_FD_STEP
    out = np.zeros((B, P, n, n))
    dM = np.empty((n, P, n, n))
    mp = np.empty((P, n, n))
    mm = np.empty((P, n, n))
    qp = np.empty(n)
    for b in range(B):
        q = q2d[b]
        dq = dq2d[b]
        for k in range(n):
            for j in range(n):
                qp[j] = q[j]
            qp[k] = q[k] + h
            _single_mass_basis(lengths, qp, mp)
            qp[k] = q[k] - h
            _single_mass_basis(lengths, qp, mm)
            for p in range(P):
                for i in range(n):
                    for j in range(n):
                        dM[k, p, i, j] = (mp[p, i, j] - mm[p, i, j]) / (2.0 * h)
        for p in range(P):
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for k in range(n):
                        acc += dq[k] * (
                            dM[k, p, i, j] + dM[j, p, i, k] - dM[i, p, j, k]
                        )
                    out[b, p, i, j] = 0.5 * acc
    return out


@njit(cache=True)
def dynamics_basis_nb(lengths, gx, gy, q2d, dq2d):
    """Fused mass/Coriolis/gravity bases for one batch of states."""
    Mb = mass_basis_nb(lengths, q2d)
    Cb = coriolis_basis_nb(lengths, q2d, dq2d)
    gb = gravity_basis_nb(lengths, gx, gy, q2d)
    return Mb, Cb, gb
