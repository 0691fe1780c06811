"""Numba kernels advancing blocks of walks.

All state is per replica; kernels never reduce across replicas, so a
replica's trajectory is bit-identical whatever chunk it is processed in.
Kernels return -1 on success, otherwise the global step that produced a
non-finite value.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

COEFF_FLOOR = 1e-300
TINY_SEP = 1e-8


@njit(cache=True, nogil=True)
def _opnorm(b):
    d = b.shape[0]
    if d == 2:
        # conformal/anticonformal split: no cancellation near scalar multiples of rotations
        p = math.hypot(b[0, 0] + b[1, 1], b[1, 0] - b[0, 1])
        q = math.hypot(b[0, 0] - b[1, 1], b[1, 0] + b[0, 1])
        return 0.5 * (p + q)
    _, s, _ = np.linalg.svd(np.ascontiguousarray(b))
    return s[0]


@njit(cache=True, nogil=True)
def _neumaier(hi, lo, x):
    t = hi + x
    if abs(hi) >= abs(x):
        lo += (hi - t) + x
    else:
        lo += (x - t) + hi
    return t, lo


@njit(cache=True, nogil=True)
def _apply(y, u, v):
    """v = y u; returns (log |y u|, |v| after optional rescaling, scale used)."""
    d = u.shape[0]
    nv2 = 0.0
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += y[i, j] * u[j]
        v[i] = acc
        nv2 += acc * acc
    nv = math.sqrt(nv2)
    if nv > 0.0 and nv < math.inf:
        return math.log(nv), nv, 1.0
    m = 0.0
    for i in range(d):
        for j in range(d):
            if abs(y[i, j]) > m:
                m = abs(y[i, j])
    nv2 = 0.0
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += (y[i, j] / m) * u[j]
        v[i] = acc
        nv2 += acc * acc
    nv = math.sqrt(nv2)
    return math.log(m) + math.log(nv), nv, m


@njit(cache=True, nogil=True)
def vector_block(mats, logscale, has_scale, nsteps, step0,
                 u, s, track_mat, bmat, logb,
                 ck, kp0, target, has_target,
                 center, has_center, extremes,
                 out_s, out_m, out_c, out_floor, record_points, out_pts):
    """Advance R vector walks (and optionally their matrix products) by ``nsteps``.

    u: (R, d) unit vectors; s: (R, 2) Neumaier pair for S_n;
    bmat: (R, d, d) normalized products with log scale logb: (R,);
    extremes: (R, 2) running max/min of S_k - k * center.
    """
    nrep = u.shape[0]
    d = u.shape[1]
    nck = ck.shape[0]
    v = np.empty(d)
    tmp = np.empty((d, d))
    for r in range(nrep):
        kp = kp0
        for t in range(nsteps):
            g = step0 + t + 1
            y = mats[r, t]
            if d == 2:
                v0 = y[0, 0] * u[r, 0] + y[0, 1] * u[r, 1]
                v1 = y[1, 0] * u[r, 0] + y[1, 1] * u[r, 1]
                nv = math.sqrt(v0 * v0 + v1 * v1)
                if nv > 0.0 and nv < math.inf:
                    lg = math.log(nv)
                    u[r, 0] = v0 / nv
                    u[r, 1] = v1 / nv
                else:
                    lg, nv, _ = _apply(y, u[r], v)
                    u[r, 0] = v[0] / nv
                    u[r, 1] = v[1] / nv
            else:
                lg, nv, _ = _apply(y, u[r], v)
                for i in range(d):
                    u[r, i] = v[i] / nv
            if has_scale:
                lg += logscale[r, t]
            if not (lg > -math.inf and lg < math.inf):
                return g
            s[r, 0], s[r, 1] = _neumaier(s[r, 0], s[r, 1], lg)
            if track_mat:
                f2 = 0.0
                for i in range(d):
                    for j in range(d):
                        acc = 0.0
                        for k in range(d):
                            acc += y[i, k] * bmat[r, k, j]
                        tmp[i, j] = acc
                        f2 += acc * acc
                f = math.sqrt(f2)
                if not (f > 0.0 and f < math.inf):
                    return g
                for i in range(d):
                    for j in range(d):
                        bmat[r, i, j] = tmp[i, j] / f
                logb[r] += math.log(f)
                if has_scale:
                    logb[r] += logscale[r, t]
            if has_center:
                val = (s[r, 0] + s[r, 1]) - g * center
                if val > extremes[r, 0]:
                    extremes[r, 0] = val
                if val < extremes[r, 1]:
                    extremes[r, 1] = val
            if kp < nck and ck[kp] == g:
                stot = s[r, 0] + s[r, 1]
                out_s[r, kp] = stot
                if track_mat:
                    out_m[r, kp] = logb[r] + math.log(_opnorm(bmat[r]))
                if has_target:
                    dot = 0.0
                    for i in range(d):
                        dot += u[r, i] * target[i]
                    dot = abs(dot)
                    if dot < COEFF_FLOOR:
                        out_floor[r, kp] = 1
                        dot = COEFF_FLOOR
                    out_c[r, kp] = stot + math.log(dot)
                if record_points:
                    for i in range(d):
                        out_pts[r, kp, i] = u[r, i]
                kp += 1
    return -1


@njit(cache=True, nogil=True)
def pair_block(mats, logscale, has_scale, nsteps, step0,
               ux, w, a, logd, sx, cum,
               ck, kp0, out_logd, out_cum, out_sx,
               kmax, out_inc):
    """Advance coupled two-point walks driven by the same matrices.

    Each pair is held in a tangent frame: x = ux (unit) and
    y = a * ux + b * w with w orthogonal to ux, a^2 + b^2 = 1 and
    b = exp(logd) = d(x, y).  The log distance is exact even after b
    underflows.  sx and cum are Neumaier pairs for log|A_n x| and
    log|A_n x| - log|A_n y|.
    """
    nrep = ux.shape[0]
    npair = ux.shape[1]
    d = ux.shape[2]
    nck = ck.shape[0]
    gx = np.empty(d)
    gw = np.empty(d)
    for r in range(nrep):
        for p in range(npair):
            kp = kp0
            for t in range(nsteps):
                g = step0 + t + 1
                y = mats[r, t]
                lg, nx, m = _apply(y, ux[r, p], gx)
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += (y[i, j] / m) * w[r, p, j]
                    gw[i] = acc
                for i in range(d):
                    gx[i] /= nx
                kdot = 0.0
                for i in range(d):
                    kdot += gw[i] * gx[i]
                for i in range(d):
                    gw[i] -= kdot * gx[i]
                k2 = 0.0
                for i in range(d):
                    k2 += gw[i] * gx[i]
                for i in range(d):
                    gw[i] -= k2 * gx[i]
                kdot += k2
                nr2 = 0.0
                for i in range(d):
                    nr2 += gw[i] * gw[i]
                nr = math.sqrt(nr2)
                kk = kdot / nx
                rho = nr / nx
                aa = a[r, p]
                b = math.exp(logd[r, p])
                if b > TINY_SEP:
                    c = aa + b * kk
                    e = b * rho
                    nrm = math.hypot(c, e)
                    inc = -math.log(nrm)
                    a[r, p] = c / nrm
                    logd[r, p] = math.log(e / nrm)
                else:
                    tt = 2.0 * aa * b * kk + b * b * (kk * kk + rho * rho - 1.0)
                    half = 0.5 * math.log1p(tt)
                    inc = -half
                    logd[r, p] = logd[r, p] + math.log(rho) - half
                    bn = math.exp(logd[r, p])
                    sgn = 1.0 if aa + b * kk >= 0.0 else -1.0
                    a[r, p] = sgn * math.sqrt(1.0 - bn * bn)
                if has_scale:
                    lg += logscale[r, t]
                if not (lg > -math.inf and lg < math.inf and logd[r, p] > -math.inf
                        and inc > -math.inf and inc < math.inf):
                    return g
                for i in range(d):
                    ux[r, p, i] = gx[i]
                    w[r, p, i] = gw[i] / nr
                sx[r, p, 0], sx[r, p, 1] = _neumaier(sx[r, p, 0], sx[r, p, 1], lg)
                cum[r, p, 0], cum[r, p, 1] = _neumaier(cum[r, p, 0], cum[r, p, 1], inc)
                if g <= kmax:
                    out_inc[r, p, g - 1] = inc
                if kp < nck and ck[kp] == g:
                    out_logd[r, p, kp] = logd[r, p]
                    out_cum[r, p, kp] = cum[r, p, 0] + cum[r, p, 1]
                    out_sx[r, p, kp] = sx[r, p, 0] + sx[r, p, 1]
                    kp += 1
    return -1
