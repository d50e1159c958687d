"""Numba inner loops for convolution and batch normalization.

The complex convolution is evaluated on stacked planes: an input
[B, 2C, H, W] holding [re..., im...] channels against a stacked real
kernel [2O, 2C, 3, 3] with block structure [[X, -Y], [Y, X]]. That turns
the complex product into one real convolution, and the adjoints are the
plain transposed/flipped real forms of the same kernel.

All prange loops write disjoint output slices, so results do not depend
on thread scheduling.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv3x3(xp, w, bias, out):
    """Correlation of padded xp [B, C, H+2, W+2] with w [O, C, 3, 3]."""
    B, C, Hp, Wp = xp.shape
    O = w.shape[0]
    H = Hp - 2
    W = Wp - 2
    for t in prange(B * O):
        b = t // O
        o = t % O
        bo = bias[o]
        for i in range(H):
            row = out[b, o, i]
            for j in range(W):
                row[j] = bo
            for c in range(C):
                x0 = xp[b, c, i]
                x1 = xp[b, c, i + 1]
                x2 = xp[b, c, i + 2]
                w00 = w[o, c, 0, 0]; w01 = w[o, c, 0, 1]; w02 = w[o, c, 0, 2]
                w10 = w[o, c, 1, 0]; w11 = w[o, c, 1, 1]; w12 = w[o, c, 1, 2]
                w20 = w[o, c, 2, 0]; w21 = w[o, c, 2, 1]; w22 = w[o, c, 2, 2]
                for j in range(W):
                    row[j] += (w00 * x0[j] + w01 * x0[j + 1] + w02 * x0[j + 2]
                               + w10 * x1[j] + w11 * x1[j + 1] + w12 * x1[j + 2]
                               + w20 * x2[j] + w21 * x2[j + 1] + w22 * x2[j + 2])


@njit(parallel=True, fastmath=True, cache=True)
def conv3x3_dw(xp, g, dw):
    """Kernel gradient: dw[o,c,u,v] = sum_{b,i,j} g[b,o,i,j] * xp[b,c,i+u,j+v]."""
    B, C, Hp, Wp = xp.shape
    O = g.shape[1]
    H = Hp - 2
    W = Wp - 2
    for t in prange(O * C):
        o = t // C
        c = t % C
        a00 = 0.0; a01 = 0.0; a02 = 0.0
        a10 = 0.0; a11 = 0.0; a12 = 0.0
        a20 = 0.0; a21 = 0.0; a22 = 0.0
        for b in range(B):
            for i in range(H):
                gr = g[b, o, i]
                x0 = xp[b, c, i]
                x1 = xp[b, c, i + 1]
                x2 = xp[b, c, i + 2]
                s00 = 0.0; s01 = 0.0; s02 = 0.0
                s10 = 0.0; s11 = 0.0; s12 = 0.0
                s20 = 0.0; s21 = 0.0; s22 = 0.0
                for j in range(W):
                    gv = gr[j]
                    s00 += gv * x0[j]; s01 += gv * x0[j + 1]; s02 += gv * x0[j + 2]
                    s10 += gv * x1[j]; s11 += gv * x1[j + 1]; s12 += gv * x1[j + 2]
                    s20 += gv * x2[j]; s21 += gv * x2[j + 1]; s22 += gv * x2[j + 2]
                a00 += s00; a01 += s01; a02 += s02
                a10 += s10; a11 += s11; a12 += s12
                a20 += s20; a21 += s21; a22 += s22
        dw[o, c, 0, 0] = a00; dw[o, c, 0, 1] = a01; dw[o, c, 0, 2] = a02
        dw[o, c, 1, 0] = a10; dw[o, c, 1, 1] = a11; dw[o, c, 1, 2] = a12
        dw[o, c, 2, 0] = a20; dw[o, c, 2, 1] = a21; dw[o, c, 2, 2] = a22


@njit(parallel=True, fastmath=True, cache=True)
def bn_stats(a, b, mom):
    """Per-channel means and centered second moments over batch and space.

    a, b: [B, C, H, W] planes. mom: output [C, 5] rows
    (mean_a, mean_b, var_a, var_b, cov_ab), variances biased (divide by N).
    """
    B, C, H, W = a.shape
    n = B * H * W
    for c in prange(C):
        sa = 0.0
        sb = 0.0
        for bb in range(B):
            for i in range(H):
                ra = a[bb, c, i]
                rb = b[bb, c, i]
                for j in range(W):
                    sa += ra[j]
                    sb += rb[j]
        ma = sa / n
        mb = sb / n
        p = 0.0
        r = 0.0
        q = 0.0
        for bb in range(B):
            for i in range(H):
                ra = a[bb, c, i]
                rb = b[bb, c, i]
                for j in range(W):
                    da = ra[j] - ma
                    db = rb[j] - mb
                    p += da * da
                    r += db * db
                    q += da * db
        mom[c, 0] = ma
        mom[c, 1] = mb
        mom[c, 2] = p / n
        mom[c, 3] = r / n
        mom[c, 4] = q / n


@njit(parallel=True, fastmath=True, cache=True)
def bn_apply(a, b, mean_a, mean_b, wrr, wri, wii,
             grr, gri, gii, bre, bim, out_a, out_b):
    """Whiten with the per-channel 2x2 matrix W, then apply affine."""
    B, C, H, W = a.shape
    for t in prange(B * C):
        bb = t // C
        c = t % C
        ma = mean_a[c]; mb = mean_b[c]
        w0 = wrr[c]; w1 = wri[c]; w2 = wii[c]
        g0 = grr[c]; g1 = gri[c]; g2 = gii[c]
        br = bre[c]; bi = bim[c]
        for i in range(H):
            ra = a[bb, c, i]
            rb = b[bb, c, i]
            oa = out_a[bb, c, i]
            ob = out_b[bb, c, i]
            for j in range(W):
                ca = ra[j] - ma
                cb = rb[j] - mb
                u = w0 * ca + w1 * cb
                v = w1 * ca + w2 * cb
                oa[j] = g0 * u + g1 * v + br
                ob[j] = g1 * u + g2 * v + bi


@njit(parallel=True, fastmath=True, cache=True)
def bn_bwd_reduce(a, b, go_a, go_b, mean_a, mean_b, wrr, wri, wii, red):
    """Per-channel reductions for the BN backward pass.

    red[c] = (sum go_a, sum go_b, sum go_a*u, sum go_a*v,
              sum go_b*u, sum go_b*v) with u, v the whitened planes.
    """
    B, C, H, W = a.shape
    for c in prange(C):
        ma = mean_a[c]; mb = mean_b[c]
        w0 = wrr[c]; w1 = wri[c]; w2 = wii[c]
        s0 = 0.0; s1 = 0.0; s2 = 0.0; s3 = 0.0; s4 = 0.0; s5 = 0.0
        for bb in range(B):
            for i in range(H):
                ra = a[bb, c, i]
                rb = b[bb, c, i]
                ga = go_a[bb, c, i]
                gb = go_b[bb, c, i]
                for j in range(W):
                    ca = ra[j] - ma
                    cb = rb[j] - mb
                    u = w0 * ca + w1 * cb
                    v = w1 * ca + w2 * cb
                    s0 += ga[j]
                    s1 += gb[j]
                    s2 += ga[j] * u
                    s3 += ga[j] * v
                    s4 += gb[j] * u
                    s5 += gb[j] * v
        red[c, 0] = s0; red[c, 1] = s1; red[c, 2] = s2
        red[c, 3] = s3; red[c, 4] = s4; red[c, 5] = s5


@njit(parallel=True, fastmath=True, cache=True)
def bn_bwd_dx(a, b, go_a, go_b, mean_a, mean_b, scal, dx_a, dx_b):
    """Input gradient from per-channel scalars.

    scal[c] = (e_aa, e_ab, e_ba, e_bb, m_a, m_b, cp, cq, cr):
    dx_a = e_aa*go_a + e_ab*go_b - m_a + 2*ca*cp + cb*cq
    dx_b = e_ba*go_a + e_bb*go_b - m_b + 2*cb*cr + ca*cq
    """
    B, C, H, W = a.shape
    for t in prange(B * C):
        bb = t // C
        c = t % C
        ma = mean_a[c]; mb = mean_b[c]
        e_aa = scal[c, 0]; e_ab = scal[c, 1]; e_ba = scal[c, 2]; e_bb = scal[c, 3]
        m_a = scal[c, 4]; m_b = scal[c, 5]
        cp = scal[c, 6]; cq = scal[c, 7]; cr = scal[c, 8]
        for i in range(H):
            ra = a[bb, c, i]
            rb = b[bb, c, i]
            ga = go_a[bb, c, i]
            gb = go_b[bb, c, i]
            oa = dx_a[bb, c, i]
            ob = dx_b[bb, c, i]
            for j in range(W):
                ca = ra[j] - ma
                cb = rb[j] - mb
                oa[j] = e_aa * ga[j] + e_ab * gb[j] - m_a + 2.0 * ca * cp + cb * cq
                ob[j] = e_ba * ga[j] + e_bb * gb[j] - m_b + 2.0 * cb * cr + ca * cq
