"""Complex-valued network building blocks.

Complex convolution W * d with W = X + iY is evaluated as four real
correlations: re = X*a - Y*b, im = X*b + Y*a (the mathematically
consistent complex product). Internally the four are fused into one real
correlation on stacked planes, see _kernels.

All layers are shape-preserving 3x3/stride-1/padding-1 except spectral
pooling (central crop, halves the spatial size) and nearest-neighbor
upsampling (doubles it).
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .autograd import GraphNode, add, leaf
from .ctensor import ComplexTensor
from .errors import ContractError, DimensionError, NumericError


def _stack_planes(t: ComplexTensor) -> np.ndarray:
    return np.concatenate([t.re, t.im], axis=1)


def _stack_kernel(k: ComplexTensor) -> np.ndarray:
    """[[X, -Y], [Y, X]] block kernel realizing the complex product."""
    x, y = k.re, k.im
    top = np.concatenate([x, -y], axis=1)
    bot = np.concatenate([y, x], axis=1)
    return np.ascontiguousarray(np.concatenate([top, bot], axis=0))


def _unstack_kernel_grad(dwm: np.ndarray, out_ch: int, in_ch: int) -> ComplexTensor:
    """Collapse the stacked-kernel gradient back onto (X, Y)."""
    dx = dwm[:out_ch, :in_ch] + dwm[out_ch:, in_ch:]
    dy = dwm[out_ch:, :in_ch] - dwm[:out_ch, in_ch:]
    return ComplexTensor(dx, dy)


class ComplexConv2d:
    """3x3 complex convolution, stride 1, zero padding 1."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.in_ch = in_ch
        self.out_ch = out_ch
        bound = np.sqrt(1.0 / (in_ch * 9 * 2))
        self.kernel = leaf(ComplexTensor(
            rng.uniform(-bound, bound, (out_ch, in_ch, 3, 3)),
            rng.uniform(-bound, bound, (out_ch, in_ch, 3, 3))), requires_grad=True)
        self.bias = leaf(ComplexTensor.zeros((out_ch,)), requires_grad=True)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def __call__(self, x: GraphNode) -> GraphNode:
        return complex_conv2d(x, self.kernel, self.bias)


def complex_conv2d(x: GraphNode, kernel: GraphNode, bias: GraphNode) -> GraphNode:
    if x.value.re.ndim != 4:
        raise DimensionError(f"conv input must be [B, C, H, W], got {x.value.shape}")
    out_ch, in_ch = kernel.value.shape[:2]
    if x.value.shape[1] != in_ch:
        raise DimensionError(
            f"conv expects {in_ch} input channels, got {x.value.shape[1]}")
    if x.value.shape[2] < 3 or x.value.shape[3] < 3:
        raise DimensionError("conv input spatial dims must be >= 3")
    b, _, h, w = x.value.shape

    xp = np.pad(_stack_planes(x.value), ((0, 0), (0, 0), (1, 1), (1, 1)))
    wm = _stack_kernel(kernel.value)
    bias_st = np.concatenate([bias.value.re, bias.value.im])
    out = np.empty((b, 2 * out_ch, h, w))
    _kernels.conv3x3(xp, wm, bias_st, out)
    val = ComplexTensor(out[:, :out_ch], out[:, out_ch:])

    cache = {}

    def stacked_grad(g):
        if "gs" not in cache:
            cache["gs"] = _stack_planes(g)
        return cache["gs"]

    def rule_x(g):
        gp = np.pad(stacked_grad(g), ((0, 0), (0, 0), (1, 1), (1, 1)))
        wback = np.ascontiguousarray(wm.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dxs = np.empty((b, 2 * in_ch, h, w))
        _kernels.conv3x3(gp, wback, np.zeros(2 * in_ch), dxs)
        return ComplexTensor(dxs[:, :in_ch], dxs[:, in_ch:])

    def rule_w(g):
        dwm = np.empty_like(wm)
        _kernels.conv3x3_dw(xp, stacked_grad(g), dwm)
        return _unstack_kernel_grad(dwm, out_ch, in_ch)

    def rule_b(g):
        return ComplexTensor(g.re.sum(axis=(0, 2, 3)), g.im.sum(axis=(0, 2, 3)))

    return GraphNode(val, ((x, rule_x), (kernel, rule_w), (bias, rule_b)))


class ComplexConv1x1:
    """Pointwise complex convolution (channel mixing)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.in_ch = in_ch
        self.out_ch = out_ch
        bound = np.sqrt(1.0 / (in_ch * 2))
        self.kernel = leaf(ComplexTensor(
            rng.uniform(-bound, bound, (out_ch, in_ch)),
            rng.uniform(-bound, bound, (out_ch, in_ch))), requires_grad=True)
        self.bias = leaf(ComplexTensor.zeros((out_ch,)), requires_grad=True)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def __call__(self, x: GraphNode) -> GraphNode:
        return complex_conv1x1(x, self.kernel, self.bias)


def complex_conv1x1(x: GraphNode, kernel: GraphNode, bias: GraphNode) -> GraphNode:
    out_ch, in_ch = kernel.value.shape
    if x.value.shape[1] != in_ch:
        raise DimensionError(
            f"1x1 conv expects {in_ch} input channels, got {x.value.shape[1]}")
    b, _, h, w = x.value.shape
    k = kernel.value
    wm = np.block([[k.re, -k.im], [k.im, k.re]])
    xs = _stack_planes(x.value).reshape(b, 2 * in_ch, h * w)
    out = np.matmul(wm[None], xs)
    out += np.concatenate([bias.value.re, bias.value.im])[None, :, None]
    out = out.reshape(b, 2 * out_ch, h, w)
    val = ComplexTensor(out[:, :out_ch], out[:, out_ch:])

    cache = {}

    def stacked_grad(g):
        if "gs" not in cache:
            cache["gs"] = _stack_planes(g).reshape(b, 2 * out_ch, h * w)
        return cache["gs"]

    def rule_x(g):
        dxs = np.matmul(wm.T[None], stacked_grad(g)).reshape(b, 2 * in_ch, h, w)
        return ComplexTensor(dxs[:, :in_ch], dxs[:, in_ch:])

    def rule_w(g):
        dwm = np.matmul(stacked_grad(g), xs.transpose(0, 2, 1)).sum(axis=0)
        return _unstack_kernel_grad(dwm, out_ch, in_ch)

    def rule_b(g):
        return ComplexTensor(g.re.sum(axis=(0, 2, 3)), g.im.sum(axis=(0, 2, 3)))

    return GraphNode(val, ((x, rule_x), (kernel, rule_w), (bias, rule_b)))


def crelu(x: GraphNode) -> GraphNode:
    """ReLU on the real and imaginary planes independently."""
    mre = x.value.re > 0.0
    mim = x.value.im > 0.0
    val = ComplexTensor(np.where(mre, x.value.re, 0.0),
                        np.where(mim, x.value.im, 0.0))
    return GraphNode(val, (
        (x, lambda g: ComplexTensor(np.where(mre, g.re, 0.0),
                                    np.where(mim, g.im, 0.0))),
    ))


def spectral_pool(x: GraphNode) -> GraphNode:
    """Keep the central half-size block of centered k-space."""
    h, w = x.value.shape[-2], x.value.shape[-1]
    if h % 2 or w % 2:
        raise DimensionError(f"spectral_pool needs even spatial dims, got {h}x{w}")
    r0, c0 = h // 4, w // 4
    r1, c1 = r0 + h // 2, c0 + w // 2
    val = ComplexTensor(x.value.re[..., r0:r1, c0:c1].copy(),
                        x.value.im[..., r0:r1, c0:c1].copy())
    shape = x.value.shape

    def rule(g):
        out = ComplexTensor.zeros(shape)
        out.re[..., r0:r1, c0:c1] = g.re
        out.im[..., r0:r1, c0:c1] = g.im
        return out

    return GraphNode(val, ((x, rule),))


def upsample_nn(x: GraphNode) -> GraphNode:
    """2x nearest-neighbor replication of both planes."""
    def rep(p):
        return np.repeat(np.repeat(p, 2, axis=-2), 2, axis=-1)

    b, c, h, w = x.value.shape
    val = ComplexTensor(rep(x.value.re), rep(x.value.im))

    def rule(g):
        return ComplexTensor(
            g.re.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),
            g.im.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return GraphNode(val, ((x, rule),))


def upsample_conv(x: GraphNode, conv: ComplexConv2d) -> GraphNode:
    """Nearest-neighbor doubling followed by a complex convolution."""
    return conv(upsample_nn(x))


def complex_dropout(x: GraphNode, p: float, rng: np.random.Generator,
                    training: bool) -> GraphNode:
    """One Bernoulli mask applied to both planes jointly, inverted scaling."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.value.shape) >= p
    s = 1.0 / (1.0 - p)
    factor = np.where(keep, s, 0.0)
    val = ComplexTensor(x.value.re * factor, x.value.im * factor)
    return GraphNode(val, (
        (x, lambda g: ComplexTensor(g.re * factor, g.im * factor)),
    ))


class ComplexBatchNorm:
    """Whitening batch normalization on the joint (re, im) distribution.

    Per channel the 2x2 covariance V of (re, im) over batch and space is
    regularized by eps*I and inverted through the analytic principal
    square root of a symmetric 2x2 matrix:
    sqrt(A) = (A + sqrt(det A) I) / sqrt(trace A + 2 sqrt(det A)).
    Affine parameters are the symmetric 2x2 matrix gamma and complex
    shift beta, as in the covariance-whitening complex BN formulation.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1,
                 affine: bool = True):
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        g0 = 1.0 / np.sqrt(2.0)
        self.gamma_rr = leaf(ComplexTensor(np.full(ch, g0)), requires_grad=affine)
        self.gamma_ri = leaf(ComplexTensor.zeros((ch,)), requires_grad=affine)
        self.gamma_ii = leaf(ComplexTensor(np.full(ch, g0)), requires_grad=affine)
        self.beta = leaf(ComplexTensor.zeros((ch,)), requires_grad=affine)
        # raw running statistics; eps is applied at whitening time
        self.running_mean = ComplexTensor.zeros((ch,))
        self.running_v = ComplexTensor(
            np.stack([np.full(ch, 0.5), np.zeros(ch), np.full(ch, 0.5)], axis=1))

    def params(self):
        if not self.affine:
            return []
        return [("gamma_rr", self.gamma_rr), ("gamma_ri", self.gamma_ri),
                ("gamma_ii", self.gamma_ii), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_v", self.running_v)]

    def _whitening(self, vp, vr, q):
        """Inverse principal square root of [[vp, q], [q, vr]] (eps included)."""
        s = np.sqrt(vp * vr - q * q)
        t = np.sqrt(vp + vr + 2.0 * s)
        den = s * t
        return (vr + s) / den, -q / den, (vp + s) / den, s, t, den

    def __call__(self, x: GraphNode, training: bool) -> GraphNode:
        b, c, h, w = x.value.shape
        if c != self.ch:
            raise DimensionError(f"batchnorm expects {self.ch} channels, got {c}")
        n = b * h * w
        a_in, b_in = x.value.re, x.value.im

        if training:
            if n < 2:
                raise ContractError("training-mode batchnorm needs >= 2 values per channel")
            mom = np.empty((c, 5))
            _kernels.bn_stats(a_in, b_in, mom)
            if not np.isfinite(mom).all():
                raise NumericError("non-finite batch statistics")
            mean_a, mean_b = mom[:, 0].copy(), mom[:, 1].copy()
            p_raw, r_raw, q_raw = mom[:, 2], mom[:, 3], mom[:, 4]
            m = self.momentum
            self.running_mean.re *= 1.0 - m
            self.running_mean.re += m * mean_a
            self.running_mean.im *= 1.0 - m
            self.running_mean.im += m * mean_b
            rv = self.running_v.re
            rv *= 1.0 - m
            rv[:, 0] += m * p_raw
            rv[:, 1] += m * q_raw
            rv[:, 2] += m * r_raw
        else:
            mean_a = self.running_mean.re.copy()
            mean_b = self.running_mean.im.copy()
            rv = self.running_v.re
            p_raw, q_raw, r_raw = rv[:, 0].copy(), rv[:, 1].copy(), rv[:, 2].copy()

        vp = p_raw + self.eps
        vr = r_raw + self.eps
        q = q_raw.copy() if not training else q_raw
        wrr, wri, wii, s, t, den = self._whitening(vp, vr, q)

        if self.affine:
            grr = self.gamma_rr.value.re
            gri = self.gamma_ri.value.re
            gii = self.gamma_ii.value.re
            bre = self.beta.value.re
            bim = self.beta.value.im
        else:
            grr = np.ones(c)
            gri = np.zeros(c)
            gii = np.ones(c)
            bre = np.zeros(c)
            bim = np.zeros(c)

        out_a = np.empty_like(a_in)
        out_b = np.empty_like(b_in)
        _kernels.bn_apply(a_in, b_in, mean_a, mean_b, wrr, wri, wii,
                          grr, gri, gii, bre, bim, out_a, out_b)
        val = ComplexTensor(out_a, out_b)

        cache = {}

        def reductions(g):
            if "red" not in cache:
                red = np.empty((c, 6))
                _kernels.bn_bwd_reduce(a_in, b_in, g.re, g.im, mean_a, mean_b,
                                       wrr, wri, wii, red)
                cache["red"] = red
            return cache["red"]

        def rule_x(g):
            red = reductions(g)
            sa, sb = red[:, 0], red[:, 1]
            e_aa = wrr * grr + wri * gri
            e_ab = wrr * gri + wri * gii
            e_ba = wri * grr + wii * gri
            e_bb = wri * gri + wii * gii
            scal = np.zeros((c, 9))
            scal[:, 0], scal[:, 1], scal[:, 2], scal[:, 3] = e_aa, e_ab, e_ba, e_bb
            if training:
                au, av, bu, bv = red[:, 2], red[:, 3], red[:, 4], red[:, 5]
                # reductions of gu, gv against whitened planes
                guu = grr * au + gri * bu
                guv = grr * av + gri * bv
                gvu = gri * au + gii * bu
                gvv = gri * av + gii * bv
                # convert to reductions against the centered planes
                detw = wrr * wii - wri * wri
                gu_ca = (wii * guu - wri * guv) / detw
                gu_cb = (-wri * guu + wrr * guv) / detw
                gv_ca = (wii * gvu - wri * gvv) / detw
                gv_cb = (-wri * gvu + wrr * gvv) / detw
                dwrr = gu_ca
                dwri = gu_cb + gv_ca
                dwii = gv_cb
                # jacobian of (wrr, wri, wii) wrt (vp, q, vr)
                sp = vr / (2.0 * s)
                sr = vp / (2.0 * s)
                sq = -q / s
                tp = (1.0 + 2.0 * sp) / (2.0 * t)
                tr = (1.0 + 2.0 * sr) / (2.0 * t)
                tq = sq / t
                dden_p = sp * t + s * tp
                dden_r = sr * t + s * tr
                dden_q = sq * t + s * tq
                den2 = den * den
                rs = vr + s
                ps = vp + s
                dp = (dwrr * (sp * den - rs * dden_p)
                      + dwii * ((1.0 + sp) * den - ps * dden_p)
                      + dwri * (q * dden_p)) / den2
                dr = (dwrr * ((1.0 + sr) * den - rs * dden_r)
                      + dwii * (sr * den - ps * dden_r)
                      + dwri * (q * dden_r)) / den2
                dq = (dwrr * (sq * den - rs * dden_q)
                      + dwii * (sq * den - ps * dden_q)
                      + dwri * (-den + q * dden_q)) / den2
                scal[:, 4] = (e_aa * sa + e_ab * sb) / n
                scal[:, 5] = (e_ba * sa + e_bb * sb) / n
                scal[:, 6] = dp / n
                scal[:, 7] = dq / n
                scal[:, 8] = dr / n
            dx_a = np.empty_like(a_in)
            dx_b = np.empty_like(b_in)
            _kernels.bn_bwd_dx(a_in, b_in, g.re, g.im, mean_a, mean_b, scal,
                               dx_a, dx_b)
            return ComplexTensor(dx_a, dx_b)

        parents = [(x, rule_x)]
        if self.affine:
            def zerod(v):
                return ComplexTensor(v, np.zeros_like(v))

            parents += [
                (self.gamma_rr, lambda g: zerod(reductions(g)[:, 2])),
                (self.gamma_ri, lambda g: zerod(reductions(g)[:, 3]
                                                + reductions(g)[:, 4])),
                (self.gamma_ii, lambda g: zerod(reductions(g)[:, 5])),
                (self.beta, lambda g: ComplexTensor(reductions(g)[:, 0],
                                                    reductions(g)[:, 1])),
            ]
        return GraphNode(val, parents)


class ResidualBlock:
    """Two conv -> cReLU -> batchnorm stages plus a shortcut.

    The shortcut is the identity when channel counts match, otherwise a
    1x1 complex projection. Dropout (encoder blocks only) is applied to
    the convolutional branch after the second batchnorm.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dropout_p: float = 0.0, bn_affine: bool = True):
        self.conv1 = ComplexConv2d(in_ch, out_ch, rng)
        self.bn1 = ComplexBatchNorm(out_ch, affine=bn_affine)
        self.conv2 = ComplexConv2d(out_ch, out_ch, rng)
        self.bn2 = ComplexBatchNorm(out_ch, affine=bn_affine)
        self.proj = ComplexConv1x1(in_ch, out_ch, rng) if in_ch != out_ch else None
        self.dropout_p = dropout_p

    def params(self):
        out = []
        for prefix, mod in (("conv1", self.conv1), ("bn1", self.bn1),
                            ("conv2", self.conv2), ("bn2", self.bn2)):
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        if self.proj is not None:
            out += [(f"proj.{n}", p) for n, p in self.proj.params()]
        return out

    def buffers(self):
        out = [(f"bn1.{n}", t) for n, t in self.bn1.buffers()]
        out += [(f"bn2.{n}", t) for n, t in self.bn2.buffers()]
        return out

    def __call__(self, x: GraphNode, training: bool,
                 rng: np.random.Generator | None = None) -> GraphNode:
        h = self.bn1(crelu(self.conv1(x)), training)
        h = self.bn2(crelu(self.conv2(h)), training)
        if self.dropout_p > 0.0:
            h = complex_dropout(h, self.dropout_p, rng, training)
        shortcut = x if self.proj is None else self.proj(x)
        return add(h, shortcut)
