"""Complex tensor value type: split re/im planes, elementwise math, 2D FFT.

Every array in the stack (k-space, images, activations, weights) is a
ComplexTensor: two float64 planes of identical shape. The 2D transforms
are an iterative radix-2 Cooley-Tukey FFT restricted to power-of-two
spatial sizes, batched over all leading dimensions. Forward is
unnormalized, the inverse carries the 1/(H*W) factor, so
ifft2(fft2(x)) == x.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UnsupportedSizeError

_MAX_RANK = 4


class ComplexTensor:
    """Dense complex array stored as separate float64 re/im planes.

    Treat instances as immutable: operations return new tensors and never
    write into their inputs.
    """

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = np.asarray(re, dtype=np.float64)
        im = np.zeros_like(re) if im is None else np.asarray(im, dtype=np.float64)
        if re.shape != im.shape:
            raise DimensionError(f"re/im shape mismatch: {re.shape} vs {im.shape}")
        if re.ndim > _MAX_RANK:
            raise DimensionError(f"rank {re.ndim} exceeds supported maximum {_MAX_RANK}")
        self.re = re
        self.im = im

    @property
    def shape(self) -> tuple:
        return self.re.shape

    @property
    def size(self) -> int:
        return self.re.size

    def copy(self) -> "ComplexTensor":
        return ComplexTensor(self.re.copy(), self.im.copy())

    def reshape(self, *shape) -> "ComplexTensor":
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        _check_same_shape(self, other)
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexTensor") -> "ComplexTensor":
        _check_same_shape(self, other)
        return ComplexTensor(self.re - other.re, self.im - other.im)

    def __mul__(self, other: "ComplexTensor") -> "ComplexTensor":
        """Elementwise complex product."""
        _check_same_shape(self, other)
        return ComplexTensor(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def scale(self, factor: float) -> "ComplexTensor":
        """Multiply both planes by a real scalar."""
        return ComplexTensor(self.re * factor, self.im * factor)

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.re.copy(), -self.im)

    def __neg__(self) -> "ComplexTensor":
        return ComplexTensor(-self.re, -self.im)

    # -- real-valued views ------------------------------------------------

    def abs(self) -> np.ndarray:
        """Modulus sqrt(re^2 + im^2), a real array."""
        return np.hypot(self.re, self.im)

    def angle(self) -> np.ndarray:
        """Argument in (-pi, pi]."""
        a = np.arctan2(self.im, self.re)
        # arctan2 can return -pi for (re < 0, im = -0.0); fold onto +pi
        if a.ndim == 0:
            return np.float64(np.pi) if a == -np.pi else a
        a[a == -np.pi] = np.pi
        return a

    def log1p_abs(self) -> np.ndarray:
        """log(1 + |z|), the usual rendering scale for k-space."""
        return np.log1p(self.abs())

    # -- reductions --------------------------------------------------------

    def sum(self) -> complex:
        return complex(self.re.sum(), self.im.sum())

    def mean(self) -> complex:
        return complex(self.re.mean(), self.im.mean())

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(shape) -> "ComplexTensor":
        return ComplexTensor(np.zeros(shape), np.zeros(shape))

    def allfinite(self) -> bool:
        return bool(np.isfinite(self.re).all() and np.isfinite(self.im).all())


def _check_same_shape(a: ComplexTensor, b: ComplexTensor):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def from_polar(magnitude: np.ndarray, phase: np.ndarray) -> ComplexTensor:
    """Assemble z = r * exp(i*phi) from magnitude and phase arrays."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape:
        raise DimensionError(
            f"magnitude/phase shape mismatch: {magnitude.shape} vs {phase.shape}"
        )
    return ComplexTensor(magnitude * np.cos(phase), magnitude * np.sin(phase))


# -- radix-2 FFT ------------------------------------------------------------

_plan_cache: dict = {}


def _fft_plan(n: int):
    """Bit-reversal permutation and per-stage twiddle factors for size n."""
    plan = _plan_cache.get(n)
    if plan is not None:
        return plan
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(levels):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    twiddles = []
    m = 2
    while m <= n:
        k = np.arange(m // 2)
        ang = -2.0 * np.pi * k / m
        twiddles.append((np.cos(ang), np.sin(ang)))
        m *= 2
    plan = (rev, twiddles)
    _plan_cache[n] = plan
    return plan


def _fft_last_axis(re: np.ndarray, im: np.ndarray, inverse: bool):
    """Iterative Cooley-Tukey along the last axis; operates on copies."""
    n = re.shape[-1]
    rev, twiddles = _fft_plan(n)
    re = re[..., rev].copy()
    im = im[..., rev].copy()
    lead = re.shape[:-1]
    re = re.reshape(-1, n)
    im = im.reshape(-1, n)
    m = 2
    for wr, wi in twiddles:
        if inverse:
            wi = -wi
        half = m // 2
        r = re.reshape(-1, n // m, m)
        i = im.reshape(-1, n // m, m)
        er, ei = r[..., :half], i[..., :half]
        orr, oi = r[..., half:], i[..., half:]
        tr = wr * orr - wi * oi
        ti = wr * oi + wi * orr
        orr[...] = er - tr
        oi[...] = ei - ti
        er += tr
        ei += ti
        m *= 2
    return re.reshape(*lead, n), im.reshape(*lead, n)


def _check_pow2_spatial(t: ComplexTensor):
    if t.re.ndim < 2:
        raise DimensionError("fft2 requires at least 2 dimensions")
    h, w = t.shape[-2], t.shape[-1]
    for n in (h, w):
        if n < 1 or n & (n - 1):
            raise UnsupportedSizeError(f"spatial size {n} is not a power of two")


def fft2(t: ComplexTensor) -> ComplexTensor:
    """Forward 2D DFT over the trailing two axes, batched over the rest."""
    _check_pow2_spatial(t)
    re, im = _fft_last_axis(t.re, t.im, inverse=False)
    re, im = np.swapaxes(re, -1, -2), np.swapaxes(im, -1, -2)
    re, im = _fft_last_axis(re, im, inverse=False)
    return ComplexTensor(np.ascontiguousarray(np.swapaxes(re, -1, -2)),
                         np.ascontiguousarray(np.swapaxes(im, -1, -2)))


def ifft2(t: ComplexTensor) -> ComplexTensor:
    """Inverse 2D DFT, normalized by 1/(H*W) so ifft2(fft2(x)) == x."""
    _check_pow2_spatial(t)
    h, w = t.shape[-2], t.shape[-1]
    re, im = _fft_last_axis(t.re, t.im, inverse=True)
    re, im = np.swapaxes(re, -1, -2), np.swapaxes(im, -1, -2)
    re, im = _fft_last_axis(re, im, inverse=True)
    s = 1.0 / (h * w)
    return ComplexTensor(np.ascontiguousarray(np.swapaxes(re, -1, -2)) * s,
                         np.ascontiguousarray(np.swapaxes(im, -1, -2)) * s)


def fftshift(t: ComplexTensor) -> ComplexTensor:
    """Circular shift moving index (0, 0) to the spatial center."""
    if t.re.ndim < 2:
        raise DimensionError("fftshift requires at least 2 dimensions")
    h2, w2 = t.shape[-2] // 2, t.shape[-1] // 2
    return ComplexTensor(np.roll(t.re, (h2, w2), axis=(-2, -1)),
                         np.roll(t.im, (h2, w2), axis=(-2, -1)))


def ifftshift(t: ComplexTensor) -> ComplexTensor:
    """Exact inverse of fftshift for all (including odd) sizes."""
    if t.re.ndim < 2:
        raise DimensionError("ifftshift requires at least 2 dimensions")
    h2, w2 = t.shape[-2] // 2, t.shape[-1] // 2
    return ComplexTensor(np.roll(t.re, (-h2, -w2), axis=(-2, -1)),
                         np.roll(t.im, (-h2, -w2), axis=(-2, -1)))
