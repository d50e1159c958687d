"""Skull stripping directly in complex-valued MRI k-space."""

from .ctensor import ComplexTensor, fft2, fftshift, from_polar, ifft2, ifftshift

__version__ = "0.1.0"

__all__ = [
    "ComplexTensor", "fft2", "ifft2", "fftshift", "ifftshift", "from_polar",
    "__version__",
]
