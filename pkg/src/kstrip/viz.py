"""8-bit grayscale PNG rendering of images, masks and k-space panels."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .ctensor import ComplexTensor
from .evaluation import binarize, to_image


def to_u8(arr: np.ndarray) -> np.ndarray:
    """Linear rescale of a real array onto [0, 255]."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def save_png(path, arr_u8: np.ndarray) -> None:
    Image.fromarray(arr_u8, mode="L").save(path, format="PNG")


def render_k_log_magnitude(k: ComplexTensor) -> np.ndarray:
    """log(1+|k|) rescaled to [0, 255], the standard k-space rendering."""
    mag = k.log1p_abs()
    return to_u8(mag.reshape(mag.shape[-2], mag.shape[-1]))


def render_magnitude(img: ComplexTensor) -> np.ndarray:
    mag = img.abs()
    return to_u8(mag.reshape(mag.shape[-2], mag.shape[-1]))


def render_phase(img: ComplexTensor) -> np.ndarray:
    ang = img.angle()
    return to_u8(ang.reshape(ang.shape[-2], ang.shape[-1]))


def _grid(tiles, rows, cols, pad=2):
    h, w = tiles[0].shape
    canvas = np.zeros((rows * h + (rows - 1) * pad,
                       cols * w + (cols - 1) * pad), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = r * (h + pad), c * (w + pad)
        canvas[y:y + h, x:x + w] = tile
    return canvas


def save_panel(path, k_in: ComplexTensor, k_pred: ComplexTensor,
               gt_mask: np.ndarray) -> None:
    """Figure-style panel: images and masks on top, log k-space below."""
    img_in = to_image(k_in)
    img_pred = to_image(k_pred)
    pred_mask = binarize(img_pred)
    diff = np.logical_xor(pred_mask, gt_mask)
    tiles = [
        render_magnitude(img_in),
        render_magnitude(img_pred),
        (pred_mask * np.uint8(255)),
        render_k_log_magnitude(k_in),
        render_k_log_magnitude(k_pred),
        (diff * np.uint8(255)),
    ]
    save_png(path, _grid(tiles, 2, 3))
