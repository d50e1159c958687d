"""Image-domain evaluation: thresholding, overlap metrics, reports.

Predicted k-space is transformed back with ifft2(ifftshift(.)), the
magnitude is binarized at 1.7x its mean, and the mask is scored against
the ground truth with DICE, directed Hausdorff distance (exact Euclidean
distance transform), accuracy, sensitivity and specificity. Slices whose
ground-truth brain is smaller than the area-scaled 5000-pixel cutoff are
excluded. Empty predicted masks against nonempty ground truth are
reported as failures, never averaged into the distance column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ctensor import ComplexTensor, ifft2, ifftshift
from .errors import ConfigError, ContractError, DimensionError

CSV_HEADER = ["dataset", "split", "n", "dice", "dhd", "acc", "sens", "spec",
              "failures"]
THRESHOLD_FACTOR = 1.7
BRAIN_PIXEL_CUTOFF_256 = 5000


def to_image(k: ComplexTensor) -> ComplexTensor:
    """Centered k-space back to the complex image domain."""
    return ifft2(ifftshift(k))


def binarize(img: ComplexTensor, factor: float = THRESHOLD_FACTOR) -> np.ndarray:
    """Mask of pixels whose magnitude exceeds factor times the image mean."""
    mag = img.abs()
    mag = mag.reshape(mag.shape[-2], mag.shape[-1])
    return mag > factor * mag.mean()


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """Overlap 2|X n Y| / (|X| + |Y|) in percent; 100 when both empty."""
    if x.shape != y.shape:
        raise DimensionError(f"mask shape mismatch: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(x, y).sum()) / total


def directed_hausdorff(x: np.ndarray, y: np.ndarray) -> float:
    """max over x of the distance to the nearest y pixel, in pixels.

    Returns inf (the failure marker) when x is empty and y is not.
    """
    if x.shape != y.shape:
        raise DimensionError(f"mask shape mismatch: {x.shape} vs {y.shape}")
    if not y.any():
        raise ContractError("directed Hausdorff undefined for empty reference")
    if not x.any():
        return math.inf
    dist = ndimage.distance_transform_edt(~y)
    return float(dist[x].max())


def confusion_metrics(x: np.ndarray, y: np.ndarray):
    """(accuracy, sensitivity, specificity) in percent, y is ground truth."""
    if x.shape != y.shape:
        raise DimensionError(f"mask shape mismatch: {x.shape} vs {y.shape}")
    tp = int(np.logical_and(x, y).sum())
    tn = int(np.logical_and(~x, ~y).sum())
    fp = int(np.logical_and(x, ~y).sum())
    fn = int(np.logical_and(~x, y).sum())
    acc = 100.0 * (tp + tn) / max(tp + tn + fp + fn, 1)
    sens = 100.0 * tp / (tp + fn) if tp + fn else 100.0
    spec = 100.0 * tn / (tn + fp) if tn + fp else 100.0
    return acc, sens, spec


def phase_error(pred_img: ComplexTensor, target_img: ComplexTensor,
                mask: np.ndarray) -> float:
    """Mean absolute wrapped phase difference over mask pixels, radians."""
    diff = pred_img * target_img.conj()
    ang = np.abs(diff.angle()).reshape(mask.shape)
    if not mask.any():
        return 0.0
    return float(ang[mask].mean())


def brain_pixel_cutoff(h: int, w: int) -> int:
    """Area-scaled version of the 5000-pixel slice exclusion rule."""
    return int(BRAIN_PIXEL_CUTOFF_256 * h * w / (256 * 256))


@dataclass
class SegMetrics:
    dice: float
    dhd: float
    accuracy: float
    sensitivity: float
    specificity: float
    n_slices: int
    failures: int = 0


def evaluate(dataset, indices, predict=None, stub_target: bool = False,
             batch_size: int = 32, threshold: float = THRESHOLD_FACTOR):
    """Score slices; returns (SegMetrics aggregate, per-slice row list).

    predict maps a [B, 1, H, W] ComplexTensor to the predicted k-space;
    stub_target instead scores the ground-truth k-space itself (pipeline
    oracle). Slices under the brain-pixel cutoff are skipped.
    """
    if not indices:
        raise ConfigError("evaluate needs a nonempty index list")
    if predict is None and not stub_target:
        raise ConfigError("evaluate needs a predictor or stub_target=True")
    h, w = dataset.shape
    cutoff = brain_pixel_cutoff(h, w)
    keep = [i for i in indices if dataset.index[i][2] >= cutoff]

    rows = []
    for lo in range(0, len(keep), batch_size):
        chunk = keep[lo:lo + batch_size]
        samples = [dataset[i] for i in chunk]
        if stub_target:
            pred_k = ComplexTensor(
                np.stack([s.k_target.re for s in samples]),
                np.stack([s.k_target.im for s in samples]))
        else:
            k_in = ComplexTensor(np.stack([s.k_in.re for s in samples]),
                                 np.stack([s.k_in.im for s in samples]))
            pred_k = predict(k_in)
        pred_imgs = to_image(pred_k)
        for j, s in enumerate(samples):
            pred_img = ComplexTensor(pred_imgs.re[j, 0], pred_imgs.im[j, 0])
            target_img = to_image(s.k_target)
            target_img = ComplexTensor(target_img.re[0], target_img.im[0])
            mask = binarize(pred_img, threshold)
            gt = s.brain_mask
            d = dice(mask, gt)
            acc, sens, spec = confusion_metrics(mask, gt)
            dhd = directed_hausdorff(mask, gt) if gt.any() else 0.0
            perr = phase_error(pred_img, target_img, gt)
            rows.append({
                "patient_id": s.patient_id, "slice_idx": s.slice_idx,
                "brain_pixels": s.brain_pixels, "dice": d, "dhd": dhd,
                "acc": acc, "sens": sens, "spec": spec, "phase_err": perr,
            })

    if not rows:
        raise ConfigError("no slices above the brain-pixel cutoff")
    failures = sum(1 for r in rows if math.isinf(r["dhd"]))
    finite_dhd = [r["dhd"] for r in rows if math.isfinite(r["dhd"])]
    agg = SegMetrics(
        dice=float(np.mean([r["dice"] for r in rows])),
        dhd=float(np.mean(finite_dhd)) if finite_dhd else math.inf,
        accuracy=float(np.mean([r["acc"] for r in rows])),
        sensitivity=float(np.mean([r["sens"] for r in rows])),
        specificity=float(np.mean([r["spec"] for r in rows])),
        n_slices=len(rows),
        failures=failures,
    )
    return agg, rows


def write_report_csv(path, dataset_name: str, split: str, agg: SegMetrics) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        writer.writerow([
            dataset_name, split, agg.n_slices,
            f"{agg.dice:.4f}", f"{agg.dhd:.4f}", f"{agg.accuracy:.4f}",
            f"{agg.sensitivity:.4f}", f"{agg.specificity:.4f}", agg.failures,
        ])


def write_slice_csv(path, rows) -> None:
    cols = ["patient_id", "slice_idx", "brain_pixels", "dice", "dhd", "acc",
            "sens", "spec", "phase_err"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["patient_id"], r["slice_idx"], r["brain_pixels"],
                             f"{r['dice']:.4f}", f"{r['dhd']:.4f}",
                             f"{r['acc']:.4f}", f"{r['sens']:.4f}",
                             f"{r['spec']:.4f}", f"{r['phase_err']:.6f}"])
