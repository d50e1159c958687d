"""Synthetic complex-valued head phantoms and the on-disk dataset format.

Each patient gets one randomized anatomy (elliptical brain, surrounding
skull ring, tissue texture, optional bright pathology, smooth polynomial
phase field). Slices sweep the anatomy with an axis scale following a
spherical head profile, so end slices carry small brains. Images are
assembled as z = r * exp(i*phi) and stored as centered k-space pairs:
input with skull, target brain-only.

Dataset files: magic "KSDS01", JSON header with a per-sample index for
random access, raw little-endian float64 planes plus a bit-packed mask
per sample, trailing CRC-32 over the payload.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from .ctensor import ComplexTensor, fft2, fftshift, from_polar
from .errors import (ConfigError, DegenerateFrameError, DimensionError,
                     FormatError, IntegrityError)

DATASET_MAGIC = b"KSDS01"


@dataclass
class SliceSample:
    k_in: ComplexTensor          # [1, H, W] centered k-space, head with skull
    k_target: ComplexTensor      # [1, H, W] centered k-space, brain only
    brain_mask: np.ndarray       # [H, W] bool
    patient_id: int
    slice_idx: int
    brain_pixels: int


@dataclass
class PhantomSpec:
    size: tuple = (64, 64)
    brain_axis_range: tuple = (0.26, 0.36)      # semi-axis a, fraction of size
    brain_aspect_range: tuple = (0.72, 0.95)    # b = a * aspect
    skull_gap_range: tuple = (0.10, 0.16)       # ring inner edge = axes*(1+gap)
    skull_thickness_range: tuple = (0.05, 0.09)
    skull_intensity_range: tuple = (0.65, 0.90)
    brain_intensity_range: tuple = (0.40, 0.60)
    blob_count_range: tuple = (3, 6)
    blob_amp: float = 0.08
    blob_sigma_range: tuple = (0.06, 0.15)      # fraction of size
    pathology_prob: float = 0.3
    pathology_amp_range: tuple = (0.18, 0.30)
    pathology_sigma_range: tuple = (0.05, 0.10)
    phase_coeff_range: float = 0.8
    center_jitter: float = 0.03
    rotation_range: float = 0.4
    end_scale: float = 0.16
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(self.size)
        for name in ("brain_axis_range", "brain_aspect_range", "skull_gap_range",
                     "skull_thickness_range", "skull_intensity_range",
                     "brain_intensity_range", "blob_sigma_range",
                     "pathology_amp_range", "pathology_sigma_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"degenerate range for {name}: ({lo}, {hi})")

    def to_dict(self):
        return asdict(self)


_PHASE_BASIS = 6  # 1, u, v, u^2, u*v, v^2


def _phase_field(u, v, coeff):
    return (coeff[0] + coeff[1] * u + coeff[2] * v
            + coeff[3] * u * u + coeff[4] * u * v + coeff[5] * v * v)


def gen_patient(spec: PhantomSpec, patient_id: int, n_slices: int):
    """Deterministic slice stack for one synthetic patient."""
    if n_slices < 1:
        raise ConfigError("n_slices must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, patient_id]))
    h, w = spec.size
    scale_len = min(h, w)

    cy = h / 2.0 + rng.uniform(-1, 1) * spec.center_jitter * h
    cx = w / 2.0 + rng.uniform(-1, 1) * spec.center_jitter * w
    axis_a = rng.uniform(*spec.brain_axis_range) * scale_len
    axis_b = axis_a * rng.uniform(*spec.brain_aspect_range)
    theta = rng.uniform(-spec.rotation_range, spec.rotation_range)
    gap = rng.uniform(*spec.skull_gap_range)
    thick = rng.uniform(*spec.skull_thickness_range)
    skull_int = rng.uniform(*spec.skull_intensity_range)
    brain_int = rng.uniform(*spec.brain_intensity_range)

    n_blobs = rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1)
    blob_pos = rng.uniform(-0.6, 0.6, (n_blobs, 2))      # brain frame
    blob_amp = rng.uniform(-spec.blob_amp, spec.blob_amp, n_blobs)
    blob_sig = rng.uniform(*spec.blob_sigma_range, n_blobs) * scale_len

    has_path = rng.random() < spec.pathology_prob
    path_pos = rng.uniform(-0.45, 0.45, 2)
    path_amp = rng.uniform(*spec.pathology_amp_range)
    path_sig = rng.uniform(*spec.pathology_sigma_range) * scale_len

    phase_coeff = rng.uniform(-spec.phase_coeff_range, spec.phase_coeff_range,
                              _PHASE_BASIS)
    phase_drift = rng.uniform(-0.15, 0.15, _PHASE_BASIS)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    xr = ct * dx + st * dy
    yr = -st * dx + ct * dy
    uu = dx / (w / 2.0)
    vv = dy / (h / 2.0)

    samples = []
    for s in range(n_slices):
        tau = 0.0 if n_slices == 1 else -1.0 + 2.0 * s / (n_slices - 1)
        scale = np.sqrt(max(1.0 - tau * tau, spec.end_scale ** 2))
        a_s, b_s = axis_a * scale, axis_b * scale

        rho = (xr / a_s) ** 2 + (yr / b_s) ** 2
        mask = rho <= 1.0
        rin = (xr / (a_s * (1 + gap))) ** 2 + (yr / (b_s * (1 + gap))) ** 2
        rout = ((xr / (a_s * (1 + gap + thick))) ** 2
                + (yr / (b_s * (1 + gap + thick))) ** 2)
        ring = (rout <= 1.0) & (rin > 1.0)

        tissue = np.full((h, w), brain_int)
        for k in range(n_blobs):
            px = blob_pos[k, 0] * a_s
            py = blob_pos[k, 1] * b_s
            d2 = (xr - px) ** 2 + (yr - py) ** 2
            tissue += blob_amp[k] * np.exp(-d2 / (2.0 * (blob_sig[k] * scale) ** 2))
        if has_path:
            px = path_pos[0] * a_s
            py = path_pos[1] * b_s
            d2 = (xr - px) ** 2 + (yr - py) ** 2
            tissue += path_amp * np.exp(-d2 / (2.0 * (path_sig * scale) ** 2))
        tissue = np.clip(tissue, 0.30, 0.95)

        magnitude = np.zeros((h, w))
        magnitude[ring] = skull_int
        magnitude[mask] = tissue[mask]

        raw = _phase_field(uu, vv, phase_coeff + tau * phase_drift)
        lo, hi = raw.min(), raw.max()
        phase = (raw - lo) * (2.0 * np.pi / (hi - lo)) if hi > lo else np.zeros_like(raw)

        img_head = from_polar(magnitude, phase)
        img_brain = from_polar(magnitude * mask, phase)
        k_in = fftshift(fft2(img_head.reshape(1, h, w)))
        k_target = fftshift(fft2(img_brain.reshape(1, h, w)))
        samples.append(SliceSample(k_in, k_target, mask, patient_id, s,
                                   int(mask.sum())))
    return samples


def gen_dataset(spec: PhantomSpec, n_patients: int, n_slices: int):
    out = []
    for pid in range(n_patients):
        out.extend(gen_patient(spec, pid, n_slices))
    return out


# -- periphery augmentation ---------------------------------------------------

def draw_periphery_params(rng: np.random.Generator,
                          factor_range=(0.7, 1.3), width_range=(5, 40)):
    factor = rng.uniform(*factor_range)
    width = int(rng.integers(width_range[0], width_range[1] + 1))
    return factor, width


def apply_periphery(k: ComplexTensor, factor: float, width: int) -> ComplexTensor:
    h, w = k.shape[-2], k.shape[-1]
    if width >= min(h, w) / 2:
        raise DegenerateFrameError(
            f"frame width {width} covers half of {h}x{w}")
    out = k.copy()
    for plane in (out.re, out.im):
        plane[..., :width, :] *= factor
        plane[..., -width:, :] *= factor
        plane[..., width:-width, :width] *= factor
        plane[..., width:-width, -width:] *= factor
    return out


def periphery_augment(k: ComplexTensor, rng: np.random.Generator,
                      factor_range=(0.7, 1.3), width_range=(5, 40)) -> ComplexTensor:
    """Scale a random-width border frame of centered k-space by a random factor."""
    factor, width = draw_periphery_params(rng, factor_range, width_range)
    return apply_periphery(k, factor, width)


# -- patient-wise split --------------------------------------------------------

def split_patients(patient_ids, seed: int):
    """Disjoint shuffled 70/20/10 partition of patient ids."""
    ids = sorted(set(int(p) for p in patient_ids))
    n = len(ids)
    if n < 10:
        raise ConfigError(f"need >= 10 patients for a 70/20/10 split, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5711]))
    perm = rng.permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = round(0.7 * n)
    n_val = round(0.2 * n)
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# -- dataset file io -------------------------------------------------------------

def write_dataset(samples, path, meta: dict | None = None) -> None:
    if not samples:
        raise ConfigError("refusing to write an empty dataset")
    h, w = samples[0].k_in.shape[-2:]
    plane = h * w * 8
    maskbytes = (h * w + 7) // 8
    stride = 4 * plane + maskbytes
    index = []
    chunks = []
    for i, s in enumerate(samples):
        if s.k_in.shape != (1, h, w) or s.k_target.shape != (1, h, w):
            raise DimensionError(f"sample {i} has inconsistent shape")
        index.append([s.patient_id, s.slice_idx, s.brain_pixels, i * stride])
        for t in (s.k_in, s.k_target):
            chunks.append(np.ascontiguousarray(t.re, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(t.im, dtype="<f8").tobytes())
        chunks.append(np.packbits(s.brain_mask.reshape(-1)).tobytes())
    payload = b"".join(chunks)
    header = json.dumps({
        "version": 1,
        "shape": [h, w],
        "n": len(samples),
        "meta": meta or {},
        "index": index,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


class DatasetFile:
    """Validated random-access view of a KSDS01 file."""

    def __init__(self, path):
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < len(DATASET_MAGIC) + 8 or not blob.startswith(DATASET_MAGIC):
            raise FormatError(f"{path}: not a KSDS01 dataset")
        pos = len(DATASET_MAGIC)
        hlen = int.from_bytes(blob[pos:pos + 4], "little")
        pos += 4
        if len(blob) < pos + hlen + 4:
            raise IntegrityError(f"{path}: truncated header")
        header = json.loads(blob[pos:pos + hlen].decode())
        pos += hlen
        payload = blob[pos:-4]
        crc = int.from_bytes(blob[-4:], "little")
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"{path}: payload checksum mismatch")
        h, w = header["shape"]
        plane = h * w * 8
        maskbytes = (h * w + 7) // 8
        stride = 4 * plane + maskbytes
        if len(payload) != header["n"] * stride:
            raise IntegrityError(f"{path}: payload size mismatch")
        self.path = path
        self.shape = (h, w)
        self.meta = header["meta"]
        self.index = header["index"]
        self._payload = payload

    def __len__(self):
        return len(self.index)

    def patient_ids(self):
        return sorted(set(row[0] for row in self.index))

    def __getitem__(self, i) -> SliceSample:
        pid, sidx, npix, offset = self.index[i]
        h, w = self.shape
        count = h * w
        plane = count * 8

        def read_plane(k):
            return np.frombuffer(self._payload, dtype="<f8", count=count,
                                 offset=offset + k * plane).reshape(1, h, w).copy()

        k_in = ComplexTensor(read_plane(0), read_plane(1))
        k_target = ComplexTensor(read_plane(2), read_plane(3))
        maskoff = offset + 4 * plane
        maskbytes = (count + 7) // 8
        packed = np.frombuffer(self._payload, dtype=np.uint8, count=maskbytes,
                               offset=maskoff)
        mask = np.unpackbits(packed, count=count).astype(bool).reshape(h, w)
        return SliceSample(k_in, k_target, mask, pid, sidx, npix)


def read_dataset(path):
    ds = DatasetFile(path)
    return [ds[i] for i in range(len(ds))]
