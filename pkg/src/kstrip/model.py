"""The k-space skull-stripping U-Net: residual encoder with spectral
pooling, bottleneck, nearest-neighbor-upsampling decoder with skip
concatenation, and a 1x1 complex output head.

The network maps centered (fftshifted) k-space to centered k-space of
the same shape. Checkpoints are a little-endian binary container with
magic "KSTRIP01", a JSON header carrying the config and a named tensor
manifest, raw float64 planes (re then im per tensor), and a trailing
CRC-32 over the payload.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict, field

import numpy as np

from .autograd import GraphNode, concat_channels, leaf
from .ctensor import ComplexTensor
from .errors import ConfigError, DimensionError, FormatError, IntegrityError
from .layers import ComplexConv1x1, ComplexConv2d, ResidualBlock, spectral_pool, upsample_conv

CHECKPOINT_MAGIC = b"KSTRIP01"


@dataclass
class KStripConfig:
    input_size: tuple = (256, 256)
    base_channels: int = 32
    levels: int = 3
    blocks_per_level: int = 4
    decoder_blocks: int | None = None
    bottleneck_channels: int = 256
    dropout_p: float = 0.05
    bn_affine: bool = True

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        h, w = self.input_size
        f = 1 << self.levels
        if h % f or w % f:
            raise ConfigError(f"input size {h}x{w} not divisible by 2^levels={f}")
        if self.base_channels * f != self.bottleneck_channels:
            raise ConfigError(
                f"bottleneck_channels must be base_channels*2^levels "
                f"({self.base_channels * f}), got {self.bottleneck_channels}")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        if self.decoder_blocks is None:
            self.decoder_blocks = self.blocks_per_level

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return KStripConfig(**d)


class KStripModel:
    """Frequency-to-frequency segmentation network."""

    def __init__(self, config: KStripConfig, rng: np.random.Generator):
        self.config = config
        cfg = config
        width = lambda lvl: cfg.base_channels << lvl

        self.encoder = []
        in_ch = 1
        for lvl in range(cfg.levels):
            blocks = []
            for k in range(cfg.blocks_per_level):
                blocks.append(ResidualBlock(in_ch if k == 0 else width(lvl),
                                            width(lvl), rng,
                                            dropout_p=cfg.dropout_p,
                                            bn_affine=cfg.bn_affine))
            self.encoder.append(blocks)
            in_ch = width(lvl)

        self.bottleneck = []
        for k in range(cfg.blocks_per_level):
            self.bottleneck.append(ResidualBlock(
                in_ch if k == 0 else cfg.bottleneck_channels,
                cfg.bottleneck_channels, rng, bn_affine=cfg.bn_affine))

        self.up_convs = []
        self.decoder = []
        prev = cfg.bottleneck_channels
        for lvl in reversed(range(cfg.levels)):
            self.up_convs.append(ComplexConv2d(prev, width(lvl), rng))
            blocks = []
            for k in range(cfg.decoder_blocks):
                blocks.append(ResidualBlock(2 * width(lvl) if k == 0 else width(lvl),
                                            width(lvl), rng,
                                            bn_affine=cfg.bn_affine))
            self.decoder.append(blocks)
            prev = width(lvl)

        self.head = ComplexConv1x1(cfg.base_channels, 1, rng)

    # -- registry ---------------------------------------------------------

    def _modules(self):
        for lvl, blocks in enumerate(self.encoder):
            for k, blk in enumerate(blocks):
                yield f"enc{lvl}.block{k}", blk
        for k, blk in enumerate(self.bottleneck):
            yield f"bottleneck.block{k}", blk
        for i, (up, blocks) in enumerate(zip(self.up_convs, self.decoder)):
            lvl = self.config.levels - 1 - i
            yield f"dec{lvl}.up", up
            for k, blk in enumerate(blocks):
                yield f"dec{lvl}.block{k}", blk
        yield "head", self.head

    def named_parameters(self):
        out = []
        for prefix, mod in self._modules():
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        return out

    def named_buffers(self):
        out = []
        for prefix, mod in self._modules():
            if hasattr(mod, "buffers"):
                out += [(f"{prefix}.{n}", t) for n, t in mod.buffers()]
        return out

    def param_count(self) -> int:
        """Trainable real degrees of freedom (gamma leaves are real-only)."""
        total = 0
        for name, p in self.named_parameters():
            n = p.value.size
            total += n if ".gamma_" in name else 2 * n
        return total

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def forward(self, k_in, training: bool = False,
                rng: np.random.Generator | None = None) -> GraphNode:
        """Centered k-space [B, 1, H, W] to centered k-space, same shape."""
        if isinstance(k_in, ComplexTensor):
            k_in = leaf(k_in)
        shape = k_in.value.shape
        h, w = self.config.input_size
        if len(shape) != 4 or shape[1] != 1 or shape[2] != h or shape[3] != w:
            raise DimensionError(
                f"expected input [B, 1, {h}, {w}], got {list(shape)}")

        x = k_in
        skips = []
        for blocks in self.encoder:
            for blk in blocks:
                x = blk(x, training, rng)
            skips.append(x)
            x = spectral_pool(x)
        for blk in self.bottleneck:
            x = blk(x, training, rng)
        for i, (up, blocks) in enumerate(zip(self.up_convs, self.decoder)):
            x = upsample_conv(x, up)
            skip = skips[len(skips) - 1 - i]
            if x.value.shape[-2:] != skip.value.shape[-2:]:
                raise DimensionError("skip/decoder spatial mismatch")
            x = concat_channels(x, skip)
            for blk in blocks:
                x = blk(x, training, rng)
        return self.head(x)


def build(config: KStripConfig, rng: np.random.Generator) -> KStripModel:
    return KStripModel(config, rng)


# -- checkpoint io -----------------------------------------------------------

def _tensor_entries(model: KStripModel, extra_tensors=None):
    entries = [(f"param/{n}", p.value) for n, p in model.named_parameters()]
    entries += [(f"buffer/{n}", t) for n, t in model.named_buffers()]
    if extra_tensors:
        entries += list(extra_tensors)
    return entries


def save(model: KStripModel, path, extra: dict | None = None,
         extra_tensors=None) -> None:
    """Write a KSTRIP01 checkpoint; extra_tensors is a (name, tensor) list."""
    entries = _tensor_entries(model, extra_tensors)
    manifest = []
    offset = 0
    chunks = []
    for name, t in entries:
        manifest.append([name, list(t.shape), offset])
        for plane in (t.re, t.im):
            raw = np.ascontiguousarray(plane, dtype="<f8").tobytes()
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "config": model.config.to_dict(),
        "manifest": manifest,
        "extra": extra or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_raw(path):
    """Validate and parse a checkpoint; returns (header dict, tensor map)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a KSTRIP01 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
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
    tensors = {}
    for name, shape, offset in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + 2 * nbytes > len(payload):
            raise IntegrityError(f"{path}: manifest entry {name} out of bounds")
        re = np.frombuffer(payload, dtype="<f8", count=count,
                           offset=offset).reshape(shape).copy()
        im = np.frombuffer(payload, dtype="<f8", count=count,
                           offset=offset + nbytes).reshape(shape).copy()
        tensors[name] = ComplexTensor(re, im)
    return header, tensors


def load(path) -> KStripModel:
    """Reconstruct a model bit-exactly from a checkpoint."""
    header, tensors = load_raw(path)
    config = KStripConfig.from_dict(header["config"])
    model = KStripModel(config, np.random.default_rng(0))
    restore_tensors(model, tensors, path)
    return model


def restore_tensors(model: KStripModel, tensors: dict, path="checkpoint") -> None:
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {key}")
        t = tensors[key]
        if t.shape != p.value.shape:
            raise FormatError(f"{path}: shape mismatch for {key}")
        p.value.re[...] = t.re
        p.value.im[...] = t.im
    for name, buf in model.named_buffers():
        key = f"buffer/{name}"
        if key not in tensors:
            raise FormatError(f"{path}: missing tensor {key}")
        buf.re[...] = tensors[key].re
        buf.im[...] = tensors[key].im
