"""Complex L1 loss, Adam, the learning-rate schedule, and the epoch loop.

All randomness inside a run is keyed functionally on (seed, epoch, ...)
rather than drawn from a stateful stream, so resuming from the "last"
checkpoint reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import model as model_mod
from .autograd import GraphNode, backward, constant
from .ctensor import ComplexTensor
from .errors import ContractError, DimensionError, NumericError
from .data import apply_periphery, draw_periphery_params, split_patients


def complex_l1(pred: GraphNode, target) -> GraphNode:
    """Mean complex modulus of the elementwise difference."""
    tgt = target.value if isinstance(target, GraphNode) else target
    if pred.value.shape != tgt.shape:
        raise DimensionError(
            f"loss shape mismatch: {pred.value.shape} vs {tgt.shape}")
    d_re = pred.value.re - tgt.re
    d_im = pred.value.im - tgt.im
    r = np.hypot(d_re, d_im)
    n = r.size
    val = ComplexTensor(np.asarray(r.sum() / n), np.zeros(()))
    # unit-modulus direction of the difference; zero subgradient at r == 0
    inv = np.zeros_like(r)
    nz = r > 0.0
    inv[nz] = 1.0 / (n * r[nz])

    def rule_pred(g):
        c = g.re * inv
        return ComplexTensor(c * d_re, c * d_im)

    parents = [(pred, rule_pred)]
    if isinstance(target, GraphNode):
        def rule_tgt(g):
            c = g.re * inv
            return ComplexTensor(-c * d_re, -c * d_im)
        parents.append((target, rule_tgt))
    return GraphNode(val, parents)


def lr_schedule(epoch: int, base_lr: float = 1e-3, halve_every: int = 50) -> float:
    return base_lr * 0.5 ** (epoch // halve_every)


class Adam:
    """Adam with bias correction, applied to re and im planes independently."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: ComplexTensor.zeros(p.value.shape) for n, p in self.named_params}
        self.v = {n: ComplexTensor.zeros(p.value.shape) for n, p in self.named_params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.named_params:
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            m, v = self.m[name], self.v[name]
            for gp, mp, vp, xp in ((p.grad.re, m.re, v.re, p.value.re),
                                   (p.grad.im, m.im, v.im, p.value.im)):
                mp *= b1
                mp += (1.0 - b1) * gp
                vp *= b2
                vp += (1.0 - b2) * gp * gp
                xp -= lr * (mp / c1) / (np.sqrt(vp / c2) + self.eps)

    def state_tensors(self):
        out = [(f"optim/m/{n}", t) for n, t in self.m.items()]
        out += [(f"optim/v/{n}", t) for n, t in self.v.items()]
        return out

    def load_state(self, tensors: dict, step_count: int) -> None:
        for name, _ in self.named_params:
            for prefix, store in (("optim/m/", self.m), ("optim/v/", self.v)):
                t = tensors[prefix + name]
                store[name].re[...] = t.re
                store[name].im[...] = t.im
        self.step_count = step_count


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    lr_halve_every: int = 50
    seed: int = 0
    augment: bool = True
    aug_factor: tuple = (0.7, 1.3)
    aug_width: tuple = (5, 40)
    aug_pair: bool = True
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["aug_factor"] = list(self.aug_factor)
        d["aug_width"] = list(self.aug_width)
        return d


def _batch_tensors(dataset, indices, cfg: TrainConfig, epoch: int, augment: bool):
    kins, ktgts = [], []
    for idx in indices:
        s = dataset[idx]
        k_in, k_tgt = s.k_in, s.k_target
        if augment:
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, int(idx), 0xA6]))
            factor, width = draw_periphery_params(rng, cfg.aug_factor, cfg.aug_width)
            k_in = apply_periphery(k_in, factor, width)
            if cfg.aug_pair:
                k_tgt = apply_periphery(k_tgt, factor, width)
        kins.append(k_in)
        ktgts.append(k_tgt)
    k_in = ComplexTensor(np.stack([t.re for t in kins]),
                         np.stack([t.im for t in kins]))
    k_tgt = ComplexTensor(np.stack([t.re for t in ktgts]),
                          np.stack([t.im for t in ktgts]))
    return k_in, k_tgt


def _clip_grads(named_params, max_norm: float) -> None:
    total = 0.0
    for _, p in named_params:
        total += float((p.grad.re ** 2).sum() + (p.grad.im ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        s = max_norm / norm
        for _, p in named_params:
            p.grad.re *= s
            p.grad.im *= s


def eval_loss(model, dataset, indices, batch_size: int) -> float:
    """Mean complex L1 over the given samples, inference mode."""
    total, count = 0.0, 0
    for i in range(0, len(indices), batch_size):
        chunk = indices[i:i + batch_size]
        kins = [dataset[j].k_in for j in chunk]
        ktgt = [dataset[j].k_target for j in chunk]
        k_in = ComplexTensor(np.stack([t.re for t in kins]),
                             np.stack([t.im for t in kins]))
        k_t = ComplexTensor(np.stack([t.re for t in ktgt]),
                            np.stack([t.im for t in ktgt]))
        pred = model.forward(k_in, training=False)
        loss = complex_l1(pred, constant(k_t))
        total += float(loss.value.re) * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train(model, dataset, cfg: TrainConfig, out_dir, resume: str | None = None,
          log_fn=None):
    """Run the epoch loop; writes best/last checkpoints and train.log.

    Returns a history list with one record per epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"

    train_pat, val_pat, test_pat = split_patients(dataset.patient_ids(), cfg.seed)
    train_set, val_set = set(train_pat), set(val_pat)
    train_idx = [i for i, row in enumerate(dataset.index) if row[0] in train_set]
    val_idx = [i for i, row in enumerate(dataset.index) if row[0] in val_set]

    opt = Adam(model.named_parameters())
    start_epoch = 0
    best_val = float("inf")
    if resume is not None:
        header, tensors = model_mod.load_raw(resume)
        model_mod.restore_tensors(model, tensors, resume)
        extra = header["extra"]
        opt.load_state(tensors, extra["optim_step"])
        start_epoch = extra["epoch"]
        best_val = extra["best_val"]

    history = []
    log_mode = "a" if resume is not None else "w"
    with open(log_path, log_mode) as log:
        def emit(record):
            line = " ".join(f"{k}={v}" for k, v in record.items())
            log.write(line + "\n")
            log.flush()
            if log_fn:
                log_fn(line)

        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch, cfg.lr, cfg.lr_halve_every)
            order_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, 0xE0]))
            order = [train_idx[i] for i in order_rng.permutation(len(train_idx))]

            epoch_loss, seen = 0.0, 0
            for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = order[lo:lo + cfg.batch_size]
                k_in, k_tgt = _batch_tensors(dataset, batch, cfg, epoch, cfg.augment)
                drop_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, epoch, step, 0xD0]))
                pred = model.forward(k_in, training=True, rng=drop_rng)
                loss = complex_l1(pred, constant(k_tgt))
                loss_val = float(loss.value.re)
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"batch indices {batch}")
                model.zero_grads()
                backward(loss)
                if cfg.grad_clip > 0.0:
                    _clip_grads(opt.named_params, cfg.grad_clip)
                opt.step(lr)
                epoch_loss += loss_val * len(batch)
                seen += len(batch)

            train_loss = epoch_loss / max(seen, 1)
            emit({"epoch": epoch, "split": "train", "loss": f"{train_loss:.8e}",
                  "lr": f"{lr:.8e}", "seconds": f"{time.perf_counter() - t0:.2f}"})

            t1 = time.perf_counter()
            val_loss = eval_loss(model, dataset, val_idx, cfg.batch_size)
            emit({"epoch": epoch, "split": "val", "loss": f"{val_loss:.8e}",
                  "lr": f"{lr:.8e}", "seconds": f"{time.perf_counter() - t1:.2f}"})
            history.append({"epoch": epoch, "train_loss": train_loss,
                            "val_loss": val_loss, "lr": lr})

            improved = val_loss < best_val
            if improved:
                best_val = val_loss
            extra = {"epoch": epoch + 1, "best_val": best_val,
                     "optim_step": opt.step_count,
                     "train_config": cfg.to_dict()}
            model_mod.save(model, out_dir / "last.kstrip", extra=extra,
                           extra_tensors=opt.state_tensors())
            if improved:
                model_mod.save(model, out_dir / "best.kstrip", extra=extra,
                               extra_tensors=opt.state_tensors())
    return history
