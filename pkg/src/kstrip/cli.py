"""Command-line front end: gen-data, train, eval, infer, inspect.

Heavy imports happen inside the command handlers so that the
KSTRIP_THREADS cap can be applied to the numeric libraries before they
initialize. Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

__version__ = "0.1.0"


def _apply_thread_cap():
    cap = os.environ.get("KSTRIP_THREADS", "0")
    try:
        n = int(cap)
    except ValueError:
        n = 0
    if n > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
    return n


def _read_config_file(path):
    """key=value lines, '#' comments; keys use flag names with dashes."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(action, raw):
    if isinstance(action.default, bool) or action.const is True:
        return raw.lower() in ("1", "true", "yes", "on")
    conv = action.type or str
    if action.nargs in (2, "+", "*"):
        return [conv(v) for v in raw.replace(",", " ").split()]
    return conv(raw)


def _iter_actions(parser):
    for action in parser._actions:
        yield action
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                yield from sp._actions


def _merge_config(parser, argv):
    """Config file fills defaults; explicit flags win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        actions = {a.dest: a for a in _iter_actions(parser)}
        overrides = {}
        for key, raw in _read_config_file(known.config).items():
            if key in actions:
                overrides[key] = _coerce(actions[key], raw)
        for sub in (a for a in parser._actions
                    if isinstance(a, argparse._SubParsersAction)):
            for sp in sub.choices.values():
                sp.set_defaults(**{k: v for k, v in overrides.items()
                                   if any(a.dest == k for a in sp._actions)})
    return parser.parse_args(argv)


def _write_manifest(out_dir, command, config, seed, started, artifacts,
                    extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": f"kstrip {__version__}",
        "started": started,
        "ended": datetime.now(timezone.utc).isoformat(),
        "artifacts": [str(a) for a in artifacts],
    }
    if extra:
        manifest.update(extra)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / "manifest.json")


def _now():
    return datetime.now(timezone.utc).isoformat()


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    from .data import PhantomSpec, gen_dataset, split_patients, write_dataset
    from .errors import ConfigError

    if args.patients < 10:
        raise ConfigError(
            f"--patients must be >= 10 for the patient-wise split, got {args.patients}")
    started = _now()
    spec = PhantomSpec(size=(args.size, args.size), seed=args.seed,
                       pathology_prob=args.pathology_prob)
    samples = gen_dataset(spec, args.patients, args.slices)
    out = Path(args.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out, meta={
        "spec": spec.to_dict(), "patients": args.patients,
        "slices_per_patient": args.slices,
    })
    train, val, test = split_patients(range(args.patients), args.seed)
    print(f"wrote {out}: {args.patients} patients x {args.slices} slices "
          f"= {len(samples)} samples at {args.size}x{args.size}")
    print(f"split sizes (seed {args.seed}): train {len(train)} / "
          f"val {len(val)} / test {len(test)} patients")
    _write_manifest(out.parent if str(out.parent) else ".", "gen-data",
                    vars(args), args.seed, started, [out])
    return 0


def _model_from_args(args, h, w):
    import numpy as np
    from .model import KStripConfig, KStripModel

    config = KStripConfig(
        input_size=(h, w),
        base_channels=args.base_channels,
        levels=args.levels,
        blocks_per_level=args.blocks,
        decoder_blocks=args.decoder_blocks,
        bottleneck_channels=args.base_channels << args.levels,
        dropout_p=args.dropout,
    )
    return KStripModel(config, np.random.default_rng(
        np.random.SeedSequence([args.seed, 0x3D])))


_TRAIN_DEFAULTS = dict(levels=3, base_channels=32, blocks=4, batch_size=64,
                       epochs=150, lr_halve_every=50, aug_width=[5, 40])
_DESK_DEFAULTS = dict(levels=2, base_channels=8, blocks=2, batch_size=16,
                      epochs=50, lr_halve_every=25, aug_width=[1, 10])


def cmd_train(args):
    from .data import DatasetFile
    from .training import TrainConfig, train

    preset = _DESK_DEFAULTS if args.desk else _TRAIN_DEFAULTS
    for key, value in preset.items():
        if getattr(args, key) is None:
            setattr(args, key, value)

    started = _now()
    dataset = DatasetFile(args.data)
    h, w = dataset.shape
    model = _model_from_args(args, h, w)

    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        lr_halve_every=args.lr_halve_every, seed=args.seed,
        augment=not args.no_augment,
        aug_width=tuple(args.aug_width), grad_clip=args.grad_clip,
    )
    out_dir = Path(args.out)
    history = train(model, dataset, cfg, out_dir, resume=args.resume,
                    log_fn=print if args.verbose else None)
    final = history[-1] if history else {}
    print(f"trained {cfg.epochs} epochs; final train loss "
          f"{final.get('train_loss', float('nan')):.6g}, "
          f"val loss {final.get('val_loss', float('nan')):.6g}")
    _write_manifest(out_dir, "train", {**vars(args), **cfg.to_dict()},
                    args.seed, started,
                    [out_dir / "best.kstrip", out_dir / "last.kstrip",
                     out_dir / "train.log"])
    return 0


def cmd_eval(args):
    import numpy as np
    from .data import DatasetFile, split_patients
    from .evaluation import evaluate, write_report_csv, write_slice_csv
    from .model import load
    from .viz import save_panel

    started = _now()
    dataset = DatasetFile(args.data)
    splits = dict(zip(("train", "val", "test"),
                      split_patients(dataset.patient_ids(), args.seed)))
    wanted = set(splits[args.split])
    indices = [i for i, row in enumerate(dataset.index) if row[0] in wanted]

    if args.identity_stub:
        predict = None
    else:
        model = load(args.ckpt)
        predict = lambda k: model.forward(k, training=False).value

    agg, rows = evaluate(dataset, indices, predict=predict,
                         stub_target=args.identity_stub,
                         batch_size=args.batch_size, threshold=args.threshold)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [out_dir / "metrics.csv"]
    write_report_csv(out_dir / "metrics.csv", Path(args.data).stem, args.split, agg)
    if args.per_slice:
        write_slice_csv(out_dir / "slices.csv", rows)
        artifacts.append(out_dir / "slices.csv")
    if args.panels > 0:
        from .ctensor import ComplexTensor
        shown = indices[:args.panels]
        for n, i in enumerate(shown):
            s = dataset[i]
            if args.identity_stub:
                pred_k = s.k_target
            else:
                batched = ComplexTensor(s.k_in.re[None], s.k_in.im[None])
                out = predict(batched)
                pred_k = ComplexTensor(out.re[0], out.im[0])
            path = out_dir / f"panel_{n:03d}.png"
            save_panel(path, s.k_in, pred_k, s.brain_mask)
            artifacts.append(path)
    print(f"split {args.split}: n={agg.n_slices} dice={agg.dice:.2f}% "
          f"dhd={agg.dhd:.2f}px acc={agg.accuracy:.2f}% "
          f"sens={agg.sensitivity:.2f}% spec={agg.specificity:.2f}% "
          f"failures={agg.failures}")
    _write_manifest(out_dir, "eval", vars(args), args.seed, started, artifacts)
    return 0


def cmd_infer(args):
    import numpy as np
    from .ctensor import ComplexTensor
    from .errors import ContractError
    from .model import load
    from .viz import render_magnitude, render_phase, save_png
    from .evaluation import binarize, to_image

    started = _now()
    from .data import DatasetFile
    dataset = DatasetFile(args.data)
    if not 0 <= args.index < len(dataset):
        raise ContractError(f"--index {args.index} out of range [0, {len(dataset)})")
    model = load(args.ckpt)
    s = dataset[args.index]
    k_in = ComplexTensor(s.k_in.re[None], s.k_in.im[None])
    t0 = time.perf_counter()
    pred = model.forward(k_in, training=False).value
    seconds = time.perf_counter() - t0
    pred = ComplexTensor(pred.re[0], pred.im[0])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_path = out_dir / "pred_k.bin"
    with open(raw_path, "wb") as f:
        f.write(np.ascontiguousarray(pred.re, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(pred.im, dtype="<f8").tobytes())
    img = to_image(pred)
    save_png(out_dir / "pred_magnitude.png", render_magnitude(img))
    save_png(out_dir / "pred_phase.png", render_phase(img))
    save_png(out_dir / "pred_mask.png", binarize(img) * np.uint8(255))
    print(f"slice {args.index}: inference {seconds:.4f} s")
    _write_manifest(out_dir, "infer", vars(args), args.seed, started,
                    [raw_path, out_dir / "pred_magnitude.png",
                     out_dir / "pred_phase.png", out_dir / "pred_mask.png"],
                    extra={"seconds_per_slice": seconds})
    return 0


def cmd_inspect(args):
    from .ctensor import ComplexTensor
    from .errors import ContractError
    from .data import DatasetFile
    from .evaluation import to_image
    from .viz import render_k_log_magnitude, render_magnitude, save_png

    started = _now()
    dataset = DatasetFile(args.data)
    if not 0 <= args.index < len(dataset):
        raise ContractError(f"--index {args.index} out of range [0, {len(dataset)})")
    s = dataset[args.index]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(out_dir / "k_log.png", render_k_log_magnitude(s.k_in))
    img = to_image(s.k_in)
    save_png(out_dir / "image_magnitude.png",
             render_magnitude(ComplexTensor(img.re[0], img.im[0])))
    print(f"slice {args.index}: wrote k_log.png and image_magnitude.png")
    _write_manifest(out_dir, "inspect", vars(args), args.seed, started,
                    [out_dir / "k_log.png", out_dir / "image_magnitude.png"])
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="kstrip",
        description="Skull stripping in complex-valued k-space: synthetic "
                    "phantom data, training and evaluation.")
    parser.add_argument("--version", action="version",
                        version=f"kstrip {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--patients", type=int, default=20,
                   help="number of synthetic patients (>= 10)")
    p.add_argument("--slices", type=int, default=40, help="slices per patient")
    p.add_argument("--size", type=int, default=64,
                   help="square slice size, power of two")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--pathology-prob", type=float, default=0.3,
                   help="probability of a bright pathology blob per patient")
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("-o", "--output", required=True, help="output .ksds path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a dataset")
    p.add_argument("--data", required=True, help="input .ksds dataset")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--desk", action="store_true",
                   help="desk-scale preset: levels 2, base 8, blocks 2, "
                        "batch 16, 50 epochs, lr halves at 25")
    p.add_argument("--levels", type=int, default=None,
                   help="spectral pooling steps (default 3; desk 2)")
    p.add_argument("--base-channels", type=int, default=None,
                   help="first-level width (default 32; desk 8)")
    p.add_argument("--blocks", type=int, default=None,
                   help="residual blocks per encoder level and bottleneck "
                        "(default 4; desk 2)")
    p.add_argument("--decoder-blocks", type=int, default=None,
                   help="decoder blocks per level (default: same as --blocks)")
    p.add_argument("--dropout", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=None,
                   help="training epochs (default 150; desk 50)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="batch size (default 64; desk 16)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-halve-every", type=int, default=None,
                   help="epochs between lr halvings (default 50; desk 25)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true",
                   help="disable periphery augmentation")
    p.add_argument("--aug-width", type=int, nargs=2, default=None,
                   metavar=("LO", "HI"),
                   help="augmentation frame width range (default 5 40; desk 1 10)")
    p.add_argument("--grad-clip", type=float, default=0.0,
                   help="global-norm gradient clip (0 = off)")
    p.add_argument("--resume", default=None, help="resume from last.kstrip")
    p.add_argument("--verbose", action="store_true", help="echo log lines")
    p.add_argument("--config", help="key=value config file; flags override")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="checkpoint path")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0,
                   help="split seed (must match training)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--per-slice", action="store_true",
                   help="also write per-slice metrics CSV")
    p.add_argument("--panels", type=int, default=0,
                   help="export N figure-style PNG panels")
    p.add_argument("--identity-stub", action="store_true",
                   help="score the ground-truth k-space itself (pipeline oracle)")
    p.add_argument("--threshold", type=float, default=1.7,
                   help="binarization factor on the image mean")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--config", help="key=value config file; flags override")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run one slice through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True, help="dataset slice index")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file; flags override")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("inspect", help="render a dataset slice to PNG")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file; flags override")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    n = _apply_thread_cap()
    parser = build_parser()
    # peek at the subcommand to merge its config file before full parsing
    args = _merge_config(parser, argv)
    if n > 0:
        import numba
        numba.set_num_threads(n)

    from .errors import (ConfigError, ContractError, FormatError,
                         IntegrityError, KStripError)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, IntegrityError, KStripError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
