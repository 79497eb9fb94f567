"""Command-line interface binding the modules into reproducible workflows.

Commands: gen-phantom, train, eval, predict, gradcheck.  Every command is
deterministic under --seed; outputs land only under --out.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradsuite
from .checkpoint import load_arrays
from .data import PhantomSpec, gen_phantom, load_dataset, make_split, save_dataset
from .errors import (ConfigError, ContractError, DataError, DeterminismError,
                     DimensionError, NumericalError)
from .metrics import evaluate
from .pipeline import (CLASS_NAMES, NUM_CLASSES, build_model,
                       model_config_records, model_from_records)
from .trainer import TrainConfig, train

# fixed 11-color palette (hex documented in the README)
PALETTE = (
    (0x00, 0x00, 0x00),   # 0  background
    (0xE6, 0x19, 0x4B),   # 1  RNFL
    (0x3C, 0xB4, 0x4B),   # 2  GCL
    (0xFF, 0xE1, 0x19),   # 3  IPL
    (0x43, 0x63, 0xD8),   # 4  INL
    (0xF5, 0x82, 0x31),   # 5  OPL
    (0x91, 0x1E, 0xB4),   # 6  ONL
    (0x46, 0xF0, 0xF0),   # 7  IS/OS
    (0xF0, 0x32, 0xE6),   # 8  RPE
    (0xBC, 0xF6, 0x0C),   # 9  choroid
    (0xFF, 0xFF, 0xFF),   # 10 disc
)


def _read_config_file(path) -> dict:
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="mgunet",
                                     description="Two-stage multi-scale reasoning segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-phantom", help="generate a synthetic layered dataset")
    gen.add_argument("--spec", help="phantom spec file (key=value)")
    gen.add_argument("--n", type=int, required=True, help="number of samples")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, required=True)

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--config", help="key=value defaults, overridable by flags")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--epochs", type=int, default=50)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lambda", dest="lam", type=float, default=2.0)
    tr.add_argument("--ablation", choices=("one-stage", "two-stage"), default="two-stage")
    tr.add_argument("--no-grb", action="store_true")
    tr.add_argument("--no-msp", action="store_true")
    tr.add_argument("--base-channels", type=int, default=32)
    tr.add_argument("--resume", help="checkpoint to resume from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    ev.add_argument("--seed", type=int, default=0,
                    help="used to derive a split when the manifest has none")

    pr = sub.add_parser("predict", help="segment one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--scope", choices=gradsuite.SCOPES, default="op")
    gc.add_argument("--tol", type=float, default=None)
    gc.add_argument("--seed", type=int, default=0)

    # config file provides defaults; explicit flags win
    if "--config" in argv:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            conf = _read_config_file(known.config)
            for action in tr._actions:
                if action.dest in conf:
                    raw = conf[action.dest]
                    tr.set_defaults(**{action.dest: action.type(raw) if action.type else raw})
    return parser.parse_args(argv)


def cmd_gen_phantom(args) -> int:
    spec = PhantomSpec.from_file(args.spec) if args.spec else PhantomSpec()
    spec.seed = args.seed
    spec.validate()
    samples = gen_phantom(spec, args.n)
    subjects = {s.subject_id for s in samples}
    split_of = {}
    if len(subjects) >= 5:
        split_of = make_split(samples, args.seed).split_of()
    out = Path(args.out)
    save_dataset(out, samples, split_of=split_of)
    spec.to_file(out / "phantom.spec")

    hist = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        hist += np.bincount(s.label.ravel(), minlength=NUM_CLASSES)
    print(f"wrote {len(samples)} samples ({len(subjects)} subjects) to {out}")
    print("class pixel histogram:")
    for c in range(NUM_CLASSES):
        print(f"  {c:2d} {CLASS_NAMES[c]:<11s} {hist[c]}")
    print(f"  total {hist.sum()} = {len(samples)} x {spec.height} x {spec.width}")
    return 0


def _resolve_split(samples, split_of, part, seed):
    if part == "all":
        return samples
    have = {split_of.get(s.subject_id) for s in samples}
    if not have >= {"train", "val", "test"}:
        split_of = make_split(samples, seed).split_of()
    return [s for s in samples if split_of.get(s.subject_id) == part]


def cmd_train(args) -> int:
    samples, split_of = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    train_set = _resolve_split(samples, split_of, "train", args.seed)
    val_set = _resolve_split(samples, split_of, "val", args.seed)
    rng = np.random.default_rng(args.seed)
    model = build_model(args.ablation, rng, base_channels=args.base_channels,
                        grb=not args.no_grb, msp=not args.no_msp)

    mult = model.required_multiple()
    for s in train_set + val_set:
        h, w = s.image.shape
        if h % mult or w % mult:
            raise DimensionError(f"sample {s.sample_id}: {h}x{w} not divisible by {mult}")

    config = TrainConfig(epochs=args.epochs, lr0=args.lr, lam=args.lam, seed=args.seed)
    print(f"training {args.ablation} model (base={args.base_channels}, "
          f"grb={not args.no_grb}, msp={not args.no_msp}) on "
          f"{len(train_set)} train / {len(val_set)} val samples")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  lr={row['lr']:.2g}  total={row['total']:.4f}  "
              f"val_dice={row['val_mean_dice']:.4f}", flush=True)

    log = train(model, train_set, val_set, config, args.out,
                resume_from=args.resume, progress=progress,
                extra_records=model_config_records(model))
    print(f"best val dice {log.best_val_dice:.4f} at epoch {log.best_epoch} -> {log.best_path}")
    return 0


def _load_checkpointed_model(path):
    arrays = load_arrays(path)
    model = model_from_records(arrays, np.random.default_rng(0))
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ConfigError(f"{path}: checkpoint lacks parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ConfigError(f"{path}: shape mismatch for {name!r}: "
                              f"{arrays[name].shape} vs {p.data.shape}")
        p.data = arrays[name].copy()
    return model


def cmd_eval(args) -> int:
    model = _load_checkpointed_model(args.checkpoint)
    samples, split_of = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    part = _resolve_split(samples, split_of, args.split, args.seed)
    if not part:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    print(report.format_table())
    print(f"report written to {out / 'report.tsv'}")
    return 0


def _load_gray_image(path) -> np.ndarray:
    try:
        img = Image.open(path)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    arr = np.array(img.convert("I") if img.mode not in ("L", "I;16") else img)
    arr = arr.astype(np.float64)
    if arr.max() > 0:
        arr /= 65535.0 if arr.max() > 255 else 255.0
    return np.clip(arr, 0.0, 1.0)


def cmd_predict(args) -> int:
    model = _load_checkpointed_model(args.checkpoint)
    image = _load_gray_image(args.image)
    h, w = image.shape
    mult = model.required_multiple()
    floor_hw = model.min_input_hw()

    def target(n):
        return max(((n + mult - 1) // mult) * mult, floor_hw)

    th, tw = target(h), target(w)
    padded = np.pad(image, ((0, th - h), (0, tw - w)), mode="edge")
    pred = model.predict(padded)[:h, :w].astype(np.uint8)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    Image.fromarray(pred).save(out / f"{stem}_classmap.png")
    palette = np.array(PALETTE, dtype=np.float64)
    gray = np.repeat(image[:, :, None] * 255.0, 3, axis=2)
    overlay = np.clip(0.5 * gray + 0.5 * palette[pred], 0, 255).astype(np.uint8)
    Image.fromarray(overlay).save(out / f"{stem}_overlay.png")
    (out / f"{stem}_predict.txt").write_text(
        f"source={args.image}\noriginal_hw={h},{w}\npadded_hw={th},{tw}\n"
        f"pad_mode=replicate-edge\n")
    print(f"class map and overlay written under {out}")
    return 0


def cmd_gradcheck(args) -> int:
    ok, text = gradsuite.run_scope(args.scope, tol=args.tol, seed=args.seed)
    print(text)
    if not ok:
        raise NumericalError(f"gradcheck scope {args.scope!r} failed")
    return 0


_DISPATCH = {
    "gen-phantom": cmd_gen_phantom,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse_args(argv)
        return _DISPATCH[args.command](args)
    except (ConfigError, DimensionError, ContractError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, DeterminismError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
