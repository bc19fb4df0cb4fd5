"""Command-line entry point: ``ldgnet <command> ...``.

Every command writes its outputs atomically and exits 0 on success; failures
print a single ``ldgnet: error: ...`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import trainer
from .hsidata import (
    FormatError,
    SynthSpec,
    atomic_write_bytes,
    generate_synthetic_pair,
    load_cube,
    load_labels,
    save_pair,
    smooth_class_means,
)
from .model import ModelFormatError, load_model, save_model
from .textpipe import DEFAULT_TEMPLATE, class_meta_json, load_class_meta, synthetic_class_meta

log = logging.getLogger("ldgnet")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# ten distinguishable colours; ids beyond the list need an explicit palette
DEFAULT_PALETTE = {
    1: (230, 25, 75),
    2: (60, 180, 75),
    3: (255, 225, 25),
    4: (0, 130, 200),
    5: (245, 130, 48),
    6: (145, 30, 180),
    7: (70, 240, 240),
    8: (240, 50, 230),
    9: (210, 245, 60),
    10: (250, 190, 212),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def render_map(grid, palette: dict[int, tuple[int, int, int]]) -> bytes:
    """Binary P6 PPM of a class-index grid; id 0 is black."""
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2:
        raise ValueError("class map must be 2-d")
    h, w = grid.shape
    top = max(int(grid.max(initial=0)), max(palette, default=0))
    lut = np.zeros((top + 1, 3), dtype=np.uint8)
    for cid, rgb in palette.items():
        if cid < 0 or len(rgb) != 3 or not all(0 <= int(c) <= 255 for c in rgb):
            raise ValueError(f"bad palette entry {cid}: {rgb}")
        lut[cid] = rgb
    missing = sorted(set(np.unique(grid).tolist()) - set(palette) - {0})
    if missing or grid.min(initial=0) < 0:
        raise ValueError(f"class ids without a palette colour: {missing or [int(grid.min())]}")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + lut[grid].tobytes()


def parse_palette(obj) -> dict[int, tuple[int, int, int]]:
    """``{"1": [r, g, b], ...}`` or a list whose i-th entry colours class i+1."""
    if isinstance(obj, list):
        items = {i + 1: c for i, c in enumerate(obj)}
    elif isinstance(obj, dict):
        try:
            items = {int(k): c for k, c in obj.items()}
        except ValueError as e:
            raise ValueError(f"palette keys must be class ids: {e}") from None
    else:
        raise ValueError("palette must be a JSON object or list")
    out = {}
    for cid, rgb in items.items():
        if not isinstance(rgb, list) or len(rgb) != 3 or not all(isinstance(c, int) and 0 <= c <= 255 for c in rgb):
            raise ValueError(f"palette entry {cid} must be [r, g, b] with 0..255 integers")
        out[cid] = tuple(rgb)
    return out


def _csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2) + "\n").encode("utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None


def load_train_config(path: Path | None) -> trainer.TrainConfig:
    if path is None:
        return trainer.TrainConfig()
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return trainer.TrainConfig.from_dict(obj)


def _load_scene(cube_path: Path, labels_path: Path):
    cube, labels = load_cube(cube_path), load_labels(labels_path)
    if labels.ids.shape != (cube.height, cube.width):
        raise ValueError(f"{labels_path}: label raster {labels.ids.shape} does not match cube {(cube.height, cube.width)}")
    return cube, labels


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _shift(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--shift expects GAIN,OFFSET,NONLIN")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--shift values must be numbers: {text!r}") from None


def cmd_synth(args) -> None:
    kw = {"seed": args.seed}
    if args.classes is not None:
        kw["classes"] = args.classes
    if args.bands is not None:
        kw["bands"] = args.bands
    if args.shift is not None:
        kw["gain"], kw["offset"], kw["nonlinearity"] = args.shift
    spec = SynthSpec(**kw)
    pair = generate_synthetic_pair(spec)
    means = smooth_class_means(
        spec.classes, spec.bands, np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(3)[0])
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_pair(pair, out)
    metas = synthetic_class_meta(means)
    atomic_write_bytes(out / "meta.json", _json_bytes(class_meta_json(metas, DEFAULT_TEMPLATE)))
    atomic_write_bytes(out / "synth.json", _json_bytes(spec.to_json()))
    palette = {str(k): list(v) for k, v in DEFAULT_PALETTE.items() if k <= spec.classes}
    if spec.classes <= len(DEFAULT_PALETTE):
        atomic_write_bytes(out / "palette.json", _json_bytes(palette))


def cmd_train(args) -> None:
    config = load_train_config(args.config)
    metas, template = load_class_meta(args.meta)
    cube, labels = _load_scene(args.src, args.labels)
    result = trainer.fit(cube, labels, metas, template, config)
    save_model(result.model, args.out)
    report = {
        "config": config.to_dict(),
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "validation": result.val_metrics.to_json(),
        "history": result.history,
    }
    atomic_write_bytes(Path(str(args.out) + ".json"), _json_bytes(report))


def cmd_eval(args) -> None:
    model = load_model(args.model)
    cube, labels = _load_scene(args.tgt, args.labels)
    metrics = trainer.evaluate(model, cube, labels)
    atomic_write_bytes(args.out, _json_bytes(metrics.to_json()))


def cmd_map(args) -> None:
    model = load_model(args.model)
    cube = load_cube(args.tgt)
    palette = parse_palette(_read_json(args.palette)) if args.palette else DEFAULT_PALETTE
    mask = None
    if args.labels is not None:
        labels = load_labels(args.labels)
        mask = labels.ids > 0
    grid = trainer.predict_map(model, cube, mask)
    atomic_write_bytes(args.out, render_map(grid, palette))


def _parse_grids(path: Path | None):
    if path is None:
        return None
    obj = _read_json(path)
    if not isinstance(obj, dict) or set(obj) - {"lr", "lam", "alpha"}:
        raise ValueError(f"{path}: grid file takes only the keys lr, lam, alpha")
    return {k: [float(x) for x in v] for k, v in obj.items()}


def cmd_grid(args) -> None:
    config = load_train_config(args.config)
    metas, template = load_class_meta(args.meta)
    cube, labels = _load_scene(args.src, args.labels)
    rows, best = trainer.grid_search(cube, labels, metas, template, config, _parse_grids(args.grids), args.cartesian)
    body = [[_fmt(r.lr), _fmt(r.lam), _fmt(r.alpha), _fmt(r.val_oa)] for r in rows]
    atomic_write_bytes(args.out, _csv_bytes(["lr", "lam", "alpha", "val_oa"], body))
    log.info("best cell: lr=%g lam=%g alpha=%g", best.lr, best.lam, best.alpha)


def cmd_ablate(args) -> None:
    config = load_train_config(args.config)
    metas, template = load_class_meta(args.meta)
    source = _load_scene(args.src, args.labels)
    target = _load_scene(args.tgt, args.tgt_labels)
    rows = trainer.ablate(source, target, metas, template, config)
    body = [[r.variant, _fmt(r.oa), _fmt(r.kappa), _fmt(r.val_oa)] for r in rows]
    atomic_write_bytes(args.out, _csv_bytes(["variant", "oa", "kappa", "val_oa"], body))


def cmd_export_features(args) -> None:
    model = load_model(args.model)
    cube, labels = _load_scene(args.tgt, args.labels)
    table = trainer.export_features(model, cube, labels)
    d = model.img_config.d_sem
    header = ["row", "col", "label"] + [f"f{i}" for i in range(d)]
    body = ([str(int(r[0])), str(int(r[1])), str(int(r[2]))] + [_fmt(x) for x in r[3:]] for r in table)
    atomic_write_bytes(args.out, _csv_bytes(header, body))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldgnet", description="Language-aware domain generalisation for hyperspectral scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic source/target scene pair")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--shift", type=_shift, metavar="GAIN,OFFSET,NONLIN")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a labeled source scene")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on a labeled target scene")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--tgt", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a classification map as PPM")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--tgt", type=Path, required=True)
    p.add_argument("--palette", type=Path)
    p.add_argument("--labels", type=Path, help="only colour labeled pixels")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("grid", help="hyperparameter search on source validation OA")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--grids", type=Path, help="JSON with lr/lam/alpha value lists")
    p.add_argument("--cartesian", action="store_true", help="full product instead of coordinate-wise")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="train and score the cls/coarse/fine/full variants")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--tgt", type=Path, required=True)
    p.add_argument("--tgt-labels", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-features", help="dump semantic-space features of labeled pixels")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--tgt", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"ldgnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except FileNotFoundError as e:
        print(f"ldgnet: error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"ldgnet: error: {e.strerror or e}: {e.filename}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, KeyError, IndexError, FormatError, ModelFormatError, trainer.TrainingError) as e:
        print(f"ldgnet: error: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())
