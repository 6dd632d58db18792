"""Command-line entry point: ``banet <command> ...``.

Exit codes: 0 success, 1 check/accuracy failure, 2 usage or format error.
Results go to stdout (key=value lines where scripting is likely); logs go
to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import EMSA_ORDERS, FUSION_MODES, PRESETS, RunConfig, load_run_config
from .data import to_input
from .metrics import ConfusionMatrix, report
from .model import BANet
from .tensor import InvalidArgument
from .tiling import extract, make_tile_plan, stitch

log = logging.getLogger("banet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
# network input sides must be multiples of the backbone's total stride
STRIDE_MULTIPLE = 32


class CheckFailed(Exception):
    """A requested check ran to completion and did not pass."""


def _config_args(p: argparse.ArgumentParser, *keys: str) -> None:
    p.add_argument("--config", help=f"preset ({', '.join(PRESETS)}) or key=value file")
    opts = {
        "seed": dict(type=int), "num_classes": dict(type=int),
        "fusion_mode": dict(choices=FUSION_MODES), "emsa_order": dict(choices=EMSA_ORDERS),
        "lr": dict(type=float), "batch": dict(type=int), "steps": dict(type=int),
        "images": dict(type=int), "size": dict(type=int), "tile": dict(type=int),
        "stride": dict(type=int), "jobs": dict(type=int),
    }
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, **opts[key])


def _run_config(args, keys) -> RunConfig:
    cfg = load_run_config(args.config)
    return cfg.update({k: getattr(args, k) for k in keys})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

INIT_KEYS = ("seed", "num_classes", "fusion_mode", "emsa_order")


def cmd_init(args) -> int:
    cfg = _run_config(args, INIT_KEYS)
    model = BANet.initialize(cfg.model_config(), cfg.seed)
    if args.out:
        formats.save_weights(args.out, model.weights)
        log.info("wrote %s", args.out)
    print(f"preset={cfg.preset}")
    print(f"params={model.parameter_count()}")
    print(f"backbone_params={model.parameter_count('backbone.')}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _run_config(args, INIT_KEYS)
    model = BANet.initialize(cfg.model_config(), cfg.seed)
    for prefix in ("backbone.", "texture.", "fam.", "fusion.", "head."):
        print(f"params.{prefix.rstrip('.')}={model.parameter_count(prefix)}")
    print(f"params={model.parameter_count()}")
    return EXIT_OK


def _tile_size(requested: int, height: int, width: int) -> int:
    if requested % STRIDE_MULTIPLE:
        raise InvalidArgument(f"tile {requested} must be a multiple of {STRIDE_MULTIPLE}")
    # small scenes run as one tile padded up to the next multiple of the stride
    fit = -(-max(height, width) // STRIDE_MULTIPLE) * STRIDE_MULTIPLE
    return min(requested, fit)


def infer_scene(model: BANet, rgb: np.ndarray, tile: int = 512, stride: int | None = None,
                jobs: int = 1) -> np.ndarray:
    """[K, H, W] logits for one uint8 [H, W, 3] scene via tiled inference."""
    h, w = rgb.shape[:2]
    tile = _tile_size(tile, h, w)
    plan = make_tile_plan(h, w, tile, stride)
    scene = to_input(rgb)[0]

    def run(i):
        return model.predict_logits(extract(scene, plan, i)[None])[0]

    log.info("%d tile(s) of %d px, stride %d", len(plan), plan.tile, plan.stride)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            tiles = list(pool.map(run, range(len(plan))))
    else:
        tiles = [run(i) for i in range(len(plan))]
    return stitch(tiles, plan)


def cmd_infer(args) -> int:
    cfg = _run_config(args, ("tile", "stride", "jobs", "emsa_order"))
    model = BANet.from_weights(formats.load_weights(args.weights), cfg.emsa_order)
    rgb = formats.read_ppm(args.image)
    logits = infer_scene(model, rgb, cfg.tile, cfg.stride, cfg.jobs)
    pred = logits.argmax(axis=0).astype(np.uint8)
    formats.write_pgm(args.out, pred)
    if args.logits:
        formats.save_tensor(args.logits, logits)
    print(f"height={pred.shape[0]}")
    print(f"width={pred.shape[1]}")
    print(f"classes={logits.shape[0]}")
    return EXIT_OK


def _read_labels(path: Path, palette: formats.Palette, ignore_label):
    if path.suffix.lower() == ".ppm":
        return palette.decode(formats.read_ppm(path), ignore_label)
    labels = formats.read_pgm(path)
    if ignore_label is None and labels.size and labels.max() >= len(palette):
        return formats.read_pgm(path, len(palette))  # raises with the offending pixel
    return labels


def cmd_eval(args) -> int:
    palette = formats.load_palette(args.palette)
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    for d in (pred_dir, ref_dir):
        if not d.is_dir():
            raise InvalidArgument(f"{d} is not a directory")

    def listing(d):
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".pgm", ".ppm")}

    preds, refs = listing(pred_dir), listing(ref_dir)
    missing = sorted(set(preds) ^ set(refs))
    for name in missing:
        side = "reference" if name in preds else "prediction"
        log.warning("no %s for %r; skipped", side, name)
    cm = ConfusionMatrix(palette.names, args.ignore_label)
    paired = sorted(set(preds) & set(refs))
    for name in paired:
        cm.accumulate(_read_labels(preds[name], palette, None),
                      _read_labels(refs[name], palette, args.ignore_label))
    subset = args.subset.split(",") if args.subset else "default"
    sys.stdout.write(report(cm, subset))
    print(f"pairs={len(paired)}")
    print(f"missing={len(missing)}")
    return EXIT_OK


TRAIN_KEYS = ("seed", "num_classes", "fusion_mode", "emsa_order", "lr", "batch", "steps", "images", "size")


def cmd_train_toy(args) -> int:
    from .train import train_toy

    cfg = _run_config(args, TRAIN_KEYS)
    if args.config is None:
        cfg.preset = "toy"
    if cfg.num_classes is None and cfg.preset == "toy":
        cfg.num_classes = 4
    result = train_toy(cfg, augment_data=args.augment)
    formats.save_weights(args.out, result.model.weights)
    for step, loss in result.losses:
        print(f"loss.{step}={loss:.6f}")
    print(f"train_oa={result.train_oa:.4f}")
    if args.min_oa is not None and not result.train_oa > args.min_oa:
        raise CheckFailed(f"training OA {result.train_oa:.4f} not above {args.min_oa}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    modes = FUSION_MODES if args.modes is None else tuple(m for m in args.modes.split(",") if m)
    bad = [m for m in modes if m not in FUSION_MODES]
    if bad:
        raise InvalidArgument(f"unknown fusion modes {bad}; choose from {FUSION_MODES}")
    result = run_suite(args.seed or 0, instances=args.instances, modes=modes,
                       module_instances=args.module_instances, log=log.info)
    print(result.report())
    if not result.passed:
        raise CheckFailed("gradient check failed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import AGREE_TOL, MAX_EXPONENT, bench_linear_attention, fit_exponent, format_table

    if not args.sizes:
        raise InvalidArgument("--sizes needs at least one size")
    if any(n <= 0 for n in args.sizes):
        raise InvalidArgument("sizes must be positive")
    rows = bench_linear_attention(args.sizes, repeats=args.repeats, seed=args.seed or 0)
    print(format_table(rows))
    ns = [r.n for r in rows]
    for a, b in zip(rows, rows[1:]):
        log.info("N %d -> %d: dense x%.2f, factored x%.2f", a.n, b.n,
                 b.dense_s / a.dense_s, b.factored_s / a.factored_s)
    worst = max(r.max_abs_diff for r in rows)
    print(f"max_abs_diff={worst:.3e}")
    failures = []
    if worst >= AGREE_TOL:
        failures.append(f"paths disagree by {worst:.2e}")
    if len(rows) >= 2:
        exp_f = fit_exponent(ns, [r.factored_s for r in rows])
        exp_d = fit_exponent(ns, [r.dense_s for r in rows])
        print(f"factored_exponent={exp_f:.3f}")
        print(f"dense_exponent={exp_d:.3f}")
        if exp_f >= MAX_EXPONENT:
            failures.append(f"factored runtime exponent {exp_f:.2f} >= {MAX_EXPONENT}")
    if failures:
        raise CheckFailed("; ".join(failures))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="banet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write freshly initialised weights")
    _config_args(p, *INIT_KEYS)
    p.add_argument("--out", help="BANW weight file to write")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("params", help="parameter counts per component")
    _config_args(p, *INIT_KEYS)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("infer", help="tiled inference on a PPM image")
    _config_args(p, "tile", "stride", "jobs", "emsa_order")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="P6 PPM input")
    p.add_argument("--out", required=True, help="P5 PGM class map to write")
    p.add_argument("--logits", help="optional BANT file for the [K, H, W] logits")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score prediction maps against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--palette", required=True, help="'isprs', 'uavid' or a palette file")
    p.add_argument("--subset", help="comma-separated class names for mean F1 / mIoU")
    p.add_argument("--ignore-label", type=int, help="reference value (or fallback for unknown colors) to skip")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="train on synthetic scenes")
    _config_args(p, *TRAIN_KEYS)
    p.add_argument("--out", required=True)
    p.add_argument("--augment", action="store_true", help="apply random flips/rotations/rescaling")
    p.add_argument("--min-oa", type=float, help="exit 1 unless training OA exceeds this")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20, help="random instances per op")
    p.add_argument("--module-instances", type=int, default=3)
    p.add_argument("--modes", help=f"comma-separated fusion modes for the network checks, empty for none "
                   f"(default: {','.join(FUSION_MODES)})")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="micro-benchmarks")
    p.add_argument("--op", choices=["linear-attention"], default="linear-attention")
    p.add_argument("--sizes", type=int, nargs="*", default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except CheckFailed as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except (InvalidArgument, formats.FormatError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
