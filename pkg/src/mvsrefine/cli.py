"""Command-line entry point: ``mvsrefine {synth,train,refine,eval,gradcheck}``.

Every run writes ``run_manifest.json`` into its output directory with the
resolved options, so a result can be regenerated from the manifest and seed.
``--threads 1`` pins BLAS to one thread, which makes outputs bit-identical.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io, synth
from .config import ConfigError, RefineConfig
from .geometry import normals_from_depth, scale_camera
from .learn.gradcheck import DEFAULT_TOL, run_suite
from .learn.train import ALL_PARTS, TrainConfig, TrainingDiverged, train_loop
from .metrics import MetricError, evaluate, nn_downsample
from .pipeline import PipelineError, init_model, min_cost_scorer, oracle_scorer, refine
from .validation import ValidationError

log = logging.getLogger("mvsrefine")

SCORERS = {"learned": None, "oracle": oracle_scorer, "min-cost": min_cost_scorer}


class CliError(RuntimeError):
    pass


def _load_config(args) -> RefineConfig:
    cfg = RefineConfig.load(args.config) if args.config else RefineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _write_manifest(out: Path, args, config: RefineConfig | None = None):
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    body = {"command": args.command, "options": opts}
    if config is not None:
        body["config"] = config.to_dict()
    io.write_json(out / "run_manifest.json", body)


def _scene_from_dataset(data, index: int):
    root = _require(data, "dataset")
    manifest = io.read_json(_require(root / "manifest.json", "dataset manifest"))
    scenes = manifest.get("scenes", [])
    if not 0 <= index < len(scenes):
        raise CliError(f"scene index {index} out of range (dataset has {len(scenes)})")
    return synth.load_scene(root, scenes[index])


def _weights(args, config: RefineConfig, need: bool):
    if args.weights:
        return io.load_weights(_require(args.weights, "weight file"))
    if need:
        log.warning("no --weights given: using randomly initialised parameters (seed %d)", config.seed)
    return init_model(config, np.random.default_rng(config.seed))


# -- subcommands -----------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    kinds = args.kinds.split(",") if args.kinds else None
    manifest = synth.make_dataset(out, args.seed or 0, args.count, kinds, args.format, args.width, args.height)
    _write_manifest(out, args)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    return 0


def cmd_train(args):
    config = _load_config(args)
    root = _require(args.data, "dataset")
    scenes = synth.load_dataset(root)
    if not scenes:
        raise CliError(f"dataset {root} contains no scenes")
    parts = tuple(args.parts.split(",")) if args.parts else ALL_PARTS
    tcfg = TrainConfig(steps=args.steps, lr=args.lr, crop=(args.crop_height, args.crop_width), parts=parts,
                       checkpoint_every=args.checkpoint_every, seed=config.seed, fm_alpha=args.fm_alpha)
    init = io.load_weights(_require(args.weights, "weight file")) if args.weights else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, args, config)

    def progress(step, fm, cl):
        if args.log_every and step % args.log_every == 0:
            log.info("step %d  loss_fm %.5f  loss_cl %.5f", step, fm, cl)

    res = train_loop(scenes, config, tcfg, init, out_dir=out, progress=progress)
    if res.skipped:
        log.warning("%d optimiser steps skipped on non-finite gradients", res.skipped)
    print(f"weights: {out / 'weights.chsn'}")
    print(f"loss log: {out / 'loss.csv'}")
    return 0


def _write_trace(path, rows):
    keys = ["stage", "iteration", "kind", "candidates", "pct_lt1", "mae_pd"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_refine(args):
    config = _load_config(args)
    scene = _scene_from_dataset(args.data, args.scene)
    scorer = SCORERS[args.scorer]
    params = _weights(args, config, need=scorer is None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, args, config)
    gt = scene.depths[0] if (args.trace or scorer is oracle_scorer) else None
    res = refine(scene.rig, scene.images, params, config, scene.depth_range, gt_depth=gt, scorer=scorer)
    io.write_pfm(out / "depth.pfm", res.depth)
    cam = scale_camera(scene.rig.reference, res.scale)
    io.write_ppm(out / "normals.ppm", io.normals_to_rgb(normals_from_depth(res.depth, cam)))
    if args.trace:
        _write_trace(out / "trace.csv", res.trace)
    io.write_json(out / "timing.json", {k: float(v) for k, v in res.timing.items()})
    h, w = res.depth.shape
    print(f"depth: {out / 'depth.pfm'} ({w}x{h}, scale {res.scale})")
    return 0


def cmd_eval(args):
    pred = io.read_pfm(_require(args.pred, "prediction")).astype(np.float64)
    if args.data is not None:
        scene = _scene_from_dataset(args.data, args.scene)
        gt_full, cam_full, b = scene.depths[0], scene.rig.reference, scene.rig.baseline_b
    else:
        if not (args.gt and args.camera):
            raise CliError("eval needs --data, or --gt together with --camera")
        gt_full = io.read_pfm(_require(args.gt, "ground truth")).astype(np.float64)
        cam_full, _ = io.read_camera(_require(args.camera, "camera"), gt_full.shape[1], gt_full.shape[0])
        b = args.baseline
    if gt_full.shape[0] % pred.shape[0] or gt_full.shape[0] // pred.shape[0] != gt_full.shape[1] // pred.shape[1]:
        raise CliError(f"prediction {pred.shape} is not an integer downscale of ground truth {gt_full.shape}")
    k = gt_full.shape[0] // pred.shape[0]
    cam = scale_camera(cam_full, Fraction(1, k))
    report = evaluate(pred, nn_downsample(gt_full, k), cam, cam.intrinsics.fx * b)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
    return 0


def cmd_gradcheck(args):
    rows = run_suite(seed=args.seed or 0, tol=args.tol)
    width = max(len(r[0]) for r in rows)
    for name, err, ok in rows:
        print(f"{name:<{width}}  {err:.3e}  {'PASS' if ok else 'FAIL'}")
    failed = sum(not r[2] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} passed at tolerance {args.tol:g}")
    return 0 if failed == 0 else 1


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bit-identical runs")
    common.add_argument("--config", default=None, help="refinement config JSON")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvsrefine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--kinds", default=None, help="comma list from plane,sphere,wedge (default: random)")
    s.add_argument("--format", choices=("pgm", "pfm"), default="pgm")
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=128)
    s.set_defaults(func=cmd_synth, need_out=True)

    t = sub.add_parser("train", parents=[common], help="train on a synthetic dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--crop-height", type=int, default=96)
    t.add_argument("--crop-width", type=int, default=128)
    t.add_argument("--parts", default=None, help="comma list of parameter groups to train (match,context,stages)")
    t.add_argument("--weights", default=None, help="initial weights")
    t.add_argument("--fm-alpha", type=float, default=TrainConfig.fm_alpha,
                   help="lower clip on hard-negative costs in the matching loss")
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train, need_out=True)

    r = sub.add_parser("refine", parents=[common], help="refine depth for one scene")
    r.add_argument("--data", required=True)
    r.add_argument("--scene", type=int, default=0)
    r.add_argument("--weights", default=None)
    r.add_argument("--scorer", choices=tuple(SCORERS), default="learned")
    r.add_argument("--trace", action="store_true", help="write per-iteration trace.csv")
    r.set_defaults(func=cmd_refine, need_out=True)

    e = sub.add_parser("eval", parents=[common], help="score a depth map against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--scene", type=int, default=0)
    e.add_argument("--gt", default=None)
    e.add_argument("--camera", default=None)
    e.add_argument("--baseline", type=float, default=1.0, help="baseline b with --gt (pseudo-disparity units)")
    e.set_defaults(func=cmd_eval, need_out=False)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all primitives")
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.set_defaults(func=cmd_gradcheck, need_out=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.need_out and not args.out:
        print(f"mvsrefine {args.command}: --out is required", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (io.ParseError, ConfigError, CliError, PipelineError, MetricError, ValidationError,
            synth.SynthError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"mvsrefine {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
