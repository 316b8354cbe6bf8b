"""Command-line entry point: ``python -m had_splat <command> ...``."""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import io
from .augmentor import AugmentorConfig, ScorerTriplet, curate_triplets
from .errors import ConfigError, ContractError, DivergenceError, InitializationError, NumericalError, ParseError
from .experiments import PRESET_NAMES, ExperimentPreset, run_preset
from .fusion import DEFAULT_TEMPERATURE, VersionStack, fuse_argmin, fuse_weighted
from .rasterizer import render, set_threads
from .scene import Camera, Role, SceneSpec
from .scorer import (DEFAULT_THRESHOLD, DEFAULT_THRESHOLD_MODE, DEPTH_TOLERANCE_FRACTION, ScorerModel,
                     extract_features, predict_score, reference_views, score_to_mask, train_scorer)
from .synthetic import make_synthetic_scene
from .trainer import TrainConfig, Trainer, evaluate

log = logging.getLogger("had_splat")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUNTIME_ERRORS = (ConfigError, ContractError, DivergenceError, InitializationError, NumericalError, ParseError,
                  OSError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")
    p.add_argument("--out", help="output path")
    p.add_argument("--threads", type=int, help="rasterizer threads (HAD_SPLAT_THREADS takes precedence)")
    p.add_argument("--image-format", choices=("ppm", "png"), default="ppm")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="had_splat", description="Hallucination-aware augmentation for Gaussian splatting.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("scene", help="generate and persist a synthetic scene")
    p.add_argument("--kind", choices=("blob_field", "textured_room"))
    _common(p)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("scene_dir")
    p.add_argument("--scorer", help="ScorerModel JSON (learned scoring)")
    p.add_argument("--dump-rounds", action="store_true", help="write every augmentation round under --out")
    _common(p)

    p = sub.add_parser("augment", help="run one augmentation round against a checkpoint")
    p.add_argument("scene_dir")
    p.add_argument("checkpoint", help="checkpoint stem (without .json/.npz)")
    p.add_argument("--scorer")
    _common(p)

    p = sub.add_parser("score", help="score augmented views in triplet-style directories")
    p.add_argument("scene_dir")
    p.add_argument("checkpoint")
    p.add_argument("views_dir", help="directory of view_*/ folders holding aug.* and camera.json")
    p.add_argument("--scorer", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--mode", choices=("absolute", "quantile"), default=DEFAULT_THRESHOLD_MODE)
    _common(p)

    p = sub.add_parser("fuse", help="fuse a version stack (version_K.* + score_K.pfm)")
    p.add_argument("stack_dir")
    p.add_argument("--method", choices=("argmin", "weighted"), default="argmin")
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    _common(p)

    p = sub.add_parser("eval", help="metrics of a checkpoint on selected views")
    p.add_argument("scene_dir")
    p.add_argument("checkpoint")
    p.add_argument("--roles", default="test", help="comma-separated roles")
    _common(p)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("preset", choices=PRESET_NAMES)
    p.add_argument("--seeds", help="comma-separated training seeds (default 0,1,2)")
    p.add_argument("--scenes", type=int, default=5, help="number of benchmark scenes")
    _common(p)

    p = sub.add_parser("triplets", help="curate scorer training triplets")
    p.add_argument("scene_dir")
    p.add_argument("checkpoint")
    _common(p)

    p = sub.add_parser("fit-scorer", help="fit a ScorerModel on curated triplets")
    p.add_argument("scene_dir")
    p.add_argument("checkpoint")
    p.add_argument("triplets_dir")
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--features", default="1,1,1,1,1", help="feature mask, five 0/1 flags")
    _common(p)
    return parser


def _config_dict(args):
    return io.read_json(args.config) if args.config else {}


def _train_config(args):
    cfg = TrainConfig.from_dict(_config_dict(args))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.augmentor = replace(cfg.augmentor, seed=args.seed)
    cfg.validate()
    return cfg


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required")
    return args.out


def cmd_scene(args):
    spec = SceneSpec.from_dict(_config_dict(args)) if args.config else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.kind:
        spec.scene_kind = args.kind
    spec.validate()
    gt, views = make_synthetic_scene(spec)
    io.save_scene(_require_out(args), gt, views, spec, args.image_format)
    print(f"wrote {len(views.views)} views to {args.out}")


def _load_scorer(path):
    return ScorerModel.load(path) if path else None


def cmd_train(args):
    out = _require_out(args)
    cfg = _train_config(args)
    gt, views, _ = io.load_scene(args.scene_dir)
    if gt is None and cfg.pipeline_mode != "splat_only":
        raise ConfigError("augmented training needs the scene's ground-truth set (gt.json)")
    trainer = Trainer(views, gt, cfg, _load_scorer(args.scorer))
    os.makedirs(out, exist_ok=True)
    if args.dump_rounds:
        inner = trainer.augmentation_round

        def dumping_round(it=0):
            res = inner(it)
            io.dump_round(out, trainer.round - 1, trainer.pool)
            return res

        trainer.augmentation_round = dumping_round
    report = trainer.run()
    io.save_gaussians(os.path.join(out, "final"), report.final_set)
    io.write_json(os.path.join(out, "config.json"), cfg.to_dict())
    rows = evaluate(report.final_set, views, [Role.TEST], scene=args.scene_dir, method=cfg.pipeline_mode,
                    seed=cfg.seed)
    io.write_metrics_csv(os.path.join(out, "metrics.csv"), rows, ("scene", "method", "seed", "view", "psnr", "ssim"))
    io.write_metrics_csv(os.path.join(out, "loss.csv"),
                         [{"iter": i, "input": a, "novel": b} for i, a, b in report.loss_curve],
                         ("iter", "input", "novel"))
    io.write_json(os.path.join(out, "augmentation_log.json"), report.augmentation_log)
    print(f"test PSNR {report.final_psnr:.3f} dB, SSIM {report.final_ssim:.4f}")


def cmd_augment(args):
    out = _require_out(args)
    cfg = _train_config(args)
    gt, views, _ = io.load_scene(args.scene_dir)
    if gt is None:
        raise ConfigError("augmentation needs the scene's ground-truth set (gt.json)")
    trainer = Trainer(views, gt, cfg, _load_scorer(args.scorer), init_set=io.load_gaussians(args.checkpoint))
    trainer.augmentation_round(cfg.total_iters)
    print(f"wrote {io.dump_round(out, 0, [e for e in trainer.pool if e is not None])}")


def _find_image(d, stem):
    for ext in ("pfm", "ppm", "png"):
        path = os.path.join(d, f"{stem}.{ext}")
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(d, stem + ".*"))


def cmd_score(args):
    _, views, _ = io.load_scene(args.scene_dir)
    trained = io.load_gaussians(args.checkpoint)
    model = ScorerModel.load(args.scorer)
    tol = DEPTH_TOLERANCE_FRACTION * views.diameter
    cache = {}
    dirs = sorted(glob.glob(os.path.join(args.views_dir, "view_*")))
    for d in dirs:
        cam = Camera.from_dict(io.read_json(os.path.join(d, "camera.json")))
        aug = io.read_image(_find_image(d, "aug"))
        out = render(trained, cam)
        refs = reference_views(views, trained, cam, depth_cache=cache)
        feats = extract_features(aug, cam, out.depth, refs, out.image, tol, neutral=model.neutral)
        score = predict_score(model, feats)
        io.write_pfm(os.path.join(d, "pred_score.pfm"), score)
        io.write_pfm(os.path.join(d, "mask.pfm"), score_to_mask(score, args.threshold, args.mode).astype(np.float32))
    print(f"scored {len(dirs)} views")


def cmd_fuse(args):
    d = args.stack_dir
    paths = sorted(glob.glob(os.path.join(d, "version_*.*")), key=lambda p: int(p.rsplit("_", 1)[1].split(".")[0]))
    if not paths:
        raise FileNotFoundError(f"no version_* images in {d}")
    images = [np.asarray(io.read_image(p), dtype=np.float64) for p in paths]
    scores = [io.read_pfm(os.path.join(d, f"score_{os.path.basename(p).split('_')[1].split('.')[0]}.pfm"))
              for p in paths]
    stack = VersionStack(images, scores)
    img, score = fuse_argmin(stack) if args.method == "argmin" else fuse_weighted(stack, args.temperature)
    out = args.out or d
    os.makedirs(out, exist_ok=True)
    ext = os.path.splitext(paths[0])[1].lstrip(".")
    io.write_image(os.path.join(out, f"fused.{ext}"), img, ext)
    io.write_pfm(os.path.join(out, "fused_score.pfm"), score)
    print(f"fused {len(paths)} versions into {out}")


def cmd_eval(args):
    _, views, _ = io.load_scene(args.scene_dir)
    gset = io.load_gaussians(args.checkpoint)
    roles = [Role(r.strip()) for r in args.roles.split(",") if r.strip()]
    rows = evaluate(gset, views, roles, scene=args.scene_dir, method=os.path.basename(args.checkpoint))
    cols = ("scene", "method", "seed", "view", "psnr", "ssim")
    if args.out:
        io.write_metrics_csv(args.out, rows, cols)
    for r in rows:
        print(f"view {r['view']:3d}  PSNR {r['psnr']:.3f}  SSIM {r['ssim']:.4f}")
    if rows:
        print(f"mean PSNR {np.mean([r['psnr'] for r in rows]):.3f}")


def cmd_ablate(args):
    from .experiments import desk_config, desk_scenes

    base = desk_config(**{k: v for k, v in _config_dict(args).items() if k != "augmentor"})
    if args.config and "augmentor" in _config_dict(args):
        base.augmentor = AugmentorConfig.from_dict(_config_dict(args)["augmentor"])
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0, 1, 2)
    if args.seed is not None:
        seeds = (args.seed,)
    preset = ExperimentPreset(args.preset, desk_scenes(args.scenes), seeds, _require_out(args), base)
    _, summary = run_preset(preset)
    for row in summary:
        print("  ".join(f"{k}={io._fmt(v)}" for k, v in row.items()))


def cmd_triplets(args):
    out = _require_out(args)
    cfg = AugmentorConfig.from_dict(_config_dict(args)) if args.config else AugmentorConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    gt, views, _ = io.load_scene(args.scene_dir)
    if gt is None:
        raise ConfigError("triplet curation needs the scene's ground-truth set (gt.json)")
    triplets = curate_triplets(gt, views, io.load_gaussians(args.checkpoint), cfg)
    io.save_triplets(out, triplets, args.image_format)
    print(f"wrote {len(triplets)} triplets to {out}")


def load_triplets(d):
    out = []
    for vd in sorted(glob.glob(os.path.join(d, "view_*"))):
        cam_d = io.read_json(os.path.join(vd, "camera.json"))
        ref = cam_d.pop("ref_index", -1)
        out.append(ScorerTriplet(io.read_image(_find_image(vd, "gt")), io.read_image(_find_image(vd, "aug")),
                                 io.read_image(_find_image(vd, "splat")), Camera.from_dict(cam_d),
                                 io.read_pfm(os.path.join(vd, "score.pfm")).astype(np.float64),
                                 int(os.path.basename(vd).split("_")[1]), ref))
    return out


def cmd_fit_scorer(args):
    out = _require_out(args)
    mask = tuple(bool(int(x)) for x in args.features.split(","))
    _, views, _ = io.load_scene(args.scene_dir)
    triplets = load_triplets(args.triplets_dir)
    model = train_scorer(triplets, views, io.load_gaussians(args.checkpoint), args.ridge, mask)
    model.save(out)
    print(f"weights {np.round(model.weights, 5).tolist()} bias {model.bias:.5f}")


COMMANDS = {"scene": cmd_scene, "train": cmd_train, "augment": cmd_augment, "score": cmd_score,
            "fuse": cmd_fuse, "eval": cmd_eval, "ablate": cmd_ablate, "triplets": cmd_triplets,
            "fit-scorer": cmd_fit_scorer}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"had_splat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"had_splat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
