"""Command-line entry point: ``semsplat {synth,render,fit,eval,losses}``.

Failures print one JSON line on stderr (``{"error": ..., "message": ...}``,
plus ``path`` and ``offset`` for malformed files) and exit nonzero.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bundle import Bundle, View, load_bundle, load_codec, load_prototypes, save_bundle, save_codec
from .exceptions import FormatError, SemsplatError
from .fitting import FitConfig, fit_scene
from .io import load_camera, load_scene, save_scene, write_fmap, write_ppm
from .losses import LossWeights, loss_geo, loss_rgb, loss_sem, loss_total
from .metrics import MetricReport, depth_metrics, depth_validity, psnr, seg_metrics, ssim
from .rasterizer import render
from .scene import PredictedPointMap, ReferencePointMap
from .semantic import decode_features, segment
from .synth import DEFAULT_SPEC, SPEC_USAGE, make_synthetic, perturb_scene

log = logging.getLogger("semsplat")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(SemsplatError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    inputs: List[str] = field(default_factory=list)
    output: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: Optional[int] = None
    seed: Optional[int] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.resolution is not None and self.resolution < 8:
            raise CliError("resolution must be >= 8")
        if self.seed is not None and not 0 <= self.seed < 2 ** 64:
            raise CliError("seed must be an unsigned 64-bit integer")
        if self.threads is not None and self.threads < 1:
            raise CliError("threads must be >= 1")
        for p in self.inputs:
            if not Path(p).exists():
                raise FormatError(p, "input not found")

    @classmethod
    def from_args(cls, args):
        inputs = [p for p in (getattr(args, k, None) for k in
                              ("spec", "scene", "camera", "bundle", "codec", "pred", "gt",
                               "prototypes", "weights", "init")) if p]
        return cls(subcommand=args.command, inputs=inputs, output=getattr(args, "out", None),
                   weights=load_weights(getattr(args, "weights", None), getattr(args, "conf_ratio", None)),
                   resolution=getattr(args, "res", None), seed=args.seed, threads=args.threads)


def load_weights(path=None, conf_ratio=None):
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(path, f"invalid JSON: {exc.msg}", exc.pos) from None
        if not isinstance(data, dict):
            raise FormatError(path, "weights file must hold a JSON object")
    if conf_ratio is not None:
        data["conf_ratio"] = conf_ratio
    try:
        return LossWeights.from_dict(data)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _write_json(obj, out):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    try:
        spec = json.loads(Path(args.spec).read_text() or "null")
    except json.JSONDecodeError as exc:
        raise FormatError(args.spec, f"invalid JSON: {exc.msg}", exc.pos) from None
    if not isinstance(spec, dict) or not spec:
        raise CliError(f"empty scene spec; {SPEC_USAGE}")
    missing = [k for k in ("gaussians", "views") if k not in spec]
    unknown = set(spec) - set(DEFAULT_SPEC)
    if missing or unknown:
        raise CliError(f"bad scene spec (missing {missing}, unknown {sorted(unknown)}); {SPEC_USAGE}")
    if cfg.seed is not None:
        spec["seed"] = cfg.seed
    if cfg.resolution is not None:
        spec["resolution"] = cfg.resolution
    bundle = make_synthetic(spec, threads=cfg.threads)
    save_bundle(args.out, bundle)
    log.info("wrote %d views to %s", len(bundle.views), args.out)


def _render_view(scene, camera, codec, threads):
    out = render(scene, camera, threads=threads)
    feats = decode_features(out.features, codec).data if codec is not None else out.features.data
    return View(camera=camera, color=out.color.data, features=feats, depth=out.depth.data,
                alpha=out.alpha.data, points=camera.unproject(out.depth.data))


def cmd_render(args, cfg: RunConfig):
    scene = load_scene(args.scene)
    out = Path(args.out)
    if args.bundle:
        src = load_bundle(args.bundle)
        codec = load_codec(args.codec) if args.codec else src.codec
        views = [_render_view(scene, v.camera, codec, cfg.threads) for v in src.views]
        save_bundle(out, Bundle(views=views, meta={"source": "render"}))
        return
    if not args.camera:
        raise CliError("render needs --camera or --bundle")
    codec = load_codec(args.codec) if args.codec else None
    view = _render_view(scene, load_camera(args.camera), codec, cfg.threads)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "color.ppm", view.color)
    for name in ("color", "features", "depth", "alpha"):
        write_fmap(out / f"{name}.fmap", getattr(view, name))


def cmd_fit(args, cfg: RunConfig):
    bundle = load_bundle(args.bundle)
    codec = load_codec(args.codec) if args.codec else bundle.codec
    if codec is None:
        raise CliError("fit needs a codec (bundle codec/ directory or --codec)")
    seed = 0 if cfg.seed is None else cfg.seed
    if args.init:
        init = load_scene(args.init)
    elif bundle.scene is not None:
        init = perturb_scene(bundle.scene, np.random.default_rng(seed))
    else:
        raise CliError("fit needs --init or a bundle with scene.sgs")
    fcfg = FitConfig(iterations=args.iterations, lr=args.lr, weights=cfg.weights, seed=seed,
                     threads=cfg.threads)
    res = fit_scene(init, bundle.views, fcfg, codec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(out / "scene.sgs", res.scene)
    save_codec(out / "codec", res.codec)
    _write_json({"iterations": fcfg.iterations, "lr": fcfg.lr, "seed": seed,
                 "weights": cfg.weights.to_dict(), "trace": res.trace, "final": res.final_losses},
                out / "trace.json")
    log.info("fit done: rgb %.6g -> %.6g", res.trace[0]["rgb"], res.final_losses["rgb"])


def _pair_bundles(args):
    pred, gt = load_bundle(args.pred), load_bundle(args.gt)
    if len(pred.views) != len(gt.views) or not gt.views:
        raise CliError(f"bundles differ in view count: {len(pred.views)} vs {len(gt.views)}")
    return pred, gt


def _require(view, names, where):
    for n in names:
        if getattr(view, n) is None:
            raise FormatError(where, f"missing {n}.fmap")


def cmd_eval(args, cfg: RunConfig):
    pred, gt = _pair_bundles(args)
    protos = load_prototypes(args.prototypes) if args.prototypes else gt.prototypes
    report = MetricReport()
    p_col, g_col, p_dep, g_dep, valid, p_lab, g_lab, ssims = [], [], [], [], [], [], [], []
    for i, (p, g) in enumerate(zip(pred.views, gt.views)):
        _require(p, ("color", "depth", "alpha"), Path(args.pred) / f"view_{i:03d}")
        _require(g, ("color", "depth"), Path(args.gt) / f"view_{i:03d}")
        p_col.append(p.color), g_col.append(g.color)
        ssims.append(ssim(p.color, g.color))
        p_dep.append(p.depth), g_dep.append(g.depth)
        valid.append(depth_validity(p.alpha, g.depth))
        if protos is not None and p.features is not None:
            p_lab.append(segment(p.features, protos)[1].data)
            g_lab.append(g.labels if g.labels is not None else segment(g.features, protos)[1].data)
    report.psnr = psnr(np.stack(p_col), np.stack(g_col))
    report.ssim = float(np.mean(ssims))
    report.rel, report.tau = depth_metrics(np.stack(p_dep), np.stack(g_dep), np.stack(valid))
    if p_lab:
        report.miou, report.acc, per = seg_metrics(np.stack(p_lab), np.stack(g_lab), protos.num_classes)
        report.per_class_iou = {protos.labels[c]: v for c, v in per.items()}
    _write_json(report.to_dict(), args.out)


def cmd_losses(args, cfg: RunConfig):
    pred, gt = _pair_bundles(args)
    for i, (p, g) in enumerate(zip(pred.views, gt.views)):
        _require(p, ("color", "features", "points"), Path(args.pred) / f"view_{i:03d}")
        _require(g, ("color", "features", "points", "confidence"), Path(args.gt) / f"view_{i:03d}")
    w = cfg.weights
    l_rgb = loss_rgb([p.color for p in pred.views], [g.color for g in gt.views], w)
    l_sem = loss_sem([p.features for p in pred.views], [g.features for g in gt.views])
    l_geo = loss_geo([PredictedPointMap(p.points) for p in pred.views],
                     [ReferencePointMap(g.points, g.confidence) for g in gt.views], w)
    total, _ = loss_total(l_rgb, l_sem, l_geo, w)
    _write_json({"l_rgb": l_rgb.value, "l_sem": l_sem.value, "l_geo": l_geo.value, "l_total": total,
                 "per_view": {"l_rgb": l_rgb.per_view, "l_sem": l_sem.per_view, "l_geo": l_geo.per_view},
                 "weights": w.to_dict()}, args.out)


COMMANDS = {"synth": cmd_synth, "render": cmd_render, "fit": cmd_fit, "eval": cmd_eval, "losses": cmd_losses}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{message}; usage: {self.format_usage().strip()}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="u64 seed for all randomness")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (outputs are identical at any value)")
    parser = _Parser(prog="semsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="build a seeded scene and ground-truth bundle")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=int, default=None)

    p = sub.add_parser("render", parents=[common], help="render a scene")
    p.add_argument("scene")
    p.add_argument("--camera")
    p.add_argument("--bundle", help="render every camera of this bundle into a bundle")
    p.add_argument("--codec", help="decode features with this codec directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a scene to a bundle")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="initial scene (default: bundle scene perturbed with --seed)")
    p.add_argument("--codec")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weights")
    p.add_argument("--conf-ratio", type=float, default=None)

    p = sub.add_parser("eval", parents=[common], help="metric report of pred vs gt bundle")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--prototypes")
    p.add_argument("--out")

    p = sub.add_parser("losses", parents=[common], help="loss report of pred vs gt bundle")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--weights")
    p.add_argument("--conf-ratio", type=float, default=None)
    p.add_argument("--out")
    return parser


def _error_line(exc):
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, FormatError):
        rec.update(path=exc.path, offset=exc.offset)
    return json.dumps(rec)


def main(argv=None):
    level = os.environ.get("SEMSPLAT_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.from_args(args)
        log.debug("run config: %s", cfg)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_USAGE
    except (SemsplatError, ValueError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
