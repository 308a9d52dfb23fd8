"""Command-line entry point: ``uvsplat <command> ...``.

Exit status is 0 on success, 2 when inputs fail validation and 1 on any
other runtime failure. Flags override the scene config, which overrides the
built-in defaults.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io as _io
from .errors import NonFiniteLoss, StaleState, UvSplatError
from .fitting import FitConfig, evaluate, fit_maps, prepare_maps
from .gaussian_model import assemble_cloud, init_param_maps
from .geometry import TexturedMesh, build_scaffolds, load_obj, rasterize_uv_geometry, \
    save_obj, transfer_texture_nearest
from .multiview import CaptureSet, View, aggregate_rgb_map, load_cameras, render_depth, \
    save_cameras, visibility_weights
from .splat_renderer import render

_RUNTIME_ERRORS = (NonFiniteLoss, StaleState)


class _Failure(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _validation(msg):
    return _Failure(msg, 2)


# scene loading ------------------------------------------------------------

def _scene(args):
    cfg = _io.SceneConfig.from_file(args.config) if getattr(args, "config", None) else \
        _io.SceneConfig()
    overrides = {k: getattr(args, k, None) for k in
                 ("template", "cameras", "images", "masks", "d", "S", "resolution", "iterations",
                  "lr", "weight_decay", "seed", "checkpoint_interval", "occlusion_bias",
                  "threads")}
    # paths given on the command line are relative to the working directory
    for k in ("template", "cameras", "images", "masks"):
        if overrides[k] is not None:
            overrides[k] = str(Path(overrides[k]).resolve())
    if getattr(args, "heldout", None) is not None:
        overrides["heldout"] = [int(x) for x in args.heldout.split(",") if x != ""]
    return cfg.with_overrides(**overrides).validate()


def _need(cfg, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise _validation(f"missing required setting '{name}' (config key or --{name})")


def _template(cfg):
    _need(cfg, "template")
    return load_obj(cfg.resolve(cfg.template))


def _all_views(cfg):
    _need(cfg, "cameras", "images")
    cams = load_cameras(cfg.resolve(cfg.cameras))
    images = _io.list_images(cfg.resolve(cfg.images))
    if len(images) != len(cams):
        raise _validation(f"{len(cams)} cameras but {len(images)} images in {cfg.images}")
    masks = _io.list_images(cfg.resolve(cfg.masks)) if cfg.masks else [None] * len(cams)
    if len(masks) != len(cams):
        raise _validation(f"{len(cams)} cameras but {len(masks)} masks in {cfg.masks}")
    views = []
    for cam, ip, mp in zip(cams, images, masks):
        img = _io.read_image(ip)
        if img.shape[:2] != (cam.height, cam.width):
            raise _validation(f"{ip} is {img.shape[1]}x{img.shape[0]}, camera expects "
                              f"{cam.width}x{cam.height}")
        mask = _io.read_mask(mp) if mp else (img.max(axis=2) > 0).astype(np.float64)
        views.append(View(cam, img, mask))
    return views


def _split(cfg):
    views = _all_views(cfg)
    held = sorted(set(cfg.heldout))
    if any(not 0 <= i < len(views) for i in held):
        raise _validation(f"held-out indices {held} out of range for {len(views)} views")
    inputs = [v for i, v in enumerate(views) if i not in held]
    if not inputs:
        raise _validation("no input views left after removing the held-out split")
    return CaptureSet(inputs), [views[i] for i in held]


def _geometry(cfg, path=None):
    """Scaffolds and geometry maps; checked against a container when given."""
    mesh = _template(cfg)
    d, S, res = cfg.d, cfg.S, cfg.resolution
    if path is not None:
        positions, _, _, mask, manifest = _io.load_geometry_maps(path)
        d, S, res = manifest["d"], manifest["S"], positions.shape[1:3]
    scaffolds = build_scaffolds(mesh, d, S)
    geo = rasterize_uv_geometry(scaffolds, res)
    if path is not None and (not np.array_equal(mask, geo.uv_mask) or not np.array_equal(
            positions, geo.position_maps.astype(np.float32))):
        raise _validation(f"geometry container {path} does not match template {cfg.template}")
    return scaffolds, geo


def _aggregate(cfg, scaffolds, geo, capture):
    cams = capture.cameras
    depth = [render_depth(c, scaffolds.template_vertices, scaffolds.faces) for c in cams]
    colors, observed = [], []
    for level in range(geo.level_count + 1):
        w = visibility_weights(scaffolds, geo, cams, level, bias=cfg.occlusion_bias,
                               depth_maps=depth)
        colors.append(aggregate_rgb_map(capture, geo, w, level))
        observed.append(w.observed)
    return np.stack(colors), np.stack(observed)


def _fit_config(cfg, args):
    return FitConfig(iterations=cfg.iterations, lr=cfg.lr, weight_decay=cfg.weight_decay,
                     seed=cfg.seed, checkpoint_interval=cfg.checkpoint_interval,
                     threads=cfg.threads, learn_color=getattr(args, "learn_color", False))


# commands -----------------------------------------------------------------

def cmd_scaffold(args):
    cfg = _scene(args)
    _, geo = _geometry(cfg)
    _io.save_geometry(args.out, geo)
    n = geo.foreground_count
    print(f"foreground texels: {n}")
    print(f"gaussians: {n * (geo.level_count + 1)}")


def cmd_aggregate(args):
    cfg = _scene(args)
    scaffolds, geo = _geometry(cfg, args.geometry)
    capture, _ = _split(cfg)
    colors, observed = _aggregate(cfg, scaffolds, geo, capture)
    _io.save_appearance(args.out, colors, observed, geo.uv_mask, geo.offset_step)
    counts = [int((geo.uv_mask & ~o).sum()) for o in observed]
    print(json.dumps({"unobserved_texels": counts}))


def cmd_fit(args):
    cfg = _scene(args)
    capture, heldout = _split(cfg)
    fcfg = _fit_config(cfg, args)
    if args.resume:
        maps = None
    else:
        _, geo = _geometry(cfg, args.geometry)
        colors, observed, _ = _io.load_appearance(args.appearance)
        if colors.shape[:3] != geo.position_maps.shape[:3]:
            raise _validation("appearance and geometry containers disagree on levels or size")
        maps = init_param_maps(geo, colors, observed)

    def progress(i, loss):
        if args.verbose:
            print(f"iter {i:5d}  loss {loss:.6f}", file=sys.stderr)

    maps, report = fit_maps(maps, capture, fcfg, heldout, checkpoint_dir=args.checkpoint_dir,
                            resume=args.resume, progress=progress)
    _io.save_param_maps(args.out, maps)
    if args.report:
        report.save(args.report)
    print(f"final loss {report.loss_trace[-1]:.6f} after {len(report.loss_trace)} iterations")


def cmd_render(args):
    maps = _io.load_param_maps(args.maps)
    cams = load_cameras(args.cameras)
    if not 0 <= args.view < len(cams):
        raise _validation(f"view {args.view} out of range for {len(cams)} cameras")
    out = render(assemble_cloud(maps), cams[args.view])
    _io.write_image(args.out, out.color)
    if args.alpha_out:
        _io.write_image(args.alpha_out, out.alpha, bits=16)


def cmd_eval(args):
    cfg = _scene(args)
    _, heldout = _split(cfg)
    if not heldout:
        raise _validation("no held-out views configured (config 'heldout' or --heldout)")
    report = evaluate(_io.load_param_maps(args.maps), heldout)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_texture_transfer(args):
    template = load_obj(args.template)
    scan = TexturedMesh(load_obj(args.scan), _io.read_image(args.texture))
    tex = transfer_texture_nearest(template, scan, args.resolution)
    _io.write_image(args.out, tex)


def cmd_ablate(args):
    cfg = _scene(args)
    capture, heldout = _split(cfg)
    if not heldout:
        raise _validation("ablation needs held-out views")
    fcfg = _fit_config(cfg, args)
    levels = [int(x) for x in args.levels.split(",")]
    if any(s < 0 for s in levels):
        raise _validation("scaffold counts must be non-negative")
    mesh = _template(cfg)
    rows = []
    for S in levels:
        maps, _, _ = prepare_maps(capture, mesh, cfg.resolution, cfg.d, S, cfg.occlusion_bias)
        maps, _ = fit_maps(maps, capture, fcfg)
        ev = evaluate(maps, heldout)
        rows.append({"S": S, "psnr_db": ev["mean_psnr_db"], "ssim": ev["mean_ssim"],
                     "l1": ev["mean_l1"]})
        print(f"S={S}  psnr {ev['mean_psnr_db']:.3f} dB  ssim {ev['mean_ssim']:.4f}  "
              f"l1 {ev['mean_l1']:.5f}", file=sys.stderr)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["S", "psnr_db", "ssim", "l1"])
        writer.writeheader()
        writer.writerows(rows)


def cmd_synth(args):
    from .synthetic import benchmark_subject

    out = Path(args.out)
    sub = benchmark_subject(seed=args.seed, image_size=args.image_size)
    views = list(sub.input_views.views) + list(sub.heldout_views.views)
    for sub_dir in ("images", "masks"):
        (out / sub_dir).mkdir(parents=True, exist_ok=True)
    save_obj(out / "template.obj", sub.template)
    save_cameras(out / "cameras.json", [v.camera for v in views])
    for i, v in enumerate(views):
        _io.write_image(out / "images" / f"{i:03d}.png", v.image)
        _io.write_image(out / "masks" / f"{i:03d}.png", v.mask)
    n_in = len(sub.input_views)
    scene = {"template": "template.obj", "cameras": "cameras.json", "images": "images",
             "masks": "masks", "heldout": list(range(n_in, len(views)))}
    (out / "scene.json").write_text(json.dumps(scene, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(views)} views ({n_in} input) to {out}")


# parser -------------------------------------------------------------------

def _scene_flags(p, fit=False):
    p.add_argument("--config", help="scene config (JSON or YAML)")
    p.add_argument("--template", help="template OBJ with UVs")
    p.add_argument("--cameras", help="camera JSON")
    p.add_argument("--images", help="directory of input PNGs")
    p.add_argument("--masks", help="directory of mask PNGs")
    p.add_argument("--heldout", help="comma-separated held-out view indices")
    p.add_argument("--d", type=float, help="scaffold offset in meters")
    p.add_argument("--S", type=int, help="number of outer scaffolds")
    p.add_argument("--resolution", type=int, help="UV map resolution")
    p.add_argument("--occlusion-bias", dest="occlusion_bias", type=float)
    if fit:
        p.add_argument("--iterations", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--learn-color", dest="learn_color", action="store_true",
                       help="also fit a per-texel color residual")


def build_parser():
    parser = argparse.ArgumentParser(prog="uvsplat", description="Multi-scaffold UV Gaussian splatting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scaffold", help="build scaffolds and write geometry maps")
    _scene_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scaffold)

    p = sub.add_parser("aggregate", help="aggregate input views into per-level color maps")
    _scene_flags(p)
    p.add_argument("--geometry", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("fit", help="fit rotation, scale and opacity maps")
    _scene_flags(p, fit=True)
    p.add_argument("--geometry")
    p.add_argument("--appearance")
    p.add_argument("--resume", help="checkpoint container to continue from")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--report", help="write the fit report JSON here")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render fitted maps from one camera")
    p.add_argument("--maps", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-out", dest="alpha_out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics of fitted maps on held-out views")
    _scene_flags(p)
    p.add_argument("--maps", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("texture-transfer", help="nearest-surface texture from a textured scan")
    p.add_argument("--template", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--texture", required=True, help="scan texture PNG")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_texture_transfer)

    p = sub.add_parser("ablate", help="fit and evaluate for several scaffold counts")
    _scene_flags(p, fit=True)
    p.add_argument("--levels", default="0,1,2,3,4", help="comma-separated S values")
    p.add_argument("--out", required=True, help="CSV output")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a procedural test subject to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int, default=96)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit" and not args.resume and not (args.geometry and args.appearance):
        parser.error("fit needs --geometry and --appearance (or --resume)")
    try:
        args.func(args)
    except _Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UvSplatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
