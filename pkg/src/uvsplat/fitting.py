"""Per-subject fitting of the raw parameter maps.

Each iteration assembles the Gaussian cloud from the maps, renders every
input view, evaluates the composite loss, back-propagates through the
renderer, scatters per-Gaussian gradients to their texels and takes one
AdamW step on the learnable maps. Positions and aggregated colors stay
fixed.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import io as _io
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch
from .gaussian_model import activate_scale, assemble_cloud, init_param_maps, scatter_to_maps
from .geometry import build_scaffolds, rasterize_uv_geometry
from .multiview import (DEFAULT_OCCLUSION_BIAS, aggregate_rgb_map, render_depth,
                        visibility_weights)
from .objectives import LossWeights, composite_loss, l1_loss, psnr, ssim
from .splat_renderer import DEFAULT_SETTINGS, render, render_backward

__all__ = ["FitConfig", "FitReport", "AdamState", "adamw_step", "prepare_maps", "fit_maps",
           "fit_subject", "evaluate", "load_checkpoint"]


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_interval: int = 0
    learn_color: bool = False
    threads: int = None

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidConfig("iterations must be at least 1")
        if not self.lr > 0:
            raise InvalidConfig("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update of every array in ``params``.

    Decay is decoupled: it shrinks the parameters directly instead of
    entering the moment estimates. Arithmetic follows the parameters' dtype.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatch(f"optimizer moments for {name} do not match the parameter")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return params, state


@dataclass
class FitReport:
    loss_trace: list = field(default_factory=list)
    term_trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    timings: dict = field(default_factory=lambda: {k: 0.0 for k in (
        "prepare", "assemble", "render", "loss", "backward", "step", "evaluate", "checkpoint")})

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@contextmanager
def _numba_threads(n):
    if n is None:
        yield
        return
    old = numba.get_num_threads()
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
    try:
        yield
    finally:
        numba.set_num_threads(old)


def prepare_maps(capture, template, resolution, d, S, bias=DEFAULT_OCCLUSION_BIAS):
    """Scaffolds, geometry maps, aggregated colors and initial raw maps.

    Returns ``(maps, geo, visibility)`` where ``visibility`` lists the
    per-level :class:`~uvsplat.multiview.VisibilityWeights`.
    """
    scaffolds = build_scaffolds(template, d, S)
    geo = rasterize_uv_geometry(scaffolds, resolution)
    cams = capture.cameras
    depth = [render_depth(c, scaffolds.template_vertices, scaffolds.faces) for c in cams]
    vis, colors = [], []
    for level in range(S + 1):
        w = visibility_weights(scaffolds, geo, cams, level, bias=bias, depth_maps=depth)
        vis.append(w)
        colors.append(aggregate_rgb_map(capture, geo, w, level))
    observed = np.stack([w.observed for w in vis])
    return init_param_maps(geo, np.stack(colors), observed, d), geo, vis


def evaluate(maps, views, settings=DEFAULT_SETTINGS, cloud=None):
    """Render each view and report PSNR / SSIM / L1 per view plus their means."""
    if cloud is None:
        cloud = assemble_cloud(maps)
    rows = []
    for i, view in enumerate(views):
        out = render(cloud, view.camera, settings)
        rows.append({"view_id": i, "psnr_db": psnr(out.color, view.image),
                     "ssim": ssim(out.color, view.image),
                     "l1": l1_loss(out.color, view.image)[0]})
    report = {"views": rows}
    for key in ("psnr_db", "ssim", "l1"):
        report[f"mean_{key}"] = float(np.mean([r[key] for r in rows])) if rows else None
    return report


def _save_checkpoint(path, maps, adam, report, iteration):
    extra = {}
    for name in sorted(adam.m):
        for i in range(maps.level_count + 1):
            extra[f"adam_m_{name}_{i}"] = adam.m[name][i]
            extra[f"adam_v_{name}_{i}"] = adam.v[name][i]
    meta = {"iteration": iteration, "adam_step": adam.step, "moments": sorted(adam.m),
            "loss_trace": list(report.loss_trace), "term_trace": list(report.term_trace),
            "checkpoints": list(report.checkpoints)}
    _io.save_param_maps(path, maps, kind="checkpoint", extra=extra, meta=meta)


def load_checkpoint(path):
    """Return ``(maps, adam_state, manifest)`` from a checkpoint container."""
    arrays, manifest = _io.read_container(path)
    if manifest["kind"] != "checkpoint":
        raise InvalidConfig(f"{path} is not a checkpoint")
    maps = _io.param_maps_from_arrays(arrays, manifest)
    L = manifest["S"] + 1
    adam = AdamState(step=int(manifest["adam_step"]))
    for name in manifest["moments"]:
        adam.m[name] = np.stack([arrays[f"adam_m_{name}_{i}"] for i in range(L)])
        adam.v[name] = np.stack([arrays[f"adam_v_{name}_{i}"] for i in range(L)])
    return maps, adam, manifest


def fit_maps(maps, capture, cfg, heldout=(), settings=DEFAULT_SETTINGS, checkpoint_dir=None,
             resume=None, progress=None):
    """Optimize the learnable maps of ``maps`` in place.

    ``resume`` names a checkpoint container; fitting then continues from its
    iteration counter with its maps and optimizer moments, and the returned
    report carries the full loss trace.
    """
    report = FitReport()
    adam = AdamState()
    start = 0
    if resume is not None:
        maps, adam, manifest = load_checkpoint(resume)
        start = int(manifest["iteration"])
        report.loss_trace = list(manifest["loss_trace"])
        report.term_trace = list(manifest["term_trace"])
        report.checkpoints = list(manifest.get("checkpoints", []))
    if cfg.learn_color and maps.color_residual is None:
        maps.color_residual = np.zeros_like(maps.colors)
    d = maps.offset_step
    targets = [(v.image[..., :3], v.mask) for v in capture.views]
    timings = report.timings

    def tick(key, t0):
        now = time.perf_counter()
        timings[key] += now - t0
        return now

    with _numba_threads(cfg.threads):
        for it in range(start, cfg.iterations):
            t0 = time.perf_counter()
            cloud = assemble_cloud(maps)
            t0 = tick("assemble", t0)
            outs = [render(cloud, v.camera, settings) for v in capture.views]
            t0 = tick("render", t0)
            loss, grads, terms = composite_loss([(o.color, o.alpha) for o in outs], targets,
                                                cfg.weights)
            if not np.isfinite(loss):
                raise NonFiniteLoss(it, loss)
            t0 = tick("loss", t0)
            acc = {"quats_raw": 0.0, "scales_raw": 0.0, "opacities_raw": 0.0, "colors": 0.0}
            for view, out, (d_img, d_alpha) in zip(capture.views, outs, grads):
                g = render_backward(cloud, view.camera, d_img, d_alpha, forward=out,
                                    settings=settings)
                acc["quats_raw"] = acc["quats_raw"] + g.quats
                acc["scales_raw"] = acc["scales_raw"] + g.scales
                acc["opacities_raw"] = acc["opacities_raw"] + g.opacities[:, None]
                acc["colors"] = acc["colors"] + g.colors
            t0 = tick("backward", t0)
            params = maps.learnable()
            shape = maps.positions.shape
            map_grads = {name: scatter_to_maps(acc[name], cloud.source, shape)
                         for name in ("quats_raw", "scales_raw", "opacities_raw")}
            if "color_residual" in params:
                map_grads["color_residual"] = scatter_to_maps(acc["colors"], cloud.source, shape)
            adamw_step(params, map_grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                       cfg.weight_decay)
            report.loss_trace.append(float(loss))
            report.term_trace.append({k: float(v) for k, v in terms.items()})
            t0 = tick("step", t0)
            done = it + 1
            if progress is not None:
                progress(done, loss)
            at_checkpoint = cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0
            if at_checkpoint or done == cfg.iterations:
                _check_confinement(maps, d)
                entry = {"iteration": done}
                if heldout:
                    t1 = time.perf_counter()
                    ev = evaluate(maps, heldout, settings)
                    entry.update(psnr_db=ev["mean_psnr_db"], ssim=ev["mean_ssim"],
                                 l1=ev["mean_l1"])
                    tick("evaluate", t1)
                report.checkpoints.append(entry)
                if checkpoint_dir is not None and at_checkpoint:
                    t1 = time.perf_counter()
                    _save_checkpoint(Path(checkpoint_dir) / f"iter_{done:06d}", maps, adam,
                                     report, done)
                    tick("checkpoint", t1)
    return maps, report


def _check_confinement(maps, d):
    s = activate_scale(maps.scales_raw[:, maps.uv_mask].astype(np.float64), d)
    if s.size and s.max() > d:
        raise AssertionError(f"scale confinement violated: {s.max()} > {d}")


def fit_subject(capture, template, cfg, resolution, d, S, heldout=(),
                settings=DEFAULT_SETTINGS, bias=DEFAULT_OCCLUSION_BIAS, checkpoint_dir=None,
                progress=None):
    """Build maps for one subject and fit them; returns ``(maps, report)``."""
    t0 = time.perf_counter()
    maps, _, _ = prepare_maps(capture, template, resolution, d, S, bias)
    prep = time.perf_counter() - t0
    maps, report = fit_maps(maps, capture, cfg, heldout, settings, checkpoint_dir,
                            progress=progress)
    report.timings["prepare"] = prep
    return maps, report
