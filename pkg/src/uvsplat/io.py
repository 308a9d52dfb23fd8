"""On-disk formats: map containers, PNG images and scene configuration.

A map container is a directory::

    manifest.json           {"format_version", "kind", "d", "S", "maps": [...], ...}
    <name>.json             {"name", "height", "width", "channels", "dtype": "f32",
                             "byte_order": "little", "semantics"}
    <name>.f32              raw little-endian float32, H * W * C values

Everything is written with sorted keys and no timestamps so reruns are
byte-identical.
"""

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidConfig
from .gaussian_model import ParamMapSet

FORMAT_VERSION = "1.0"
_F32 = np.dtype("<f4")


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_container(path, arrays, kind, d, S, semantics=None, meta=None):
    """Write named ``(H, W)`` or ``(H, W, C)`` arrays plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    semantics = semantics or {}
    names = list(arrays)
    for name in names:
        arr = np.asarray(arrays[name])
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3:
            raise ValueError(f"map {name} must be 2D or 3D, got shape {arr.shape}")
        h, w, c = arr.shape
        _dump_json(path / f"{name}.json", {
            "name": name, "height": h, "width": w, "channels": c, "dtype": "f32",
            "byte_order": "little", "semantics": semantics.get(name, "")})
        (path / f"{name}.f32").write_bytes(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "d": float(d), "S": int(S),
                "maps": names}
    if meta:
        manifest.update(meta)
    _dump_json(path / "manifest.json", manifest)
    return path


def read_manifest(path):
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise InvalidConfig(f"{path} is not a map container (no manifest.json)") from None
    version = str(manifest.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise InvalidConfig(f"{path}: unsupported container version {version!r}")
    return manifest


def read_container(path):
    """Return ``(arrays, manifest)``; arrays come back as float32 ``(H, W, C)``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for name in manifest["maps"]:
        with open(path / f"{name}.json") as fh:
            hdr = json.load(fh)
        if hdr.get("dtype") != "f32" or hdr.get("byte_order") != "little":
            raise InvalidConfig(f"{path}/{name}: only little-endian f32 maps are supported")
        h, w, c = hdr["height"], hdr["width"], hdr["channels"]
        raw = (path / f"{name}.f32").read_bytes()
        if len(raw) != 4 * h * w * c:
            raise InvalidConfig(f"{path}/{name}: expected {4 * h * w * c} bytes, found {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype=_F32).reshape(h, w, c).astype(np.float32)
    return arrays, manifest


def _levels(arrays, prefix, count):
    return np.stack([arrays[f"{prefix}_{i}"] for i in range(count)])


def save_geometry(path, geo):
    arrays = {f"position_{i}": geo.position_maps[i] for i in range(geo.level_count + 1)}
    arrays.update({f"offset_{i}": geo.offset_maps[i - 1] for i in range(1, geo.level_count + 1)})
    arrays["normal"] = geo.normal_map
    arrays["uv_mask"] = geo.uv_mask.astype(np.float32)
    sem = {k: ("scaffold position, meters" if k.startswith("position") else
               "offset to previous scaffold, meters" if k.startswith("offset") else
               "unit normal" if k == "normal" else "foreground texel mask") for k in arrays}
    return write_container(path, arrays, "geometry", geo.offset_step, geo.level_count, sem,
                           {"foreground_texels": geo.foreground_count})


def load_geometry_maps(path):
    """Read a geometry container as ``(positions, offsets, normal, uv_mask, manifest)``."""
    arrays, manifest = read_container(path)
    if manifest["kind"] != "geometry":
        raise InvalidConfig(f"{path} holds '{manifest['kind']}' maps, expected geometry")
    S = manifest["S"]
    positions = _levels(arrays, "position", S + 1)
    offsets = (np.stack([arrays[f"offset_{i}"] for i in range(1, S + 1)]) if S
               else np.zeros((0,) + positions.shape[1:], np.float32))
    return positions, offsets, arrays["normal"], arrays["uv_mask"][..., 0] > 0.5, manifest


def save_appearance(path, colors, observed, uv_mask, d):
    """Aggregated colors and the per-level observed-texel masks."""
    L = len(colors)
    arrays = {f"color_{i}": colors[i] for i in range(L)}
    arrays.update({f"observed_{i}": np.asarray(observed[i], np.float32) for i in range(L)})
    sem = {k: ("aggregated RGB in [0, 1]" if k.startswith("color") else
               "texel seen by at least one camera") for k in arrays}
    return write_container(path, arrays, "appearance", d, L - 1, sem,
                           {"unobserved_texels": [int((uv_mask & ~np.asarray(o, bool)).sum())
                                                 for o in observed]})


def load_appearance(path):
    """Return ``(colors, observed, manifest)``."""
    arrays, manifest = read_container(path)
    if manifest["kind"] != "appearance":
        raise InvalidConfig(f"{path} holds '{manifest['kind']}' maps, expected appearance")
    L = manifest["S"] + 1
    return _levels(arrays, "color", L), _levels(arrays, "observed", L)[..., 0] > 0.5, manifest


_PARAM_FIELDS = (("positions", "position"), ("colors", "color"), ("quats_raw", "quat_raw"),
                 ("scales_raw", "scale_raw"), ("opacities_raw", "opacity_raw"))


def param_arrays(maps):
    arrays = {}
    for attr, prefix in _PARAM_FIELDS:
        stack = getattr(maps, attr)
        for i in range(maps.level_count + 1):
            arrays[f"{prefix}_{i}"] = stack[i]
    if maps.color_residual is not None:
        for i in range(maps.level_count + 1):
            arrays[f"color_residual_{i}"] = maps.color_residual[i]
    arrays["uv_mask"] = maps.uv_mask.astype(np.float32)
    return arrays


def save_param_maps(path, maps, kind="params", extra=None, meta=None):
    arrays = param_arrays(maps)
    if extra:
        arrays.update(extra)
    return write_container(path, arrays, kind, maps.offset_step, maps.level_count, meta=meta)


def param_maps_from_arrays(arrays, manifest):
    L = manifest["S"] + 1
    kw = {attr: _levels(arrays, prefix, L) for attr, prefix in _PARAM_FIELDS}
    residual = (_levels(arrays, "color_residual", L) if "color_residual_0" in arrays else None)
    return ParamMapSet(uv_mask=arrays["uv_mask"][..., 0] > 0.5, offset_step=float(manifest["d"]),
                       color_residual=residual, **kw)


def load_param_maps(path):
    arrays, manifest = read_container(path)
    if manifest["kind"] not in ("params", "checkpoint"):
        raise InvalidConfig(f"{path} holds '{manifest['kind']}' maps, expected fitted parameters")
    return param_maps_from_arrays(arrays, manifest)


def read_image(path):
    """PNG (8- or 16-bit) to float RGB in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32) or mode.startswith("I"):
        out = arr.astype(np.float64) / 65535.0
    else:
        out = arr.astype(np.float64)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    return out[..., :3]


def read_mask(path):
    """Single-channel PNG thresholded at 0.5."""
    img = read_image(path)
    return (img[..., 0] > 0.5).astype(np.float64)


def write_image(path, img, bits=8):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if bits == 16:
        if img.ndim == 3:
            raise ValueError("16-bit output is supported for single-channel images only")
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


@dataclass
class SceneConfig:
    """Paths and knobs of one subject; ``None`` paths are simply absent."""

    template: str = None
    cameras: str = None
    images: str = None
    masks: str = None
    heldout: list = field(default_factory=list)
    d: float = 0.01
    S: int = 4
    resolution: int = 512
    iterations: int = 2000
    lr: float = 2e-4
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 0
    occlusion_bias: float = 0.005
    threads: int = None
    base_dir: str = field(default=".", repr=False)

    def resolve(self, p):
        return None if p is None else str(Path(self.base_dir) / p)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        with open(path) as fh:
            if path.suffix in (".yaml", ".yml"):
                import yaml
                data = yaml.safe_load(fh) or {}
            else:
                data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"{path}: unknown config keys {sorted(unknown)}")
        data.setdefault("base_dir", str(path.parent))
        return cls(**data)

    def with_overrides(self, **overrides):
        cfg = SceneConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def validate(self):
        if not self.d > 0:
            raise InvalidConfig("d must be positive")
        if self.S < 0:
            raise InvalidConfig("S must be non-negative")
        if self.resolution < 1:
            raise InvalidConfig("resolution must be positive")
        for name in ("template", "cameras", "images", "masks"):
            p = self.resolve(getattr(self, name))
            if p is not None and not os.path.exists(p):
                raise InvalidConfig(f"{name} path does not exist: {p}")
        return self


def list_images(directory):
    exts = (".png",)
    return sorted(str(p) for p in Path(directory).iterdir() if p.suffix.lower() in exts)
