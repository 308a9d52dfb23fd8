import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from uvsplat import io
from uvsplat.cli import main
from uvsplat.errors import InvalidConfig
from uvsplat.io import SceneConfig


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


# containers ----------------------------------------------------------------

def test_container_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(5, 7, 3)).astype(np.float32),
              "b": rng.random((5, 7)).astype(np.float32),
              "c": np.array([[np.float32(1e-45), -0.0, np.inf]], np.float32)}
    io.write_container(tmp_path / "c", arrays, "test", 0.01, 2, {"a": "noise"})
    back, manifest = io.read_container(tmp_path / "c")
    for k, v in arrays.items():
        ref = v if v.ndim == 3 else v[..., None]
        assert back[k].tobytes() == ref.tobytes()
    assert manifest["d"] == 0.01 and manifest["S"] == 2 and manifest["maps"] == ["a", "b", "c"]
    hdr = json.loads((tmp_path / "c" / "a.json").read_text())
    assert hdr == {"name": "a", "height": 5, "width": 7, "channels": 3, "dtype": "f32",
                   "byte_order": "little", "semantics": "noise"}


def test_container_rejects_bad_inputs(tmp_path):
    io.write_container(tmp_path / "c", {"a": np.zeros((2, 2), np.float32)}, "test", 0.01, 0)
    raw = tmp_path / "c" / "a.f32"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(InvalidConfig):
        io.read_container(tmp_path / "c")
    man = tmp_path / "c" / "manifest.json"
    data = json.loads(man.read_text())
    data["format_version"] = "7.0"
    man.write_text(json.dumps(data))
    with pytest.raises(InvalidConfig):
        io.read_container(tmp_path / "c")
    with pytest.raises(InvalidConfig):
        io.read_container(tmp_path / "nothing")


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(1).random((6, 5, 3))
    io.write_image(tmp_path / "x.png", img)
    assert np.abs(io.read_image(tmp_path / "x.png") - img).max() <= 0.5 / 255 + 1e-12
    a = np.random.default_rng(2).random((6, 5, 1))
    io.write_image(tmp_path / "a.png", a, bits=16)
    assert np.abs(io.read_image(tmp_path / "a.png")[..., 0] - a[..., 0]).max() <= 0.5 / 65535 + 1e-12


# scene config ----------------------------------------------------------------

def test_scene_config_precedence_and_keys(tmp_path):
    (tmp_path / "scene.json").write_text(json.dumps({"d": 0.02, "S": 2, "heldout": [1]}))
    cfg = SceneConfig.from_file(tmp_path / "scene.json")
    assert (cfg.d, cfg.S, cfg.resolution, cfg.heldout) == (0.02, 2, 512, [1])
    over = cfg.with_overrides(S=3, d=None)
    assert (over.d, over.S) == (0.02, 3) and cfg.S == 2
    (tmp_path / "bad.json").write_text(json.dumps({"scaffolds": 3}))
    with pytest.raises(InvalidConfig):
        SceneConfig.from_file(tmp_path / "bad.json")
    with pytest.raises(InvalidConfig):
        SceneConfig(template="missing.obj", base_dir=str(tmp_path)).validate()


def test_scene_config_yaml(tmp_path):
    (tmp_path / "scene.yaml").write_text("d: 0.005\nS: 1\ntemplate: t.obj\n")
    cfg = SceneConfig.from_file(tmp_path / "scene.yaml")
    assert cfg.d == 0.005 and cfg.resolve(cfg.template) == str(tmp_path / "t.obj")


# command line ------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--out", str(root), "--image-size", "32"]) == 0
    return root


def run(scene, *argv):
    return main(list(argv) + ["--config", str(scene / "scene.json"), "--resolution", "16"])


@pytest.fixture(scope="module")
def pipeline(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(scene, "scaffold", "--out", str(out / "geo"), "--S", "1") == 0
    assert run(scene, "aggregate", "--geometry", str(out / "geo"), "--out",
               str(out / "app"), "--S", "1") == 0
    assert run(scene, "fit", "--geometry", str(out / "geo"), "--appearance", str(out / "app"),
               "--out", str(out / "fit"), "--S", "1", "--iterations", "4", "--lr", "0.05",
               "--checkpoint-interval", "2", "--checkpoint-dir", str(out / "ckpt"),
               "--report", str(out / "report.json")) == 0
    return out


def test_synth_layout(scene):
    data = json.loads((scene / "scene.json").read_text())
    n = len(json.loads((scene / "cameras.json").read_text()))
    assert len(list((scene / "images").iterdir())) == n == len(list((scene / "masks").iterdir()))
    assert data["heldout"] and max(data["heldout"]) == n - 1


def test_scaffold_counts(scene, tmp_path, capsys):
    assert run(scene, "scaffold", "--out", str(tmp_path / "g0"), "--S", "0") == 0
    printed = capsys.readouterr().out
    positions, offsets, _, mask, manifest = io.load_geometry_maps(tmp_path / "g0")
    assert len(positions) == 1 and len(offsets) == 0
    assert f"foreground texels: {mask.sum()}" in printed and f"gaussians: {mask.sum()}" in printed
    assert run(scene, "scaffold", "--out", str(tmp_path / "g4")) == 0
    maps = json.loads((tmp_path / "g4" / "manifest.json").read_text())["maps"]
    assert sum(m.startswith(("position_", "offset_")) for m in maps) == 9


def test_scaffold_rerun_is_byte_identical(scene, tmp_path):
    for name in ("a", "b"):
        assert run(scene, "scaffold", "--out", str(tmp_path / name), "--S", "2") == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_pipeline_containers_round_trip(pipeline, tmp_path):
    for name in ("geo", "app", "fit", "ckpt/iter_000002"):
        arrays, manifest = io.read_container(pipeline / name)
        io.write_container(tmp_path / name, arrays, manifest["kind"], manifest["d"],
                           manifest["S"])
        for k in arrays:
            assert (tmp_path / name / f"{k}.f32").read_bytes() == \
                (pipeline / name / f"{k}.f32").read_bytes()


def test_fit_report_and_resume(scene, pipeline, tmp_path):
    report = json.loads((pipeline / "report.json").read_text())
    assert len(report["loss_trace"]) == 4
    assert [c["iteration"] for c in report["checkpoints"]] == [2, 4]
    assert run(scene, "fit", "--resume", str(pipeline / "ckpt" / "iter_000002"), "--S", "1",
               "--iterations", "4", "--lr", "0.05", "--out", str(tmp_path / "fit"),
               "--report", str(tmp_path / "r.json")) == 0
    assert json.loads((tmp_path / "r.json").read_text())["loss_trace"] == report["loss_trace"]
    assert dir_bytes(tmp_path / "fit") == dir_bytes(pipeline / "fit")


def test_render_and_eval(scene, pipeline, tmp_path, capsys):
    assert main(["render", "--maps", str(pipeline / "fit"), "--cameras",
                 str(scene / "cameras.json"), "--view", "1", "--out", str(tmp_path / "r.png"),
                 "--alpha-out", str(tmp_path / "a.png")]) == 0
    assert io.read_image(tmp_path / "r.png").shape == (32, 32, 3)
    from PIL import Image
    with Image.open(tmp_path / "a.png") as im:
        assert np.asarray(im).dtype in (np.uint16, np.int32)
    capsys.readouterr()
    assert run(scene, "eval", "--maps", str(pipeline / "fit"), "--out",
               str(tmp_path / "m.json"), "--S", "1") == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert {"view_id", "psnr_db", "ssim"} <= set(rep["views"][0])
    assert json.loads(capsys.readouterr().out) == rep


def test_render_empty_cloud_is_black(scene, pipeline, tmp_path):
    maps = io.load_param_maps(pipeline / "fit")
    maps.uv_mask[:] = False
    io.save_param_maps(tmp_path / "empty", maps)
    assert main(["render", "--maps", str(tmp_path / "empty"), "--cameras",
                 str(scene / "cameras.json"), "--out", str(tmp_path / "r.png"),
                 "--alpha-out", str(tmp_path / "a.png")]) == 0
    assert not io.read_image(tmp_path / "r.png").any()
    assert not io.read_image(tmp_path / "a.png").any()


def test_ablate_csv(scene, tmp_path):
    assert run(scene, "ablate", "--levels", "0,1", "--iterations", "2", "--lr", "0.05",
               "--out", str(tmp_path / "abl.csv")) == 0
    with open(tmp_path / "abl.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["S"] for r in rows] == ["0", "1"]
    assert all(float(r["psnr_db"]) > 0 for r in rows)


def test_texture_transfer(scene, tmp_path):
    tex = np.random.default_rng(0).random((8, 8, 3))
    io.write_image(tmp_path / "tex.png", tex)
    assert main(["texture-transfer", "--template", str(scene / "template.obj"), "--scan",
                 str(scene / "template.obj"), "--texture", str(tmp_path / "tex.png"),
                 "--resolution", "8", "--out", str(tmp_path / "out.png")]) == 0
    assert io.read_image(tmp_path / "out.png").shape == (8, 8, 3)


def test_exit_codes(scene, pipeline, tmp_path, capsys):
    assert main(["scaffold", "--template", str(tmp_path / "nope.obj"), "--out",
                 str(tmp_path / "g")]) == 2
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 zero\n")
    assert main(["scaffold", "--template", str(bad), "--out", str(tmp_path / "g")]) == 2
    # geometry maps built from one template are refused for another
    from uvsplat.geometry import save_obj
    from uvsplat.synthetic import uv_sphere
    save_obj(tmp_path / "other.obj", uv_sphere(0.2, 6, 12))
    assert run(scene, "aggregate", "--geometry", str(pipeline / "geo"), "--out",
               str(tmp_path / "app"), "--template", str(tmp_path / "other.obj")) == 2
    assert main(["render", "--maps", str(pipeline / "fit"), "--cameras",
                 str(scene / "cameras.json"), "--view", "99", "--out",
                 str(tmp_path / "r.png")]) == 2
    assert run(scene, "eval", "--maps", str(pipeline / "geo")) == 2
    assert run(scene, "fit", "--resume", str(pipeline / "geo"), "--out", str(tmp_path / "f")) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--out", str(tmp_path / "f")])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "uvsplat.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "scaffold" in proc.stdout


def test_published_defaults():
    from uvsplat.fitting import FitConfig
    from uvsplat.objectives import LossWeights
    cfg = SceneConfig()
    assert (cfg.d, cfg.S) == (0.01, 4)
    w = LossWeights()
    assert (w.l1, w.ssim, w.mask) == (0.8, 0.2, 0.02)
    fc = FitConfig()
    assert (fc.lr, fc.beta1, fc.beta2, fc.eps, fc.weight_decay) == (2e-4, 0.9, 0.999, 1e-8, 0.0)
