import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from fvsim import __version__
from fvsim.cli import main
from fvsim.config import build_scene, load_config
from fvsim.io import config_hash, from_uint16, provenance, read_image, to_uint16, write_image
from fvsim.renderer import DetectorImage
from fvsim.scene import TriangleMesh, write_heightfield, write_stl
from fvsim.scene.surfaces import generate_surface

REPO = Path(__file__).resolve().parents[1]

SMALL = {
    "schema_version": 1,
    "instrument": {"na": 0.15, "detector_pixels": 16, "detector_side": 0.08, "objective": "ideal"},
    "scene": {"objects": [{"type": "surface", "kind": "plane", "nx": 41, "dx": 1.0,
                           "material": {"model": "hg", "g": 0.5}}]},
    "render": {"n_rays": "2e4", "seed": 3, "batch_size": 10000},
    "sweep": {"n_rays": [5000, 20000], "g": [0.5, 1.0], "seeds": 2},
    "scan": {"z_start": -0.2, "z_end": 0.2, "delta_z": 0.1, "rays_per_image": 5000, "window": 3},
    "psf": {"sigma": 1.0},
}


def write_config(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def run_cli(tmp_path, command, data=None, *extra):
    cfg = write_config(tmp_path, data or SMALL)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


class TestImageFiles:
    def test_normalisation_is_invertible(self, rng):
        counts = rng.poisson(300, (10, 12)).astype(float)
        raster, raw_max = to_uint16(counts)
        assert raster.dtype == np.uint16 and raster.max() == 65535
        assert np.max(np.abs(from_uint16(raster, raw_max) - counts)) <= 0.5 * raw_max / 65535 * (1 + 1e-9)
        assert to_uint16(np.zeros((2, 2)))[0].sum() == 0

    def test_png_and_sidecar(self, tmp_path, rng):
        counts = rng.poisson(40, (5, 7)).astype(float)
        im = DetectorImage(7, 5, counts, {"n_rays": 99, "seed": 4, "z": 0.25})
        path = write_image(tmp_path / "a.png", im, provenance({"k": 1}, 4))
        png = Image.open(path)
        assert png.mode.startswith("I;16") and png.size == (7, 5)
        side = json.loads((tmp_path / "a.json").read_text())
        assert side["n_rays"] == 99 and side["z"] == 0.25 and side["raw_max"] == counts.max()
        assert side["provenance"] == {"code_version": __version__, "config_hash": config_hash({"k": 1}),
                                      "seed": 4}
        back = read_image(path)
        assert np.allclose(back.counts, counts, atol=0.5 * counts.max() / 65535)
        assert back.meta["n_rays"] == 99

    def test_config_hash_is_order_independent(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


class TestConfig:
    def test_load_and_build(self, tmp_path):
        cfg = load_config(write_config(tmp_path, SMALL))
        assert cfg.render.n_rays == 20000
        scene, reference = build_scene(cfg.scene)
        assert len(scene.objects) == 1 and reference.nx == 41

    def test_shipped_configs_validate(self):
        for path in sorted((REPO / "configs").glob("*.yaml")):
            load_config(path)

    def test_relative_paths_resolve_against_config(self, tmp_path):
        h = generate_surface("sinusoid", {"amplitude": 0.5, "wavelength": 4}, nx=20)
        (tmp_path / "data").mkdir()
        write_heightfield(h, tmp_path / "data" / "h.txt")
        mesh = TriangleMesh(np.array([[0, 0, 0], [100, 0, 0], [0, 100, 0]], float), [[0, 1, 2]])
        write_stl(mesh, tmp_path / "data" / "tri.stl")
        data = dict(SMALL, scene={"objects": [
            {"type": "heightfield_file", "path": "data/h.txt", "offset_um": 1.0},
            {"type": "stl", "path": "data/tri.stl", "offset": [0, 0, -0.01]}]})
        cfg = load_config(write_config(tmp_path, data))
        scene, reference = build_scene(cfg.scene)
        assert len(scene.objects) == 2
        assert np.allclose(reference.heights, h.heights + 1.0)
        # STL coordinates are read as µm by default
        assert np.allclose(scene.objects[1].geometry.mesh.vertices.max(axis=0), (0.1, 0.1, 0.0))

    def test_g_override(self, tmp_path):
        cfg = load_config(write_config(tmp_path, SMALL))
        scene, _ = build_scene(cfg.scene, g_override=0.9)
        assert scene.materials[0].g == 0.9


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        assert run_cli(tmp_path, "validate") == 0
        assert "ok" in capsys.readouterr().out

    @pytest.mark.parametrize("patch,where", [
        ({"instrument": {"na": 1.2}}, "instrument.na"),
        ({"render": {"n_rays": 0}}, "render.n_rays"),
        ({"bogus": 1}, "bogus"),
        ({"scene": {"objects": [{"type": "stl", "path": "missing.stl"}]}}, "scene.objects.0.stl.path"),
        ({"scene": {"objects": [{"type": "surface", "kind": "wavy"}]}}, "kind"),
        ({"scan": {"z_start": 1.0, "z_end": 0.0}}, "scan"),
        ({"schema_version": 2}, "schema_version"),
    ])
    def test_invalid_config_exit_1(self, tmp_path, capsys, patch, where):
        data = dict(SMALL)
        data.update(patch)
        assert run_cli(tmp_path, "validate", data) == 1
        err = capsys.readouterr().err
        assert "invalid configuration" in err and where in err

    def test_infeasible_optics_exit_1(self, tmp_path, capsys):
        data = dict(SMALL, instrument={"na": 0.8, "objective": "doublet"})
        assert run_cli(tmp_path, "render", data) == 1
        assert "infeasible" in capsys.readouterr().err

    def test_missing_section_exit_1(self, tmp_path):
        data = {k: v for k, v in SMALL.items() if k != "scan"}
        assert run_cli(tmp_path, "measure", data) == 1

    def test_runtime_error_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not a png")
        assert run_cli(tmp_path, "psf", None, "--image", str(bad)) == 2
        assert "error" in capsys.readouterr().err

    def test_render_outputs_and_seed_override(self, tmp_path):
        assert run_cli(tmp_path, "render", None, "--seed", "11") == 0
        out = tmp_path / "out"
        stats = json.loads((out / "stats.json").read_text())
        assert stats["census_balanced"] and stats["stats"]["rays_emitted"] == 20000
        assert stats["provenance"]["seed"] == 11
        side = json.loads((out / "image.json").read_text())
        assert side["provenance"]["code_version"] == __version__
        assert len(side["provenance"]["config_hash"]) == 64

    def test_render_is_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        assert run_cli(a, "render") == 0 and run_cli(b, "render", None, "--threads", "2") == 0
        assert np.array_equal(np.asarray(Image.open(a / "out" / "image.png")),
                              np.asarray(Image.open(b / "out" / "image.png")))

    def test_sweep(self, tmp_path):
        assert run_cli(tmp_path, "sweep") == 0
        report = json.loads((tmp_path / "out" / "sweep_report.json").read_text())
        assert len(report["cells"]) == 4
        assert all("noise" in c for c in report["cells"])
        assert (tmp_path / "out" / "g0.5_n5000.png").exists()

    def test_measure(self, tmp_path):
        assert run_cli(tmp_path, "measure") == 0
        out = tmp_path / "out"
        report = json.loads((out / "measurement_report.json").read_text())
        assert report["n_images"] == 5
        assert len(list((out / "stack").glob("z*.png"))) == 5
        assert (out / "topography.txt").exists() and (out / "valid_mask.txt").exists()

    def test_measure_without_reference(self, tmp_path):
        data = dict(SMALL, scene={"objects": [{"type": "plane", "material": {"model": "hg", "g": 0.5}}]})
        assert run_cli(tmp_path, "measure", data) == 0
        report = json.loads((tmp_path / "out" / "measurement_report.json").read_text())
        assert report["comparison"] is None and "notice" in report

    def test_psf_round_trip(self, tmp_path):
        assert run_cli(tmp_path, "render") == 0
        src = tmp_path / "out" / "image.png"
        assert run_cli(tmp_path, "psf", None, "--image", str(src)) == 0
        a, b = read_image(src), read_image(tmp_path / "out" / "image_psf.png")
        assert b.counts.sum() == pytest.approx(a.counts.sum(), rel=1e-3)

    def test_console_script(self, tmp_path):
        cfg = write_config(tmp_path, SMALL)
        res = subprocess.run([sys.executable, "-m", "fvsim.cli", "validate", "--config", str(cfg)],
                             capture_output=True, text=True)
        assert res.returncode == 0
        res = subprocess.run([sys.executable, "-m", "fvsim.cli", "--version"], capture_output=True, text=True)
        assert __version__ in res.stdout
