"""Exit-criteria suite. Each test records one PASS/FAIL line in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the full set takes
roughly a quarter of an hour on one core, most of it the 1e8-ray point of
the noise-law check.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from fvsim.instrument import build_default_instrument
from fvsim.optics import REFLECTED, hg_lobe_samples, hg_surface_samples, refract
from fvsim.psf import apply_psf
from fvsim.renderer import RenderJob, default_workers, estimate_noise, render_image
from fvsim.scanning import ScanConfig, acquire_stack, fit_plane, focus_metric, reconstruct_topography, topography_pitch
from fvsim.scene import (ImplicitPlane, MeshGeometry, Scene, TriangleMesh, generate_surface,
                         heightfield_object)
from fvsim.scene.bvh import nearest_hits as mesh_nearest_hits
from fvsim.scene.objects import nearest_hits as scene_nearest_hits
from fvsim.scene.surfaces import Heightfield, MicroRoughnessParams, add_micro_roughness, predicted_roughness_sigma
from fvsim.optics import HGSurface

from conftest import record_criterion

pytestmark = pytest.mark.acceptance


def test_criterion_1_physics_kernels():
    t0 = time.perf_counter()
    up = np.array([0.0, 0.0, 1.0])
    means = {g: float(hg_lobe_samples(up, g, 1_000_000, seed=1)[:, 2].mean()) for g in (0.3, 0.65, 0.8, 1.0)}
    mean_ok = all(abs(m - g) <= 0.005 for g, m in means.items())
    lam = hg_surface_samples((0, 0, -1), up, 0.0, 100_000, seed=2)[:, 2]
    ks_p = stats.kstest(lam, lambda c: np.clip(c, 0, 1) ** 2).pvalue
    # Snell at 30 deg air -> n=1.5, and total internal reflection from n=1.5 at 45 deg
    t = math.radians(30)
    out = refract((math.sin(t), 0, -math.cos(t)), up, 1.0, 1.5).outgoing_direction
    snell_err = abs(math.sin(t) - 1.5 * math.hypot(out[0], out[1]))
    s45 = math.sqrt(0.5)
    tir = refract((s45, 0, -s45), up, 1.5, 1.0)
    tir_err = float(np.max(np.abs(tir.outgoing_direction - (s45, 0, s45))))
    elapsed = time.perf_counter() - t0
    ok = mean_ok and ks_p > 0.01 and snell_err < 1e-10 and tir.kind == REFLECTED and tir_err < 1e-10 and elapsed < 10
    record_criterion(1, ok, f"HG mean cos {({g: round(m, 4) for g, m in means.items()})}, "
                            f"Lambert KS p={ks_p:.3f}, Snell err {snell_err:.1e}, TIR err {tir_err:.1e}, "
                            f"{elapsed:.1f} s")
    assert ok


def random_mesh(rng, n):
    centers = rng.uniform(-1, 1, (n, 1, 3))
    size = 2.0 / n ** (1 / 3)
    return TriangleMesh.from_soup(centers + rng.uniform(-size, size, (n, 3, 3)))


def test_criterion_2_bvh_equals_linear_scan():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches, worst_dt, total_tris = 0, 0.0, 0
    for k in range(100):
        n_total = 10_000 if k == 0 else int(10 ** rng.uniform(1, 4))
        n_obj = int(rng.integers(1, 4))
        parts = np.array_split(np.arange(n_total), n_obj)
        meshes = [random_mesh(rng, len(p)) for p in parts if len(p) > 0]
        scene = Scene()
        for m in meshes:
            scene.add(MeshGeometry(m), HGSurface(0.5))
        total_tris += sum(m.n_triangles for m in meshes)
        origins = rng.uniform(-1.5, 1.5, (10_000, 3))
        dirs = rng.standard_normal((10_000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t_bvh, oid_bvh, tri_bvh = scene_nearest_hits(scene, origins, dirs)
        # oracle: linear scan over every triangle of every object, lower object id wins ties
        best_t = np.full(len(origins), np.inf)
        best_o = np.full(len(origins), -1)
        best_tri = np.full(len(origins), -1)
        for oid, m in enumerate(scene.objects):
            t_lin, tri_lin = mesh_nearest_hits(m.geometry.bvh, origins, dirs, use_bvh=False)
            closer = t_lin < best_t
            best_t[closer], best_o[closer], best_tri[closer] = t_lin[closer], oid, tri_lin[closer]
        mismatches += int(np.sum((oid_bvh != best_o) | (tri_bvh != best_tri)))
        hit = np.isfinite(best_t)
        if np.any(np.isfinite(t_bvh) != hit):
            mismatches += int(np.sum(np.isfinite(t_bvh) != hit))
        if hit.any():
            worst_dt = max(worst_dt, float(np.max(np.abs(t_bvh[hit] - best_t[hit]))))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_dt <= 1e-9 and elapsed < 60
    record_criterion(2, ok, f"100 scenes, {total_tris} triangles, 1e6 rays: {mismatches} mismatches, "
                            f"max |dt| {worst_dt:.1e}, {elapsed:.1f} s")
    assert ok


def benchmark_scene():
    scene = Scene()
    scene.add(ImplicitPlane(), HGSurface(0.3))
    return scene


@pytest.mark.slow
def test_criterion_3_noise_law():
    t0 = time.perf_counter()
    inst = build_default_instrument(detector_pixels=32)
    scene = benchmark_scene()
    workers = default_workers()
    noise = {}
    for n in (10 ** 5, 10 ** 6, 10 ** 7, 10 ** 8):
        images = [render_image(RenderJob(inst, scene, n, seed, batch_size=1_000_000), workers)[0]
                  for seed in (11, 12, 13)]
        noise[n] = estimate_noise(images).summary
    values = [noise[n] for n in sorted(noise)]
    decreasing = all(a > b for a, b in zip(values, values[1:]))
    ratio = noise[10 ** 6] / noise[10 ** 8]
    elapsed = time.perf_counter() - t0
    ok = decreasing and 8.0 <= ratio <= 12.0
    record_criterion(3, ok, f"noise {[round(v, 4) for v in values]}, 1e6/1e8 ratio {ratio:.2f}, "
                            f"{elapsed / 60:.1f} min on {workers} worker(s)")
    assert ok


@pytest.mark.slow
def test_criterion_4_roughness_trend():
    t0 = time.perf_counter()
    inst = build_default_instrument()
    h = generate_surface("plateau", nx=141, dx=1.0)
    counts = []
    for g in (0.3, 0.65, 1.0):
        scene = Scene()
        heightfield_object(h, HGSurface(g), scene)
        _, st = render_image(RenderJob(inst, scene, 10_000_000, 1), default_workers())
        counts.append(st.rays_detected)
    elapsed = time.perf_counter() - t0
    ok = counts[0] > counts[1] > counts[2] and elapsed < 600
    record_criterion(4, ok, f"detector counts for g=0.3/0.65/1: {counts}, {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_5_focus_variation_measurement():
    t0 = time.perf_counter()
    inst = build_default_instrument(na=0.8, magnification=20, detector_pixels=32, detector_side=0.32,
                                    mask_cell_um=1.0, objective="ideal")
    pitch = topography_pitch(inst)
    workers = default_workers()

    def measure(h, z0, z1):
        scene = Scene()
        heightfield_object(h, HGSurface(0.8), scene)
        scan = ScanConfig(z0, z1, 0.05, 1_000_000, seed=3)
        return reconstruct_topography(acquire_stack(inst, scene, scan, workers), pixel_pitch=pitch), scan

    z_flat = 0.3
    flat, scan = measure(generate_surface("plane", {"height": z_flat}, nx=161, dx=0.25), -0.7, 1.3)
    flat_err = abs(float(np.nanmedian(flat.heights)) - z_flat)
    n_flat = scan.n_images

    incl, _ = measure(generate_surface("inclined_plane", {"slope_x": 0.05}, nx=161, dx=0.25), -1.0, 1.0)
    _, res = fit_plane(incl)
    incl_rms = float(np.sqrt(np.nanmean(res ** 2)))

    step, _ = measure(generate_surface("step", {"height": 2.0}, nx=161, dx=0.25), -0.5, 2.5)
    x = step.x_coords()
    # plateau medians away from the edge, where the focus window straddles both levels
    recovered = float(np.nanmedian(step.heights[:, x > 2]) - np.nanmedian(step.heights[:, x < -2]))
    elapsed = time.perf_counter() - t0
    ok = (n_flat == 41 and flat_err <= 0.025 and incl_rms <= 0.05 and abs(recovered - 2.0) <= 0.05)
    record_criterion(5, ok, f"flat median error {flat_err:.4f} um ({n_flat} images), inclined fit RMS "
                            f"{incl_rms:.4f} um, step {recovered:.3f} um, {elapsed / 60:.1f} min")
    assert ok


def criterion_6_job():
    inst = build_default_instrument(detector_pixels=32)
    return RenderJob(inst, benchmark_scene(), 4_000_000, 21, batch_size=100_000)


def test_criterion_6_determinism():
    job = criterion_6_job()
    a, _ = render_image(job, workers=1)
    b, _ = render_image(job, workers=8)
    identical = bool(np.array_equal(a.counts, b.counts))
    record_criterion(6, identical, "bit-identical images for 1 and 8 workers" if identical
                     else "images differ between 1 and 8 workers")
    assert identical


CORES = default_workers()


@pytest.mark.xfail(CORES < 8, reason=f"only {CORES} CPU core(s) available; 8 workers cannot run "
                                     "four times faster than one", strict=False)
def test_criterion_6_scaling():
    job = criterion_6_job()
    render_image(job, workers=1)  # warm caches
    t0 = time.perf_counter()
    render_image(job, workers=1)
    t1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    render_image(job, workers=8)
    t8 = time.perf_counter() - t0
    ok = t8 <= t1 / 4
    line = f"8-worker/1-worker wall time {t8:.2f}/{t1:.2f} s = {t8 / t1:.2f} (needs <= 0.25) on {CORES} core(s)"
    prev = __import__("conftest").ACCEPTANCE_LINES.get(6, "")
    record_criterion(6, ok and prev.startswith("criterion 6: PASS"), line)
    assert ok, line


def test_criterion_7_micro_roughness():
    rel = {}
    for dx in (1.0, 0.5, 0.25):
        n = int(round(512 / dx)) if dx >= 0.5 else 1024
        h = Heightfield(n, n, dx, dx, np.zeros((n, n)))
        p = MicroRoughnessParams(0.0, 0.1, 1.0, 5)
        r = add_micro_roughness(h, p).heights
        rel[dx] = r.std() / predicted_roughness_sigma(h, p) - 1
    ok = all(abs(v) <= 0.05 for v in rel.values())
    record_criterion(7, ok, "measured/predicted sigma - 1 by grid spacing: "
                            + ", ".join(f"dx={dx}: {v:+.4f}" for dx, v in rel.items()))
    assert ok


def test_criterion_8_psf():
    inst = build_default_instrument(na=0.8, magnification=20, detector_pixels=32, mask_cell_um=1.0,
                                    objective="ideal")
    scene = Scene()
    scene.add(ImplicitPlane(), HGSurface(0.8))
    image, _ = render_image(RenderJob(inst, scene, 1_000_000, 8))
    kernels = {"gauss 0.5": dict(sigma=0.5), "gauss 1": dict(sigma=1.0), "gauss 2": dict(sigma=2.0),
               "box 3": dict(kernel=np.ones((3, 3))),
               "random 5x5": dict(kernel=np.random.default_rng(0).uniform(0, 1, (5, 5)))}
    base = focus_metric(image).mean()
    worst_cons, all_lower = 0.0, True
    for kw in kernels.values():
        out = apply_psf(image, **kw)
        worst_cons = max(worst_cons, abs(out.counts.sum() / image.counts.sum() - 1))
        all_lower &= bool(focus_metric(out).mean() < base)
    ok = worst_cons <= 1e-6 and all_lower
    record_criterion(8, ok, f"max relative sum change {worst_cons:.1e}, focus metric lowered by all "
                            f"{len(kernels)} kernels: {all_lower}")
    assert ok
