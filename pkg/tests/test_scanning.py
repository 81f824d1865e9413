import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from fvsim.instrument import build_default_instrument
from fvsim.optics import HGSurface
from fvsim.renderer import DetectorImage
from fvsim.scanning import (ImageStack, ScanConfig, StackAcquisitionError, Topography, acquire_stack,
                            compare_topography, fit_plane, focus_metric, modified_laplacian,
                            parabolic_peak, peak_heights, read_stack, reconstruct_topography,
                            resample_heightfield, topography_pitch, write_stack)
from fvsim.scene import Heightfield, ImplicitPlane, Scene


def sml_loop(img, window):
    """Sum-modified-Laplacian by explicit loops over an edge-replicated image."""
    h, w = img.shape
    r = window // 2
    p = np.pad(img.astype(float), r + 1, mode="edge")
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    cy, cx = y + r + 1 + dy, x + r + 1 + dx
                    c = p[cy, cx]
                    s += abs(2 * c - p[cy, cx - 1] - p[cy, cx + 1]) + abs(2 * c - p[cy - 1, cx] - p[cy + 1, cx])
            out[y, x] = s
    return out


def stack_from(arrays, z):
    return ImageStack([DetectorImage(a.shape[1], a.shape[0], a) for a in arrays], z)


class TestFocusMetric:
    def test_impulse(self):
        img = np.zeros((9, 9))
        img[4, 4] = 2.0
        ml = modified_laplacian(img)
        assert ml[4, 4] == 8.0 and ml[4, 5] == ml[3, 4] == 2.0 and ml[3, 3] == 0.0
        assert focus_metric(img, 3)[4, 4] == pytest.approx(8 * 2.0)

    @pytest.mark.parametrize("window", [3, 5, 7])
    def test_matches_direct_loop(self, rng, window):
        img = rng.poisson(5.0, (12, 15)).astype(float)
        assert np.allclose(focus_metric(img, window), sml_loop(img, window), atol=1e-9)

    def test_sharp_beats_blurred(self):
        y, x = np.mgrid[0:32, 0:32]
        board = (((x // 4) + (y // 4)) % 2).astype(float) * 100
        blurred = ndimage.gaussian_filter(board, 2.0)
        assert focus_metric(board).mean() > 2 * focus_metric(blurred).mean()

    def test_constant_image_is_zero(self):
        assert np.all(focus_metric(np.full((8, 8), 3.0)) == 0)

    @pytest.mark.parametrize("window", [2, 4, 1, 11])
    def test_bad_window(self, window):
        with pytest.raises(ValueError):
            focus_metric(np.zeros((8, 8)), window)


class TestPeak:
    def test_exact_parabola(self):
        z = np.array([0.0, 0.05, 0.1])
        vertex = 0.0617
        f = 10 - (z - vertex) ** 2
        assert parabolic_peak(*z, *f) == pytest.approx(vertex, abs=1e-12)
        # uneven spacing
        z = np.array([0.0, 0.07, 0.1])
        f = 3 - 2 * (z - vertex) ** 2
        assert parabolic_peak(*z, *f) == pytest.approx(vertex, abs=1e-12)

    def test_gaussian_curves_within_tenth_step(self, rng):
        dz = 0.05
        z = np.arange(41) * dz
        true = rng.uniform(0.3, 1.7, 500)
        curves = np.exp(-((z[:, None] - true[None]) ** 2) / (2 * (2 * dz) ** 2)) + 0.05
        h, valid = peak_heights(curves, z)
        assert valid.all()
        assert np.max(np.abs(h - true)) < 0.1 * dz

    def test_boundary_maximum_is_invalid(self):
        z = np.arange(5.0)
        curves = np.array([[5, 4, 3, 2, 1], [1, 2, 3, 4, 5], [1, 3, 5, 3, 1]], float).T
        h, valid = peak_heights(curves, z)
        assert valid.tolist() == [False, False, True]
        assert np.isnan(h[0]) and h[2] == pytest.approx(2.0)

    def test_flat_curve_is_invalid(self):
        curves = np.ones((6, 3)) + np.array([0, 0, 0.001, 0, 0, 0])[:, None]
        _, valid = peak_heights(curves, np.arange(6.0), prominence=0.1)
        assert not valid.any()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), p1=st.floats(0, 1), p2=st.floats(0, 1))
def test_validity_mask_monotone_in_prominence(seed, p1, p2):
    lo, hi = sorted((p1, p2))
    curves = np.random.default_rng(seed).uniform(0, 1, (9, 40))
    _, v_lo = peak_heights(curves, np.arange(9.0), lo)
    _, v_hi = peak_heights(curves, np.arange(9.0), hi)
    assert np.all(v_lo | ~v_hi)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-10, 10))
def test_heights_shift_with_scan_positions(seed, shift):
    rng = np.random.default_rng(seed)
    z = np.linspace(0, 1, 11)
    curves = rng.uniform(0, 1, (11, 30))
    h0, v0 = peak_heights(curves, z)
    h1, v1 = peak_heights(curves, z + shift)
    assert np.array_equal(v0, v1)
    assert np.allclose(h1[v1], h0[v0] + shift, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_valid_heights_within_scan_range(seed):
    rng = np.random.default_rng(seed)
    z = np.sort(rng.uniform(-3, 3, 7))
    z = np.unique(z)
    if len(z) < 3:
        return
    h, v = peak_heights(rng.uniform(0, 1, (len(z), 50)), z)
    assert np.all((h[v] >= z[0]) & (h[v] <= z[-1]))


class TestScanConfig:
    def test_positions(self):
        scan = ScanConfig(0.0, 2.0, 0.05, 10)
        assert scan.n_images == 41
        assert scan.positions()[-1] == pytest.approx(2.0)

    def test_seed_policies(self):
        per = ScanConfig(0, 1, 0.1, 10, "per-image", seed=3)
        seeds = {per.image_seed(k) for k in range(per.n_images)}
        assert len(seeds) == per.n_images
        assert per.image_seed(2) == ScanConfig(0, 1, 0.1, 10, "per-image", seed=3).image_seed(2)
        fixed = ScanConfig(0, 1, 0.1, 10, "fixed", seed=3)
        assert {fixed.image_seed(k) for k in range(5)} == {3}

    @pytest.mark.parametrize("args", [(0, 1, 0, 10), (1, 0, 0.1, 10), (0, 0.1, 0.1, 10),
                                      (0, 1, 0.1, 0), (0, 1, 0.1, 10, "sometimes")])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            ScanConfig(*args)


class TestStack:
    def test_validation(self):
        a = np.zeros((4, 4))
        with pytest.raises(ValueError):
            stack_from([a, a], [0.0, 0.0])
        with pytest.raises(ValueError):
            stack_from([a, np.zeros((4, 5))], [0.0, 1.0])
        with pytest.raises(ValueError):
            stack_from([a], [0.0, 1.0])

    def test_io_round_trip(self, tmp_path, rng):
        arrays = [rng.poisson(50, (6, 7)).astype(float) for _ in range(4)]
        stack = stack_from(arrays, [0.0, 0.05, 0.1, 0.15])
        for k, im in enumerate(stack.images):
            im.meta.update(n_rays=1000, seed=k)
        write_stack(stack, tmp_path / "s", {"seed": 1})
        back = read_stack(tmp_path / "s")
        assert np.array_equal(back.z_positions, stack.z_positions)
        for a, b in zip(stack.images, back.images):
            # 16-bit quantisation error is at most half a grey level of the raw scale
            assert np.max(np.abs(a.counts - b.counts)) <= 0.5 * a.counts.max() / 65535 + 1e-12
        assert back.images[2].meta["seed"] == 2

    def test_reconstruct_synthetic_stack(self):
        z = np.linspace(0, 2, 21)
        truth = np.linspace(0.4, 1.6, 16)[None, :] * np.ones((10, 1))
        y, x = np.mgrid[0:10, 0:16]
        texture = ((x + y) % 2) * 100.0 + 10
        arrays = [texture * np.exp(-((zk - truth) ** 2) / 0.1) + 1 for zk in z]
        topo = reconstruct_topography(stack_from(arrays, z), window=3)
        assert topo.valid.mean() > 0.8
        err = np.abs(topo.heights - truth)[topo.valid]
        # the window averages across neighbouring columns of different height
        assert np.median(err) < 0.05


class TestComparison:
    def test_piston_and_noise(self, rng):
        ref = Heightfield(40, 30, 0.5, 0.5, rng.uniform(0, 1, (30, 40)))
        noise = rng.normal(0, 0.1, (30, 40))
        topo = Topography(ref.heights + 0.7 + noise, np.ones((30, 40), bool), 0.5, 0.5)
        cmp = compare_topography(topo, ref)
        assert cmp.piston == pytest.approx(0.7, abs=0.02)
        assert cmp.rms_deviation == pytest.approx(0.1, rel=0.05)
        assert cmp.n_valid == 1200
        assert cmp.max_deviation >= cmp.rms_deviation
        measured, reference = cmp.profile(row=3)
        assert np.allclose(measured - reference, cmp.deviation[3])

    def test_invalid_pixels_excluded(self):
        ref = Heightfield(4, 4, 1, 1, np.zeros((4, 4)))
        h = np.zeros((4, 4))
        h[0, 0] = 100.0
        valid = np.ones((4, 4), bool)
        valid[0, 0] = False
        cmp = compare_topography(Topography(np.where(valid, h, np.nan), valid, 1, 1), ref)
        assert cmp.rms_deviation == 0.0 and cmp.n_valid == 15
        with pytest.raises(ValueError):
            compare_topography(Topography(np.full((4, 4), np.nan), np.zeros((4, 4), bool), 1, 1), ref)

    def test_resample_is_bilinear(self):
        ref = Heightfield(5, 3, 1.0, 2.0, np.add.outer(np.arange(3) * 2.0, np.arange(5) * 0.5))
        # plane 0.5 x + 1.0 y (+ const) is reproduced exactly by bilinear interpolation
        vals = resample_heightfield(ref, np.array([-1.3, 0.2]), np.array([0.5]))
        X, Y = np.array([-1.3, 0.2]), 0.5
        expected = 0.5 * (X + 2.0) + 1.0 * (Y + 2.0)
        assert np.allclose(vals[0], expected)

    def test_fit_plane(self, rng):
        X, Y = np.meshgrid((np.arange(20) - 9.5) * 0.5, (np.arange(10) - 4.5) * 0.5)
        h = 0.3 + 0.05 * X - 0.02 * Y
        coeffs, res = fit_plane(Topography(h, np.ones(h.shape, bool), 0.5, 0.5))
        assert np.allclose(coeffs, (0.3, 0.05, -0.02))
        assert np.nanmax(np.abs(res)) < 1e-12


class TestAcquisition:
    def test_flat_plane_peak_at_its_height(self):
        inst = build_default_instrument(na=0.8, magnification=20, detector_pixels=16, detector_side=0.16,
                                        mask_cell_um=1.0, objective="ideal")
        scene = Scene()
        scene.add(ImplicitPlane((0, 0, 0.3e-3)), HGSurface(0.8))
        scan = ScanConfig(-0.3, 0.9, 0.1, 200_000, seed=1)
        seen = []
        stack = acquire_stack(inst, scene, scan, progress=lambda k, z, s: seen.append(k))
        assert seen == list(range(scan.n_images))
        assert [im.meta["z"] for im in stack.images] == pytest.approx(list(scan.positions()))
        assert stack.images[0].meta["sample_stage_z"] == pytest.approx(0.3)
        topo = reconstruct_topography(stack, pixel_pitch=topography_pitch(inst))
        assert topo.valid.mean() > 0.5
        assert np.nanmedian(topo.heights) == pytest.approx(0.3, abs=0.05)
        assert topo.dx == pytest.approx(0.5)

    def test_failure_reports_position(self):
        inst = build_default_instrument(detector_pixels=8)
        scene = Scene()
        scene.add(ImplicitPlane(), HGSurface(0.5))
        scene.objects[0].material_id = 9
        with pytest.raises(StackAcquisitionError) as err:
            acquire_stack(inst, scene, ScanConfig(0.5, 1.0, 0.25, 10))
        assert err.value.z == 0.5
