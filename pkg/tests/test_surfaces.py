import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvsim.scene.surfaces import (SURFACE_KINDS, Heightfield, MicroRoughnessParams, ParameterError,
                                  add_micro_roughness, generate_surface, predicted_roughness_sigma,
                                  read_heightfield, write_heightfield)

GRID = dict(nx=41, ny=31, dx=0.5, dy=0.25)


def test_grid_is_centred():
    h = generate_surface("plane", {"height": 1.5}, **GRID)
    assert h.heights.shape == (31, 41)
    assert h.x_coords()[0] == pytest.approx(-10.0) and h.x_coords()[-1] == pytest.approx(10.0)
    assert h.y_coords().mean() == pytest.approx(0.0)
    assert np.all(h.heights == 1.5)


def test_inclined_plane():
    h = generate_surface("inclined_plane", {"slope_x": 0.05, "slope_y": -0.02, "height": 1.0}, **GRID)
    X, Y = h.grid()
    assert np.allclose(h.heights, 1.0 + 0.05 * X - 0.02 * Y)


def test_step():
    h = generate_surface("step", {"height": 2.0, "base": 0.5, "position": 1.0}, **GRID)
    X, _ = h.grid()
    assert np.all(h.heights[X < 1.0] == 0.5) and np.all(h.heights[X >= 1.0] == 2.5)


def test_sphere_cap():
    h = generate_surface("sphere_cap", {"radius": 8.0, "cap_height": 2.0}, **GRID)
    X, Y = h.grid()
    r2 = X ** 2 + Y ** 2
    assert h.heights.max() == pytest.approx(2.0)
    inside = r2 < 8.0 ** 2 - 6.0 ** 2
    assert np.allclose(h.heights[inside], np.sqrt(64 - r2[inside]) - 6.0)
    assert np.all(h.heights[~inside] == 0.0)


def test_sinusoid_period():
    h = generate_surface("sinusoid", {"amplitude": 0.5, "wavelength": 5.0}, nx=101, ny=3, dx=0.5)
    x = h.x_coords()
    assert np.allclose(h.heights[1], 0.5 * np.sin(2 * np.pi * x / 5.0))


def test_chirp_local_frequency_rises():
    h = generate_surface("chirp", {"amplitude": 1.0, "wavelength": 10.0}, nx=801, ny=2, dx=0.1)
    z = h.heights[0]
    crossings = np.nonzero(np.diff(np.sign(z)) != 0)[0]
    gaps = np.diff(crossings)
    # zero-crossing spacing shrinks along x
    assert gaps[-1] < gaps[1]
    assert np.abs(z).max() <= 1.0 + 1e-12


def test_plateau_levels_and_reproducibility():
    a = generate_surface("plateau", {"seed": 3, "texture_amplitude": 0.0}, nx=81, dx=1.0)
    b = generate_surface("plateau", {"seed": 3, "texture_amplitude": 0.0}, nx=81, dx=1.0)
    c = generate_surface("plateau", {"seed": 4, "texture_amplitude": 0.0}, nx=81, dx=1.0)
    assert np.array_equal(a.heights, b.heights)
    assert not np.array_equal(a.heights, c.heights)
    # every facet is tilted within tilt_range; probe nodes whose neighbourhood is planar
    z = a.heights
    gy, gx = np.gradient(z, 1.0)
    d2x = z[1:-1, 2:] - 2 * z[1:-1, 1:-1] + z[1:-1, :-2]
    d2y = z[2:, 1:-1] - 2 * z[1:-1, 1:-1] + z[:-2, 1:-1]
    d2xy = z[2:, 2:] - z[2:, :-2] - z[:-2, 2:] + z[:-2, :-2]
    planar = (np.abs(d2x) < 1e-9) & (np.abs(d2y) < 1e-9) & (np.abs(d2xy) < 1e-9)
    slope = np.hypot(gx, gy)[1:-1, 1:-1][planar]
    assert planar.mean() > 0.5
    assert slope.min() >= 0.3 - 1e-9 and slope.max() <= 0.6 + 1e-9
    assert z.max() > 2.0


@pytest.mark.parametrize("kind,params", [
    ("step", {"height": -1.0}), ("sphere_cap", {"radius": 1.0, "cap_height": 2.0}),
    ("sinusoid", {"amplitude": 1.0}), ("sinusoid", {"amplitude": 1.0, "wavelength": 0.0}),
    ("plateau", {"tilt_range": (0.5, 0.2)}), ("nonsense", {}),
])
def test_invalid_parameters(kind, params):
    with pytest.raises(ParameterError):
        generate_surface(kind, params, nx=8)


def test_all_kinds_generate():
    defaults = {"step": {"height": 1}, "sphere_cap": {"radius": 5}, "sinusoid": {"amplitude": 1, "wavelength": 4},
                "chirp": {"amplitude": 1, "wavelength": 4}}
    for kind in SURFACE_KINDS:
        h = generate_surface(kind, defaults.get(kind, {}), nx=16)
        assert np.all(np.isfinite(h.heights))


class TestMicroRoughness:
    def test_variance_reduction_matches_continuum_limit(self):
        # for a Gaussian kernel of sigma s nodes, the sum of squared weights per axis tends to 1/(2 sqrt(pi) s)
        h = Heightfield(8, 8, 0.25, 0.25, np.zeros((8, 8)))
        p = MicroRoughnessParams(0.0, 0.1, 1.0, 0)
        s = 1.0 / 0.25
        assert predicted_roughness_sigma(h, p) == pytest.approx(0.1 / (2 * math.sqrt(math.pi) * s), rel=1e-3)

    def test_empirical_std_and_correlation(self):
        h = Heightfield(512, 512, 1.0, 1.0, np.zeros((512, 512)))
        p = MicroRoughnessParams(0.0, 0.1, 1.0, 7)
        r = add_micro_roughness(h, p).heights
        assert r.std() == pytest.approx(predicted_roughness_sigma(h, p), rel=0.03)
        assert abs(r.mean()) < 0.002
        # Gaussian-filtered white noise has autocorrelation exp(-lag^2 / (4 s^2))
        lag1 = np.mean(r[:, 1:] * r[:, :-1]) / r.var()
        assert lag1 == pytest.approx(math.exp(-0.25), abs=0.02)

    def test_mean_offset_and_determinism(self):
        h = Heightfield(64, 64, 1.0, 1.0, np.ones((64, 64)))
        p = MicroRoughnessParams(0.5, 0.1, 2.0, 1)
        a = add_micro_roughness(h, p).heights
        assert np.array_equal(a, add_micro_roughness(h, p).heights)
        assert a.mean() == pytest.approx(1.5, abs=0.01)
        assert np.array_equal(h.heights, np.ones((64, 64)))

    def test_zero_sigma_is_identity(self):
        h = generate_surface("sinusoid", {"amplitude": 1, "wavelength": 3}, nx=20)
        assert np.array_equal(add_micro_roughness(h, MicroRoughnessParams(0, 0, 1, 0)).heights, h.heights)

    def test_sub_cell_kernel_warns(self):
        h = Heightfield(8, 8, 1.0, 1.0, np.zeros((8, 8)))
        with pytest.warns(UserWarning):
            add_micro_roughness(h, MicroRoughnessParams(0, 0.1, 0.2, 0))

    def test_invalid(self):
        with pytest.raises(ParameterError):
            MicroRoughnessParams(0, -0.1, 1, 0)
        with pytest.raises(ParameterError):
            MicroRoughnessParams(0, 0.1, 0, 0)


class TestHeightfieldIO:
    def test_round_trip_exact(self, tmp_path, rng):
        h = Heightfield(7, 5, 0.3, 0.7, rng.standard_normal((5, 7)))
        write_heightfield(h, tmp_path / "h.txt")
        back = read_heightfield(tmp_path / "h.txt")
        assert (back.nx, back.ny, back.dx, back.dy) == (7, 5, 0.3, 0.7)
        assert np.array_equal(back.heights, h.heights)

    def test_row_major_x_fastest(self, tmp_path):
        (tmp_path / "h.txt").write_text("3 2 1 1\n0 1 2\n10 11 12\n")
        h = read_heightfield(tmp_path / "h.txt")
        assert h.heights[1, 2] == 12 and h.heights[0, 1] == 1

    @pytest.mark.parametrize("text", ["3 2 1\n", "3 2 1 1\n1 2 3\n", "3 2 1 1\n1 2 3 4 5 x\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "h.txt").write_text(text)
        with pytest.raises(ValueError):
            read_heightfield(tmp_path / "h.txt")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Heightfield(2, 2, 1, 1, [[0, 1], [np.nan, 2]])


@settings(max_examples=30, deadline=None)
@given(sigma=st.floats(0.01, 1.0), kernel=st.floats(0.6, 4.0), seed=st.integers(0, 1000))
def test_roughness_scales_linearly_with_sigma(sigma, kernel, seed):
    h = Heightfield(32, 32, 1.0, 1.0, np.zeros((32, 32)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = add_micro_roughness(h, MicroRoughnessParams(0, sigma, kernel, seed)).heights
        b = add_micro_roughness(h, MicroRoughnessParams(0, 2 * sigma, kernel, seed)).heights
    assert np.allclose(b, 2 * a, atol=1e-12)
