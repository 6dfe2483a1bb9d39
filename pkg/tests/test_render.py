import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interspec.errors import ContractError, DivergenceError, ShapeError
from interspec.geometry import build_v_cavity, cached_kernel, eigendecompose, monte_carlo_kernel
from interspec.render import (
    IrradianceField,
    camera_response,
    construct_metameric_light,
    direct_irradiance,
    infinite_bounce_radiance,
    infinite_bounce_radiance_eig,
    nbounce_irradiance,
    radiance_for_reflectances,
    render_panel_batch,
    render_panel_image,
)
from interspec.spectra import (
    DEFAULT_GRID,
    IlluminantSPD,
    WavelengthGrid,
    load_camera,
    load_illuminant,
    load_munsell_matrix,
    munsell_notations,
)

ANGLES = [30, 45, 90, 120, 150]


@pytest.fixture(scope="module")
def default_eig():
    K = cached_kernel(45, 10)
    return K, eigendecompose(K)


@pytest.fixture(scope="module")
def small_kernels():
    return {a: monte_carlo_kernel(build_v_cavity(a, 1, 3), 64, seed=2).matrix for a in ANGLES}


@pytest.fixture(scope="module")
def munsell():
    return load_munsell_matrix()


def test_direct_irradiance():
    d65 = load_illuminant("d65")
    E0 = direct_irradiance(d65, 7)
    assert E0.values.shape == (61, 7)
    assert np.all(E0.values == d65.values[:, None])
    k = DEFAULT_GRID.wavelengths.tolist().index(560)
    assert np.all(E0.values[k] == d65.values[k])
    zero = IlluminantSPD(np.zeros(61))
    assert not direct_irradiance(zero, 3).values.any()
    with pytest.raises(ContractError):
        direct_irradiance(d65, 0)


def test_nbounce_trivial_cases(small_kernels):
    K = small_kernels[45]
    E0 = direct_irradiance(load_illuminant("d65"), len(K))
    r = np.full(61, 0.5)
    assert np.array_equal(nbounce_irradiance(K, r, E0, 0).values, E0.values)
    assert np.array_equal(nbounce_irradiance(K, np.zeros(61), E0, 9).values, E0.values)


def test_nbounce_one_double_loop(small_kernels):
    K = small_kernels[45][:8, :8] + small_kernels[45][:8, :8].T  # any m=8 symmetric kernel
    rng = np.random.default_rng(0)
    E0 = IrradianceField(rng.random((61, 8)), DEFAULT_GRID)
    r = rng.random(61) * 0.9
    got = nbounce_irradiance(K, r, E0, 1).values
    for k in range(61):
        for i in range(8):
            s = E0.values[k, i]
            for j in range(8):
                s += r[k] * K[i, j] * E0.values[k, j]
            assert got[k, i] == pytest.approx(s, rel=1e-13)


def test_nbounce_monotone_in_n(small_kernels):
    K = small_kernels[30]
    E0 = direct_irradiance(load_illuminant("d65"), len(K))
    r = np.random.default_rng(1).random(61)
    prev = nbounce_irradiance(K, r, E0, 0).values
    for n in range(1, 8):
        cur = nbounce_irradiance(K, r, E0, n).values
        assert np.all(cur >= prev)
        prev = cur


@pytest.mark.parametrize("angle", ANGLES)
def test_series_matches_closed_form(angle, small_kernels, munsell):
    K = small_kernels[angle]
    E0 = direct_irradiance(load_illuminant("d65"), len(K))
    rng = np.random.default_rng(angle)
    for r in munsell[rng.choice(len(munsell), 5, replace=False)]:
        series = nbounce_irradiance(K, r, E0, 200).values
        # radiance = r * irradiance / pi
        expect = r[:, None] * series / np.pi
        closed = infinite_bounce_radiance(K, r, E0).values
        eig = infinite_bounce_radiance_eig(eigendecompose(K), r, E0).values
        assert np.allclose(closed, expect, rtol=1e-10, atol=0)
        assert np.allclose(eig, expect, rtol=1e-10, atol=1e-300)


def test_closed_form_m8_flat_reflectance(small_kernels):
    K = small_kernels[45][:8, :8]
    E0 = direct_irradiance(load_illuminant("e"), 8)
    r = np.full(61, 0.6)
    ref = r[:, None] * nbounce_irradiance(K, r, E0, 200).values / np.pi
    assert np.allclose(infinite_bounce_radiance(K, r, E0, check_radius=False).values, ref, rtol=1e-10, atol=0)


def test_flat_and_black_limits(small_kernels):
    E0 = direct_irradiance(load_illuminant("d65"), 18)
    r = np.random.default_rng(2).random(61)
    L = infinite_bounce_radiance(np.zeros((18, 18)), r, E0).values
    assert np.allclose(L, r[:, None] * E0.values / np.pi, rtol=1e-14)
    K = small_kernels[45]
    assert not infinite_bounce_radiance(K, np.zeros(61), E0).values.any()
    assert not infinite_bounce_radiance_eig(eigendecompose(K), np.zeros(61), E0).values.any()


def test_divergence_guard():
    K = np.array([[0.0, 1.2], [1.2, 0.0]])
    E0 = direct_irradiance(load_illuminant("e"), 2)
    with pytest.raises(DivergenceError):
        infinite_bounce_radiance(K, np.ones(61), E0)
    with pytest.raises(DivergenceError):
        infinite_bounce_radiance_eig(eigendecompose(K), np.ones(61), E0)


def test_eigen_path_matches_dense_on_default_cavity(default_eig, munsell):
    K, eig = default_eig
    E0 = direct_irradiance(load_illuminant("d65"), 200)
    for r in munsell[[0, 70, 500, 1268]]:
        dense = infinite_bounce_radiance(K, r, E0).values
        fast = infinite_bounce_radiance_eig(eig, r, E0).values
        assert np.max(np.abs(fast - dense) / np.abs(dense)) < 1e-8


def test_eigen_path_speedup(default_eig, munsell):
    K, eig = default_eig
    E0 = direct_irradiance(load_illuminant("d65"), 200)
    r = munsell[70]

    def best(fn, reps=5):
        t = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            t.append(time.perf_counter() - t0)
        return min(t)

    dense = best(lambda: infinite_bounce_radiance(K, r, E0, check_radius=False))
    fast = best(lambda: infinite_bounce_radiance_eig(eig, r, E0))
    assert dense / fast >= 5


def test_batch_radiance_matches_single(default_eig, munsell):
    _, eig = default_eig
    d65 = load_illuminant("d65")
    R = munsell[:4]
    batch = radiance_for_reflectances(eig, R, d65.values)
    E0 = direct_irradiance(d65, 200)
    for k in range(4):
        single = infinite_bounce_radiance_eig(eig, R[k], E0).values
        assert np.allclose(batch[k], single, rtol=1e-12, atol=1e-15)


def test_camera_response_triple_loop():
    rng = np.random.default_rng(5)
    grid = WavelengthGrid(400, 700, 50)
    L = IrradianceField(rng.random((grid.count, 4)), grid)
    from interspec.spectra import CameraSensitivities

    cam = CameraSensitivities(rng.random((3, grid.count)), grid)
    got = camera_response(L, cam).values
    for f in range(4):
        for c in range(3):
            s = 0.0
            for k in range(grid.count):
                s += cam.matrix[c, k] * L.values[k, f] * grid.step
            assert got[f, c] == pytest.approx(s, rel=1e-13)


def test_camera_response_trivial():
    cam = load_camera("xyz")
    assert not camera_response(IrradianceField(np.zeros((61, 5)), DEFAULT_GRID), cam).values.any()
    mono = np.zeros((61, 2))
    mono[30] = [1.0, 2.0]
    rho = camera_response(IrradianceField(mono, DEFAULT_GRID), cam).values
    assert np.allclose(rho[0], cam.matrix[:, 30] * 5)
    assert np.allclose(rho[1], 2 * rho[0])
    other = WavelengthGrid(400, 700, 10)
    with pytest.raises(ShapeError):
        camera_response(IrradianceField(np.zeros((31, 2)), other), cam)


def test_flat_cavity_uniform_image(munsell):
    cav = build_v_cavity(180, 1, 4)
    eig = eigendecompose(monte_carlo_kernel(cav, 16).matrix)
    img = render_panel_image(cav, eig, munsell[70], load_illuminant("d65"), load_camera("xyz"))
    assert img.shape == (4, 4, 3)
    assert np.allclose(img, img[0, 0], rtol=1e-14)


def test_brighter_toward_fold(default_eig, munsell):
    _, eig = default_eig
    cav = build_v_cavity(45, 1, 10)
    img = render_panel_image(cav, eig, munsell[70], load_illuminant("d65"), load_camera("xyz"))
    # row 0 touches the fold
    assert np.all(np.diff(img.mean(axis=1), axis=0) < 0)
    assert np.all(np.diff(img[:, 5], axis=0) < 0)
    assert np.all(img[0, 5] > img[-1, 5])


def test_red_patch_fold_facet_brighter(default_eig, munsell):
    _, eig = default_eig
    red = munsell[munsell_notations().index("5R 4/14")]
    img = render_panel_batch(eig, 10, red[None], load_illuminant("d65").values, load_camera("xyz"))[0]
    assert np.all(img[0, 4] > img[9, 4])


def test_linear_in_illuminant(default_eig, munsell):
    _, eig = default_eig
    cav = build_v_cavity(45, 1, 10)
    d65, cam = load_illuminant("d65"), load_camera("xyz")
    a = render_panel_image(cav, eig, munsell[3], d65, cam)
    b = render_panel_image(cav, eig, munsell[3], IlluminantSPD(2 * d65.values), cam)
    assert np.allclose(b, 2 * a, rtol=1e-14, atol=0)


def test_nonlinear_in_reflectance(default_eig):
    _, eig = default_eig
    cav = build_v_cavity(45, 1, 10)
    d65, cam = load_illuminant("d65"), load_camera("xyz")
    r = np.full(61, 0.4)
    a = render_panel_image(cav, eig, r, d65, cam)
    b = render_panel_image(cav, eig, 2 * r, d65, cam)
    assert np.all(b > 2 * a)  # interreflection grows faster than linearly
    assert np.max(np.abs(b / (2 * a) - 1)) > 0.01


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1268))
def test_energy_bound(idx):
    K = cached_kernel(45, 10)
    eig = eigendecompose(K)
    r = load_munsell_matrix()[idx]
    E0 = direct_irradiance(load_illuminant("d65"), 200)
    L = infinite_bounce_radiance_eig(eig, r, E0).values
    bound = E0.values / (1 - eig.spectral_radius * r[:, None])
    assert np.all(np.pi * L <= bound * (1 + 1e-12))


# -- metamers


def _flat_rgb(r, illum, cam):
    return cam.matrix @ (np.asarray(r) * illum.values) * cam.grid.step / np.pi


def test_metamer_identity_case():
    cam, d65 = load_camera("xyz"), load_illuminant("d65")
    E = construct_metameric_light(np.ones(61), d65, cam)
    assert np.allclose(_flat_rgb(np.ones(61), E, cam), _flat_rgb(np.ones(61), d65, cam), rtol=1e-8)


@pytest.mark.parametrize("camera", ["xyz", "canon-5d2"])
def test_metamer_brown_patch(default_eig, munsell, camera):
    _, eig = default_eig
    cam, white_light = load_camera(camera), load_illuminant("e")
    brown = munsell[munsell_notations().index("5YR 4/4")]
    E = construct_metameric_light(brown, white_light, cam)
    assert np.all(E.values >= 0)
    flat_a = _flat_rgb(brown, white_light, cam)
    flat_b = _flat_rgb(np.ones(61), E, cam)
    assert np.allclose(flat_b, flat_a, rtol=1e-6, atol=0)
    # folded, the white surface interreflects far more than the brown one
    fa = render_panel_batch(eig, 10, brown[None], white_light.values, cam)[0]
    R_white = np.ones((1, 61))
    fb = render_panel_batch(eig, 10, R_white, E.values, cam)[0]
    assert np.max(np.abs(fb / fa - 1)) > 0.01


def test_metamer_min_norm_beats_naive():
    cam, light = load_camera("xyz"), load_illuminant("e")
    r = load_munsell_matrix()[188]
    E = construct_metameric_light(r, light, cam)
    naive = r * light.values  # also feasible
    assert np.linalg.norm(E.values) <= np.linalg.norm(naive) + 1e-12
