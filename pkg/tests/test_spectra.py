import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interspec.errors import (
    ContractError,
    CoverageError,
    DomainError,
    ParseError,
    ShapeError,
    UndefinedCorrelationError,
)
from interspec.spectra import (
    DEFAULT_GRID,
    IlluminantSPD,
    LabColor,
    ReflectanceSpectrum,
    Spectrum,
    WavelengthGrid,
    ciede2000,
    ciede2000_array,
    lab_color,
    load_camera,
    load_cmfs,
    load_illuminant,
    load_munsell,
    load_munsell_matrix,
    parse_illuminant_list,
    pearson_distance,
    planckian_series,
    planckian_spd,
    reflectance_to_xyz,
    resample_spectrum,
    rmse,
    white_point,
    write_spectral_csv,
    xyz_to_lab,
)


def test_default_grid():
    g = DEFAULT_GRID
    assert (g.start, g.end, g.step, g.count) == (400, 700, 5, 61)
    assert g.wavelengths[-1] == 700


def test_spectrum_validates():
    with pytest.raises(ShapeError):
        Spectrum(np.ones(60))
    with pytest.raises(ContractError):
        Spectrum(-np.ones(61))
    with pytest.raises(ContractError):
        ReflectanceSpectrum(np.full(61, 1.2))


# -- resampling


def test_resample_identity():
    wl = DEFAULT_GRID.wavelengths
    vals = np.random.default_rng(0).random(61)
    out = resample_spectrum(np.c_[wl, vals])
    assert np.array_equal(out, vals)


def test_resample_linear_midpoint():
    out = resample_spectrum([(400, 0.0), (700, 1.0)])
    assert out[DEFAULT_GRID.wavelengths.tolist().index(550)] == pytest.approx(0.5, abs=1e-15)


def test_resample_coverage_error():
    with pytest.raises(CoverageError):
        resample_spectrum([(410, 0.0), (700, 1.0)])


def test_resample_dense_munsell_matches_bruteforce():
    # a 1 nm curve: for each node, find the bracketing pair by scanning
    wl = np.arange(380.0, 781.0)
    curve = 0.3 + 0.2 * np.sin(wl / 37.0) + 0.05 * np.cos(wl / 5.3)
    out = resample_spectrum(np.c_[wl, curve])
    for k, lam in enumerate(DEFAULT_GRID.wavelengths):
        for i in range(len(wl) - 1):
            if wl[i] <= lam <= wl[i + 1]:
                t = (lam - wl[i]) / (wl[i + 1] - wl[i])
                expect = (1 - t) * curve[i] + t * curve[i + 1]
                break
        assert abs(out[k] - expect) < 1e-12


def test_resample_clamps_negative():
    out = resample_spectrum([(400, -1.0), (700, 1.0)])
    assert out.min() == 0.0


# -- Munsell ingestion


def test_bundled_munsell_has_1269_patches():
    spectra = load_munsell()
    assert len(spectra) == 1269
    assert all(len(s) == 61 for s in spectra)
    mat = load_munsell_matrix()
    assert mat.min() >= 0 and mat.max() <= 1


def test_load_munsell_empty(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert load_munsell(p) == []


def test_load_munsell_single_patch(tmp_path):
    p = tmp_path / "one.csv"
    write_spectral_csv(p, np.arange(400, 701, 10), np.full(31, 0.5))
    out = load_munsell(p)
    assert len(out) == 1
    assert np.allclose(out[0].values, 0.5)


def test_load_munsell_malformed_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("wavelength_nm,v1\n400,0.1\n500,abc\n700,0.2\n")
    with pytest.raises(ParseError) as exc:
        load_munsell(p)
    assert exc.value.row == 2


def test_load_munsell_sanity_warning(tmp_path):
    p = tmp_path / "hot.csv"
    write_spectral_csv(p, [400, 700], [1.2, 0.5])
    with pytest.warns(UserWarning, match="exceed"):
        out = load_munsell(p)
    assert out[0].values.max() == 1.0


def test_load_cmfs_and_cameras():
    cmfs = load_cmfs()
    assert cmfs.matrix.shape == (3, 61)
    # y-bar peaks at 555 nm with value 1
    assert cmfs.y.max() == pytest.approx(1.0, abs=2e-3)
    cam = load_camera("canon-5d2")
    assert cam.channels == 3
    assert load_camera("xyz").matrix.shape == (3, 61)


def test_bundled_illuminants():
    d65 = load_illuminant("d65")
    d50 = load_illuminant("d50")
    assert d65.values.max() == 1.0 and d50.values.max() == 1.0
    # D65 is bluer than D50: more relative power at 450 nm
    i = DEFAULT_GRID.wavelengths.tolist().index(450)
    assert d65.values[i] > d50.values[i]


# -- Planck


@pytest.mark.parametrize("T", [1000, 4000, 6500, 15000, 40000])
def test_planck_peak_normalized(T):
    spd = planckian_spd(T)
    assert spd.values.max() == 1.0
    assert np.all(spd.values > 0)


def test_planck_ratio_matches_direct_formula():
    h, c, k = 6.62607015e-34, 299792458.0, 1.380649e-23

    def B(lam_nm, T):
        lam = lam_nm * 1e-9
        return 2 * h * c**2 / lam**5 / math.expm1(h * c / (lam * k * T))

    spd = planckian_spd(4000)
    assert spd.values[0] / spd.values[-1] == pytest.approx(B(400, 4000) / B(700, 4000), rel=1e-8)


def test_planck_15000_strictly_decreasing():
    v = planckian_spd(15000).values
    assert np.all(np.diff(v) < 0)


def test_planck_domain():
    with pytest.raises(DomainError):
        planckian_spd(0)


def test_planckian_series_counts():
    s = planckian_series(4000, 15000, 500)
    assert len(s) == 23
    assert len(planckian_series(5000, 5000, 500)) == 1
    names = [x.name for x in planckian_series(4000, 5000, 500)]
    assert names == ["planck:4000", "planck:4500", "planck:5000"]
    assert len(parse_illuminant_list("planck:4000:15000:500")) == 23


# -- colorimetry


def test_xyz_normalization():
    cmfs = load_cmfs()
    for name in ("d65", "d50", "e"):
        il = load_illuminant(name)
        assert reflectance_to_xyz(np.ones(61), il, cmfs)[1] == pytest.approx(100.0, abs=1e-12)
        assert np.all(reflectance_to_xyz(np.zeros(61), il, cmfs) == 0)
        wp = white_point(il, cmfs)
        assert np.allclose(reflectance_to_xyz(np.full(61, 0.5), il, cmfs), wp / 2, rtol=0, atol=1e-12)


def test_d65_white_point_close_to_standard():
    wp = white_point(load_illuminant("d65"), load_cmfs())
    # 5 nm, 400-700 nm truncation moves it slightly from (95.047, 100, 108.883)
    assert wp[0] == pytest.approx(95.047, abs=0.5)
    assert wp[2] == pytest.approx(108.883, abs=1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_xyz_linear_in_reflectance(seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.random(61) * 0.5, rng.random(61) * 0.5
    cmfs, il = load_cmfs(), load_illuminant("d65")
    lhs = reflectance_to_xyz(r1 + r2, il, cmfs)
    rhs = reflectance_to_xyz(r1, il, cmfs) + reflectance_to_xyz(r2, il, cmfs)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_xyz_grid_mismatch():
    other = WavelengthGrid(400, 700, 10)
    with pytest.raises(ShapeError):
        reflectance_to_xyz(np.ones(31), IlluminantSPD(np.ones(31), other), load_cmfs())


# CIEDE2000 reference pairs published with the formula's standard test data
SHARMA = [
    ((50.0, 2.6772, -79.7751), (50.0, 0.0, -82.7485), 2.0425),
    ((50.0, 3.1571, -77.2803), (50.0, 0.0, -82.7485), 2.8615),
    ((50.0, 0.0, 0.0), (50.0, -1.0, 2.0), 2.3669),
    ((50.0, 2.5, 0.0), (73.0, 25.0, -18.0), 27.1492),
    ((60.2574, -34.0099, 36.2677), (60.4626, -34.1751, 39.4387), 1.2644),
]


@pytest.mark.parametrize("a,b,expected", SHARMA)
def test_ciede2000_reference_pairs(a, b, expected):
    assert ciede2000(LabColor(*a), LabColor(*b)) == pytest.approx(expected, abs=5e-5)


def test_ciede2000_agrees_with_colour_science():
    colour = pytest.importorskip("colour")
    rng = np.random.default_rng(7)
    lab1 = np.c_[rng.uniform(0, 100, 10), rng.uniform(-80, 80, (10, 2))]
    lab2 = np.c_[rng.uniform(0, 100, 10), rng.uniform(-80, 80, (10, 2))]
    ours = [ciede2000(LabColor(*a), LabColor(*b)) for a, b in zip(lab1, lab2)]
    ref = colour.difference.delta_E_CIE2000(lab1, lab2)
    assert np.allclose(ours, ref, rtol=0, atol=1e-6)


def test_ciede2000_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a = LabColor(50, 10, -20)
    assert ciede2000(a, a) == 0.0
    lab1 = np.c_[rng.uniform(0, 100, 100), rng.uniform(-100, 100, (100, 2))]
    lab2 = np.c_[rng.uniform(0, 100, 100), rng.uniform(-100, 100, (100, 2))]
    d12 = ciede2000_array(lab1, lab2)
    assert np.allclose(d12, ciede2000_array(lab2, lab1), rtol=0, atol=1e-12)
    assert np.all(d12 > 0)


def test_ciede2000_white_mismatch():
    with pytest.raises(ContractError):
        ciede2000(LabColor(50, 0, 0, (96.42, 100, 82.49)), LabColor(50, 0, 0))


def test_lab_of_white_is_100():
    wp = np.array([95.047, 100.0, 108.883])
    assert np.allclose(xyz_to_lab(wp, wp), [100, 0, 0])
    c = lab_color(wp / 2, wp)
    assert c.a == pytest.approx(0) and c.L < 100


# -- metrics


def test_rmse_basic():
    x = np.random.default_rng(0).random(61)
    assert rmse(x, x) == 0
    assert rmse(np.zeros(61), np.full(61, 0.3)) == pytest.approx(0.3, abs=1e-15)


def test_rmse_bruteforce():
    rng = np.random.default_rng(3)
    a, b = rng.random(61), rng.random(61)
    s = 0.0
    for i in range(61):
        s += (a[i] - b[i]) ** 2
    assert rmse(a, b) == pytest.approx(math.sqrt(s / 61), rel=1e-14)


def test_rmse_shape_mismatch():
    with pytest.raises(ShapeError):
        rmse(np.zeros(61), np.zeros(31))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rmse_triangle_inequality(seed):
    a, b, c = np.random.default_rng(seed).random((3, 61))
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-15


def test_pearson_distance():
    x = np.random.default_rng(4).random(61)
    assert pearson_distance(x, x) == pytest.approx(0, abs=1e-15)
    assert pearson_distance(x, 2.5 * x + 0.3) == pytest.approx(0, abs=1e-14)
    assert pearson_distance(x, -x) == pytest.approx(2, abs=1e-14)
    with pytest.raises(UndefinedCorrelationError):
        pearson_distance(x, np.full(61, 0.4))
    # uncentered variant is a cosine distance
    assert pearson_distance(x, x + 1, centered=False) > 0
