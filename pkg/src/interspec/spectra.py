"""Spectra on a fixed wavelength grid, bundled tables, Planckian sources,
colorimetry and spectral error metrics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    CoverageError,
    DomainError,
    ParseError,
    ShapeError,
    UndefinedCorrelationError,
)

# second radiation constant h*c/k in nm*K
_C2_NM_K = 1.438776877e7
_SANITY_MAX = 1.05


@dataclass(frozen=True)
class WavelengthGrid:
    start: float = 400.0
    end: float = 700.0
    step: float = 5.0

    def __post_init__(self):
        if self.step <= 0 or self.end < self.start:
            raise DomainError(f"bad wavelength grid {self}")
        n = (self.end - self.start) / self.step
        if abs(n - round(n)) > 1e-9:
            raise DomainError("grid span must be a multiple of the step")

    @property
    def count(self) -> int:
        return int(round((self.end - self.start) / self.step)) + 1

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count)

    def to_dict(self):
        return {"start": self.start, "end": self.end, "step": self.step}


DEFAULT_GRID = WavelengthGrid()


@dataclass(frozen=True, eq=False)
class Spectrum:
    values: np.ndarray
    grid: WavelengthGrid = DEFAULT_GRID

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.count,):
            raise ShapeError(f"expected {self.grid.count} samples, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ContractError("spectrum values must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.grid.count

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ReflectanceSpectrum(Spectrum):
    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values > 1):
            raise ContractError("reflectance values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class IlluminantSPD(Spectrum):
    name: str = ""

    @classmethod
    def normalized(cls, values, grid=DEFAULT_GRID, name=""):
        """Build an SPD scaled so its maximum on ``grid`` is 1."""
        v = np.asarray(values, dtype=float)
        peak = v.max()
        if peak <= 0:
            raise DomainError("illuminant has no positive power on the grid")
        return cls(v / peak, grid, name)


@dataclass(frozen=True, eq=False)
class ColorMatchingFunctions:
    """CIE observer as a 3 x q matrix (rows x-bar, y-bar, z-bar)."""

    matrix: np.ndarray
    grid: WavelengthGrid = DEFAULT_GRID

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, self.grid.count):
            raise ShapeError(f"CMFs must be 3 x {self.grid.count}, got {m.shape}")
        if np.any(m < 0):
            raise ContractError("CMFs must be non-negative")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def x(self):
        return self.matrix[0]

    @property
    def y(self):
        return self.matrix[1]

    @property
    def z(self):
        return self.matrix[2]


@dataclass(frozen=True, eq=False)
class CameraSensitivities:
    """s x q matrix of channel sensitivities."""

    matrix: np.ndarray
    grid: WavelengthGrid = DEFAULT_GRID
    name: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[1] != self.grid.count:
            raise ShapeError(f"sensitivities must be s x {self.grid.count}, got {m.shape}")
        if np.any(m < 0):
            raise ContractError("sensitivities must be non-negative")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def channels(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_cmfs(cls, cmfs: ColorMatchingFunctions):
        return cls(cmfs.matrix, cmfs.grid, name="cie1931-xyz")


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float
    white: tuple = field(default=(95.047, 100.0, 108.883))


# ---------------------------------------------------------------------------
# ingestion


def resample_spectrum(raw, grid: WavelengthGrid = DEFAULT_GRID) -> np.ndarray:
    """Linearly interpolate ``(wavelength, value)`` pairs onto ``grid``.

    Raises CoverageError if the samples do not span the grid.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 2 or len(raw) == 0:
        raise ShapeError("raw spectrum must be a sequence of (wavelength, value) pairs")
    wl, val = raw[:, 0], raw[:, 1]
    if np.any(np.diff(wl) <= 0):
        raise ContractError("raw wavelengths must be strictly ascending")
    return _resample_columns(wl, val[:, None], grid)[:, 0]


def _resample_columns(wl, cols, grid):
    eps = 1e-9
    if wl[0] > grid.start + eps or wl[-1] < grid.end - eps:
        raise CoverageError(
            f"data spans {wl[0]:g}-{wl[-1]:g} nm, grid needs {grid.start:g}-{grid.end:g} nm"
        )
    target = grid.wavelengths
    # np.interp per column; columns are few or the loop is cheap next to parsing
    out = np.empty((grid.count, cols.shape[1]))
    for k in range(cols.shape[1]):
        out[:, k] = np.interp(target, wl, cols[:, k])
    return np.maximum(out, 0.0)


def read_spectral_csv(path):
    """Parse a spectral CSV (``wavelength_nm,v1[,v2,...]``).

    Returns ``(wavelengths, values)`` with values shaped (rows, columns);
    both are empty for an empty file.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        return np.empty(0), np.empty((0, 0))
    header, body = rows[0], rows[1:]
    if not header[0].strip().lower().startswith("wavelength"):
        raise ParseError("missing 'wavelength_nm' header", row=0)
    ncol = len(header) - 1
    if ncol < 1:
        raise ParseError("no value columns in header", row=0)
    data = np.empty((len(body), ncol + 1))
    for i, r in enumerate(body, start=1):
        if len(r) != ncol + 1:
            raise ParseError(f"expected {ncol + 1} fields, got {len(r)}", row=i)
        try:
            data[i - 1] = [float(c) for c in r]
        except ValueError as exc:
            raise ParseError(str(exc), row=i) from None
    if not np.all(np.isfinite(data)):
        bad = int(np.where(~np.all(np.isfinite(data), axis=1))[0][0]) + 1
        raise ParseError("non-finite value", row=bad)
    if np.any(np.diff(data[:, 0]) <= 0):
        bad = int(np.where(np.diff(data[:, 0]) <= 0)[0][0]) + 2
        raise ParseError("wavelengths must be strictly ascending", row=bad)
    return data[:, 0], data[:, 1:]


def write_spectral_csv(path, wavelengths, columns):
    """Write columns (rows = wavelengths) in the spectral CSV layout."""
    columns = np.asarray(columns, dtype=float)
    if columns.ndim == 1:
        columns = columns[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm"] + [f"v{i + 1}" for i in range(columns.shape[1])])
        for lam, row in zip(wavelengths, columns):
            w.writerow([f"{lam:g}"] + [repr(float(v)) for v in row])


def load_spectra_matrix(path, grid=DEFAULT_GRID) -> np.ndarray:
    """All value columns of a spectral CSV resampled to ``grid``, shape (columns, q)."""
    wl, vals = read_spectral_csv(path)
    if vals.size == 0:
        return np.empty((0, grid.count))
    return _resample_columns(wl, vals, grid).T


def load_munsell(path=None, grid=DEFAULT_GRID) -> list[ReflectanceSpectrum]:
    """Load reflectances stored one patch per column; defaults to the bundled
    1269-chip Munsell matte set."""
    mat = load_munsell_matrix(path, grid)
    return [ReflectanceSpectrum(row, grid) for row in mat]


def load_munsell_matrix(path=None, grid=DEFAULT_GRID) -> np.ndarray:
    if path is None:
        return _bundled_munsell(grid).copy()
    wl, vals = read_spectral_csv(path)
    if vals.size == 0:
        return np.empty((0, grid.count))
    if vals.max() > _SANITY_MAX:
        warnings.warn(
            f"{path}: reflectance values up to {vals.max():.3f} exceed {_SANITY_MAX}; clamping",
            stacklevel=2,
        )
    return np.clip(_resample_columns(wl, vals, grid).T, 0.0, 1.0)


def _data_path(name):
    return resources.files("interspec") / "data" / name


@lru_cache(maxsize=4)
def _bundled_munsell(grid):
    with resources.as_file(_data_path("munsell1269.csv")) as p:
        wl, vals = read_spectral_csv(p)
    out = np.clip(_resample_columns(wl, vals, grid).T, 0.0, 1.0)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=1)
def munsell_notations() -> list[str]:
    with resources.as_file(_data_path("munsell1269_notation.csv")) as p, open(p) as fh:
        return [row[1] for row in list(csv.reader(fh))[1:]]


def load_cmfs(path=None, grid=DEFAULT_GRID) -> ColorMatchingFunctions:
    """CIE 1931 2-degree observer (bundled) or three columns from ``path``."""
    if path is None:
        with resources.as_file(_data_path("cie1931_2deg.csv")) as p:
            mat = load_spectra_matrix(p, grid)
    else:
        mat = load_spectra_matrix(path, grid)
    if mat.shape[0] != 3:
        raise ParseError(f"CMF file must have 3 value columns, found {mat.shape[0]}")
    return ColorMatchingFunctions(mat, grid)


def load_camera(path, grid=DEFAULT_GRID) -> CameraSensitivities:
    """Camera sensitivities from a spectral CSV, or ``"xyz"`` for the CIE 1931
    CMFs, or ``"canon-5d2"`` for the bundled sample camera."""
    if str(path).lower() == "xyz":
        return CameraSensitivities.from_cmfs(load_cmfs(grid=grid))
    if str(path).lower() == "canon-5d2":
        with resources.as_file(_data_path("canon_eos_5d_mark_ii.csv")) as p:
            return CameraSensitivities(load_spectra_matrix(p, grid), grid, "canon-eos-5d-mark-ii")
    mat = load_spectra_matrix(path, grid)
    if mat.shape[0] == 0:
        raise ParseError(f"{path}: no sensitivity columns")
    return CameraSensitivities(mat, grid, Path(path).stem)


_BUNDLED_ILLUMINANTS = {"d65": "d65.csv", "d50": "d50.csv"}


def load_illuminant(spec, grid=DEFAULT_GRID) -> IlluminantSPD:
    """Resolve ``d65``, ``d50``, ``e`` (equal energy), ``planck:T`` or a CSV path."""
    key = str(spec).lower()
    if key in _BUNDLED_ILLUMINANTS:
        with resources.as_file(_data_path(_BUNDLED_ILLUMINANTS[key])) as p:
            vals = load_spectra_matrix(p, grid)[0]
        return IlluminantSPD.normalized(vals, grid, key.upper())
    if key == "e":
        return IlluminantSPD(np.ones(grid.count), grid, "E")
    if key.startswith("planck:"):
        return planckian_spd(float(key.split(":", 1)[1]), grid)
    vals = load_spectra_matrix(spec, grid)
    if vals.shape[0] != 1:
        raise ParseError(f"{spec}: illuminant file must have exactly one value column")
    return IlluminantSPD.normalized(vals[0], grid, Path(spec).stem)


def parse_illuminant_list(spec, grid=DEFAULT_GRID) -> list[IlluminantSPD]:
    """``planck:Tmin:Tmax:step`` expands to a series; anything else is one
    illuminant (comma-separated lists allowed)."""
    out = []
    for part in str(spec).split(","):
        bits = part.strip().split(":")
        if bits[0].lower() == "planck" and len(bits) == 4:
            out.extend(planckian_series(float(bits[1]), float(bits[2]), float(bits[3]), grid))
        else:
            out.append(load_illuminant(part.strip(), grid))
    return out


# ---------------------------------------------------------------------------
# Planckian sources


def planck_radiance(wavelength_nm, temperature):
    """Spectral radiance up to a constant factor: lambda^-5 / (exp(c2/(lambda T)) - 1)."""
    lam = np.asarray(wavelength_nm, dtype=float)
    return lam**-5.0 / np.expm1(_C2_NM_K / (lam * temperature))


def planckian_spd(temperature: float, grid=DEFAULT_GRID) -> IlluminantSPD:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    vals = planck_radiance(grid.wavelengths, temperature)
    return IlluminantSPD.normalized(vals, grid, f"planck:{temperature:g}")


def planckian_series(tmin, tmax, step, grid=DEFAULT_GRID) -> list[IlluminantSPD]:
    if tmin > tmax or step <= 0:
        raise DomainError("need tmin <= tmax and step > 0")
    n = int(math.floor((tmax - tmin) / step + 1e-9)) + 1
    return [planckian_spd(tmin + k * step, grid) for k in range(n)]


# ---------------------------------------------------------------------------
# colorimetry


def _vals(x, grid=None):
    if isinstance(x, Spectrum):
        if grid is not None and x.grid != grid:
            raise ShapeError("spectra live on different grids")
        return x.values
    return np.asarray(x, dtype=float)


def _check_same(a, b):
    if isinstance(a, Spectrum) and isinstance(b, Spectrum) and a.grid != b.grid:
        raise ShapeError("spectra live on different grids")
    va, vb = _vals(a), _vals(b)
    if va.shape != vb.shape:
        raise ShapeError(f"shape mismatch {va.shape} vs {vb.shape}")
    return va, vb


def white_point(illum, cmfs: ColorMatchingFunctions) -> np.ndarray:
    """XYZ of the perfect reflector, scaled to Y = 100."""
    return reflectance_to_xyz(np.ones(cmfs.grid.count), illum, cmfs)


def reflectance_to_xyz(r, illum, cmfs: ColorMatchingFunctions) -> np.ndarray:
    """Tristimulus values by rectangle-rule summation, normalized so that the
    perfect reflector has Y = 100 under ``illum``.

    ``r`` may be a single spectrum or an (N, q) stack.
    """
    e = _vals(illum, cmfs.grid)
    rv = _vals(r, cmfs.grid)
    q = cmfs.grid.count
    if e.shape != (q,) or rv.shape[-1] != q:
        raise ShapeError("reflectance, illuminant and CMFs must share the grid")
    weighted = cmfs.matrix * e  # (3, q); the step cancels in the normalization
    k = 100.0 / weighted[1].sum()
    return k * (rv @ weighted.T)


def xyz_to_lab(xyz, white) -> np.ndarray:
    """CIE 1976 L*a*b* for XYZ array(s) against a reference white."""
    xyz = np.asarray(xyz, dtype=float)
    t = xyz / np.asarray(white, dtype=float)
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(t > eps, np.cbrt(t), (kappa * t + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_color(xyz, white) -> LabColor:
    L, a, b = xyz_to_lab(xyz, white)
    return LabColor(float(L), float(a), float(b), tuple(float(w) for w in white))


def ciede2000_array(lab1, lab2, kL=1.0, kC=1.0, kH=1.0) -> np.ndarray:
    """Vectorized CIEDE2000 over (..., 3) Lab arrays."""
    lab1 = np.asarray(lab1, dtype=float)
    lab2 = np.asarray(lab2, dtype=float)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2) ** 7
    G = 0.5 * (1 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = C2p - C1p
    prod = C1p * C2p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, dh)
    dh = np.where(dh < -180, dh + 360, dh)
    dh = np.where(prod == 0, 0.0, dh)
    dHp = 2 * np.sqrt(prod) * np.sin(np.radians(dh / 2))

    Lbp = (L1 + L2) / 2
    Cbp = (C1p + C2p) / 2
    hsum = h1p + h2p
    hbp = np.where(
        np.abs(h1p - h2p) <= 180, hsum / 2, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2)
    )
    hbp = np.where(prod == 0, hsum, hbp)

    T = (
        1
        - 0.17 * np.cos(np.radians(hbp - 30))
        + 0.24 * np.cos(np.radians(2 * hbp))
        + 0.32 * np.cos(np.radians(3 * hbp + 6))
        - 0.20 * np.cos(np.radians(4 * hbp - 63))
    )
    dtheta = 30 * np.exp(-(((hbp - 275) / 25) ** 2))
    Cbp7 = Cbp**7
    RC = 2 * np.sqrt(Cbp7 / (Cbp7 + 25.0**7))
    SL = 1 + 0.015 * (Lbp - 50) ** 2 / np.sqrt(20 + (Lbp - 50) ** 2)
    SC = 1 + 0.045 * Cbp
    SH = 1 + 0.015 * Cbp * T
    RT = -np.sin(np.radians(2 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return np.sqrt(tL**2 + tC**2 + tH**2 + RT * tC * tH)


def ciede2000(a: LabColor, b: LabColor) -> float:
    if not np.allclose(a.white, b.white, rtol=0, atol=1e-9):
        raise ContractError("CIEDE2000 needs both colors under the same reference white")
    return float(ciede2000_array((a.L, a.a, a.b), (b.L, b.a, b.b)))


def spectral_de00(r_true, r_est, illum, cmfs) -> np.ndarray:
    """CIEDE2000 between reflectances rendered under ``illum`` (vectorized over rows)."""
    white = white_point(illum, cmfs)
    lab1 = xyz_to_lab(reflectance_to_xyz(r_true, illum, cmfs), white)
    lab2 = xyz_to_lab(reflectance_to_xyz(r_est, illum, cmfs), white)
    return ciede2000_array(lab1, lab2)


# ---------------------------------------------------------------------------
# spectral metrics


def rmse(a, b) -> float:
    va, vb = _check_same(a, b)
    return float(np.sqrt(np.mean((va - vb) ** 2)))


def pearson_distance(a, b, centered=True) -> float:
    """1 - Pearson correlation of the two value vectors (cosine variant with
    ``centered=False``)."""
    va, vb = _check_same(a, b)
    scale_a, scale_b = np.abs(va).max(), np.abs(vb).max()
    if centered:
        va = va - va.mean()
        vb = vb - vb.mean()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    tol = 64 * np.finfo(float).eps * np.sqrt(va.size)
    if na <= tol * scale_a or nb <= tol * scale_b:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance input")
    return float(1.0 - np.clip(va @ vb / (na * nb), -1.0, 1.0))


def rmse_rows(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.sqrt(np.mean((a - b) ** 2, axis=-1))


def pearson_distance_rows(a, b) -> np.ndarray:
    """Row-wise centered Pearson distance; zero-variance rows give NaN."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    tol = 64 * np.finfo(float).eps * np.sqrt(a.shape[-1])
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    na = np.where(na <= tol * np.abs(a).max(axis=-1) + 1e-300, 0.0, na)
    nb = np.where(nb <= tol * np.abs(b).max(axis=-1) + 1e-300, 0.0, nb)
    den = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0, np.sum(a * b, axis=-1) / den, np.nan)
    return 1.0 - np.clip(corr, -1.0, 1.0)
