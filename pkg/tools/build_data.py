"""Regenerate the bundled spectral tables under src/interspec/data/.

Sources (downloaded wheels, unpacked into SRC):
  luxpy 1.12.5: Munsell1269.dat, Munsell1269NotationInfo.dat,
                ciexyz_1931_2.dat, CIE_D65.csv, S0123_daylight_phase_5nm.csv
  colour-science 0.4.6: CANON_EOS_5DMark_II_RGB_Sensitivities.csv

usage: python tools/build_data.py SRC
"""
import csv
import sys
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "interspec" / "data"


def write(name, wl, cols, fmt="%.6g"):
    cols = np.atleast_2d(np.asarray(cols, dtype=float))
    with open(OUT / name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm"] + [f"v{i + 1}" for i in range(cols.shape[0])])
        for k, lam in enumerate(wl):
            w.writerow([f"{lam:g}"] + [fmt % v for v in cols[:, k]])


def daylight(cct, s0123):
    # CIE 15 daylight locus; M1, M2 rounded to 3 decimals as in the standard tables
    t = cct * 1.4388 / 1.4380
    xd = -4.6070e9 / t**3 + 2.9678e6 / t**2 + 0.09911e3 / t + 0.244063
    yd = -3.000 * xd**2 + 2.870 * xd - 0.275
    m = 0.0241 + 0.2562 * xd - 0.7341 * yd
    m1 = round((-1.3515 - 1.7703 * xd + 5.9114 * yd) / m, 3)
    m2 = round((0.0300 - 31.4424 * xd + 30.0717 * yd) / m, 3)
    return s0123[:, 1] + m1 * s0123[:, 2] + m2 * s0123[:, 3]


def main(src):
    src = Path(src)
    rfl = np.loadtxt(src / "luxpy/data/rfls/Munsell1269.dat", delimiter=",")
    keep = (rfl[:, 0] >= 380) & (rfl[:, 0] <= 780)
    write("munsell1269.csv", rfl[keep, 0], rfl[keep, 1:].T, fmt="%.4f")

    with open(src / "luxpy/data/rfls/Munsell1269NotationInfo.dat") as fh:
        rows = list(csv.reader(fh))[1:]
    with open(OUT / "munsell1269_notation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "notation"])
        for r in rows:
            w.writerow([r[0], f"{r[1]} {float(r[2]):g}/{float(r[3]):g}"])

    cmf = np.loadtxt(src / "luxpy/data/cmfs/ciexyz_1931_2.dat", delimiter=",")
    write("cie1931_2deg.csv", cmf[:, 0], cmf[:, 1:].T, fmt="%.9g")

    d65 = np.loadtxt(src / "luxpy/data/spds/CIE_D65.csv", delimiter=",")
    write("d65.csv", d65[:, 0], d65[:, 1])

    s0123 = np.genfromtxt(src / "luxpy/data/spds/S0123_daylight_phase_5nm.csv", delimiter=",")
    write("d50.csv", s0123[:, 0], daylight(5003.0, s0123), fmt="%.4f")

    cam = np.loadtxt(
        src / "colour/characterisation/datasets/rawtoaces/CANON_EOS_5DMark_II_RGB_Sensitivities.csv",
        delimiter=",", skiprows=1,
    )
    write("canon_eos_5d_mark_ii.csv", cam[:, 0], cam[:, 1:].T)


if __name__ == "__main__":
    main(sys.argv[1])
