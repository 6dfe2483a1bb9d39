"""Panel image files: facet CSV (raw floats) and 16-bit linear PNG."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import png

from .errors import ContractError, ParseError


def write_facet_csv(path, image):
    """Rows ``facet_row, facet_col, ch1..chs`` in row-major facet order."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3:
        raise ContractError("facet images are (n, n, s) arrays")
    n, _, s = img.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["facet_row", "facet_col"] + [f"ch{c + 1}" for c in range(s)])
        for i in range(n):
            for j in range(img.shape[1]):
                w.writerow([i, j] + [repr(float(v)) for v in img[i, j]])


def read_facet_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["facet_row", "facet_col"] or len(rows[0]) < 3:
        raise ParseError(f"{path}: expected header facet_row,facet_col,ch1,...")
    s = len(rows[0]) - 2
    cells = {}
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != s + 2:
            raise ParseError(f"expected {s + 2} fields", row=k)
        try:
            i, j = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), row=k) from None
        if (i, j) in cells:
            raise ParseError(f"duplicate facet ({i}, {j})", row=k)
        cells[(i, j)] = vals
    n = int(round(np.sqrt(len(cells))))
    if n * n != len(cells) or set(cells) != {(i, j) for i in range(n) for j in range(n)}:
        raise ParseError(f"{path}: facets do not cover a square grid")
    img = np.empty((n, n, s))
    for (i, j), v in cells.items():
        img[i, j] = v
    if not np.all(np.isfinite(img)):
        raise ParseError(f"{path}: non-finite facet value")
    return img


def write_png16(path, image, scale: float):
    """Linear 16-bit PNG with ``value * scale`` mapped onto [0, 65535] (clipped).
    Three-channel images are written as RGB, one-channel as greyscale; other
    channel counts are written one greyscale strip per channel side by side."""
    img = np.asarray(image, dtype=float)
    n, w, s = img.shape
    q = np.round(np.clip(img * scale, 0.0, 1.0) * 65535).astype(np.uint16)
    if s == 3:
        rows, greyscale = q.reshape(n, w * 3), False
    elif s == 1:
        rows, greyscale = q[:, :, 0], True
    else:
        rows, greyscale = np.concatenate([q[:, :, c] for c in range(s)], axis=1), True
    writer = png.Writer(rows.shape[1] // (1 if greyscale else 3), n, greyscale=greyscale, bitdepth=16)
    with open(Path(path), "wb") as fh:
        writer.write(fh, rows.tolist())


def read_png16(path) -> np.ndarray:
    """Back to (n, n, s) integer counts; used to check the writer."""
    w, h, rows, info = png.Reader(filename=str(path)).read()
    planes = info["planes"]
    return np.array([list(r) for r in rows], dtype=np.uint16).reshape(h, w, planes)
