"""Collate run artifacts into CSV tables, a markdown summary and gnuplot
spectra overlays. CSV is written first; markdown is rendered from it."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    ("rmse_avg", "RMSE avg"),
    ("rmse_max", "RMSE max"),
    ("rmse_p95", "RMSE 95th"),
    ("pd_avg", "PD avg"),
    ("pd_max", "PD max"),
    ("pd_p95", "PD 95th"),
    ("de00_avg", "DE00 avg"),
    ("spd_rmse_avg", "SPD RMSE avg"),
]
ANGLE_COLUMNS = ["train_angles", "test_angle", "rmse_avg", "pd_avg", "de00_avg", "spd_rmse_avg"]


@dataclass
class ReportResult:
    files: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)


def _fmt(v):
    if v is None or v == "":
        return "-"
    if isinstance(v, int) or (isinstance(v, str) and v.isdigit()):
        return str(v)
    try:
        return f"{float(v):.4f}"
    except (TypeError, ValueError):
        return str(v)


def _markdown_table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(c) if k else str(c) for k, c in enumerate(r)) + " |" for r in rows]
    return "\n".join(out)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _expected_outputs(run_dir: Path):
    """Outputs promised by manifests but absent on disk."""
    missing = []
    for mf in sorted(run_dir.rglob("*manifest.json")):
        try:
            outputs = json.loads(mf.read_text()).get("outputs", [])
        except (OSError, json.JSONDecodeError):
            missing.append(str(mf.relative_to(run_dir)) + " (unreadable)")
            continue
        for o in outputs:
            p = Path(o)
            p = p if p.is_absolute() else mf.parent / p
            if not p.exists():
                missing.append(str(o))
    return missing


def build_report(run_dir, out_dir=None) -> ReportResult:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    res = ReportResult()
    sections = ["# Results", ""]

    # evaluation runs (one row each)
    evals = [p for p in sorted(run_dir.rglob("*eval_summary.json")) if out_dir not in p.parents]
    if evals:
        rows = []
        for p in evals:
            s = json.loads(p.read_text())
            name = str(p.parent.relative_to(run_dir)) or "."
            rows.append([name, s.get("count", "")] + [s.get(k, "") for k, _ in METRIC_COLUMNS])
        header = ["run", "count"] + [k for k, _ in METRIC_COLUMNS]
        _write_csv(out_dir / "metrics.csv", header, rows)
        res.files.append(out_dir / "metrics.csv")
        res.tables["metrics"] = rows
        sections += ["## Spectral estimation", "",
                     _markdown_table(["run", "count"] + [t for _, t in METRIC_COLUMNS],
                                     [[r[0], r[1]] + r[2:] for r in rows]), ""]

    # angle study
    studies = [p for p in sorted(run_dir.rglob("angle_study.csv")) if out_dir not in p.parents]
    for idx, p in enumerate(studies):
        rows = [[r.get(c, "") for c in ANGLE_COLUMNS] for r in _read_csv(p)]
        dst = out_dir / ("angle_study.csv" if len(studies) == 1 else f"angle_study_{idx}.csv")
        _write_csv(dst, ANGLE_COLUMNS, rows)
        res.files.append(dst)
        res.tables.setdefault("angle_study", []).extend(rows)
        sections += ["## Training with different angles", "",
                     _markdown_table(["Trained angle", "Tested angle", "RMSE", "PD", "DE00", "SPD RMSE"],
                                     rows), ""]

    # consistency ablation
    for p in sorted(run_dir.rglob("ablation.json")):
        if out_dir in p.parents:
            continue
        a = json.loads(p.read_text())
        imp = a.get("mean_improvement_pct", {})
        rows = [[k.upper(), imp.get(k, "")] for k in ("rmse", "pd", "de00")]
        _write_csv(out_dir / "ablation.csv", ["metric", "improvement_pct"], rows)
        res.files.append(out_dir / "ablation.csv")
        res.tables["ablation"] = rows
        sections += ["## Consistency loss ablation", "",
                     f"Seeds: {len(a.get('per_seed', []))}", "",
                     _markdown_table(["Metric", "Improvement (%)"], rows), ""]

    # spectra overlays for gnuplot
    spectra = [p for p in sorted(run_dir.rglob("*eval_spectra.csv")) if out_dir not in p.parents]
    if spectra:
        sdir = out_dir / "spectra"
        sdir.mkdir(exist_ok=True)
        plots = []
        for k, p in enumerate(spectra):
            rows = _read_csv(p)
            if not rows:
                continue
            cols = [c for c in rows[0] if c != "wavelength_nm"]
            dat = sdir / f"spectra_{k}.dat"
            with open(dat, "w") as fh:
                fh.write("# wavelength_nm " + " ".join(cols) + "\n")
                for r in rows:
                    fh.write(" ".join([r["wavelength_nm"]] + [r[c] for c in cols]) + "\n")
            res.files.append(dat)
            for j in range(0, len(cols) - 1, 2):
                plots.append((dat.name, j + 2, j + 3, cols[j].removeprefix("true_")))
        gp = sdir / "spectra.gp"
        lines = ["set xlabel 'wavelength (nm)'", "set ylabel 'reflectance'", "set yrange [0:1]",
                 "set terminal pngcairo size 800,500"]
        for dat, c_true, c_est, label in plots:
            lines += [f"set output '{label}.png'",
                      f"plot '{dat}' using 1:{c_true} with lines title 'ground truth {label}', \\",
                      f"     '{dat}' using 1:{c_est} with lines dashtype 2 title 'estimate {label}'"]
        gp.write_text("\n".join(lines) + "\n")
        res.files.append(gp)
        sections += ["## Spectra", "", f"{len(plots)} overlays in `spectra/` (run `gnuplot spectra.gp`).", ""]

    res.missing = _expected_outputs(run_dir)
    if res.missing:
        sections += ["## Missing artifacts", ""] + [f"- {m}" for m in res.missing] + [""]
        res.warnings.append(f"{len(res.missing)} expected artifacts are missing")
    if not res.tables and not spectra:
        res.warnings.append(f"no result artifacts found under {run_dir}")
        sections += ["No result artifacts found.", ""]
    for w in res.warnings:
        log.warning(w)
    (out_dir / "report.md").write_text("\n".join(sections))
    res.files.append(out_dir / "report.md")
    return res
