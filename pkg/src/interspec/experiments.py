"""Experiment orchestration shared by the command line and the acceptance runs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, GenerationConfig, attach_normalizer, generate_dataset, split_by_patch
from .errors import ConfigError, ContractError
from .geometry import cached_kernel, eigendecompose
from .net.model import NetworkConfig
from .net.train import Checkpoint, EvalReport, TrainConfig, evaluate, load_checkpoint, predict_batch, save_checkpoint, train
from .render import construct_metameric_light, render_panel_batch
from .spectra import CameraSensitivities, IlluminantSPD, write_spectral_csv

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# training with an on-disk cache


def run_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def train_cached(train_set: Dataset, net: NetworkConfig, cfg: TrainConfig, path, test_set=None, log_path=None) -> Checkpoint:
    """Train unless a finished checkpoint already sits at ``path``; a partial
    checkpoint there is resumed."""
    path = Path(path)
    resume = None
    if path.exists():
        ck = load_checkpoint(path)
        if ck.epoch >= cfg.epochs and ck.config == net:
            log.info("reusing %s", path)
            return ck
        if ck.config == net:
            resume = ck
    path.parent.mkdir(parents=True, exist_ok=True)
    return train(train_set, net, cfg, test_set=test_set, resume=resume, log_path=log_path, checkpoint_path=path)


def check_compatible(ckpt: Checkpoint, ds: Dataset):
    n, s = ds.images.shape[1], ds.images.shape[3]
    cfg = ckpt.config
    if cfg.input_size != n or cfg.in_channels != s or cfg.outputs != ds.reflectances.shape[1]:
        raise ConfigError(
            f"checkpoint expects {cfg.input_size}x{cfg.input_size}x{cfg.in_channels} images and "
            f"{cfg.outputs} wavelengths; dataset has {n}x{n}x{s} and {ds.reflectances.shape[1]}"
        )


def write_eval_bundle(ckpt: Checkpoint, ds: Dataset, report: EvalReport, directory, stem="eval", overlays=3):
    """Metrics CSV/JSON plus true-vs-estimated spectra for the best, median
    and worst samples by RMSE."""
    directory = Path(directory)
    report.write(directory, stem)
    r_est, _ = predict_batch(ckpt, ds.images)
    order = np.argsort(report.per_sample["rmse"])
    picks = sorted({int(order[0]), int(order[len(order) // 2]), int(order[-1])})[:overlays]
    grid = ds.manifest.get("grid", {"start": 400.0, "end": 700.0, "step": 5.0})
    wl = np.arange(grid["start"], grid["end"] + grid["step"] / 2, grid["step"])
    with open(directory / f"{stem}_spectra.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm"] + [f"{k}_{int(ds.patch_ids[i])}_{int(ds.illum_ids[i])}" for i in picks for k in ("true", "est")])
        for q, lam in enumerate(wl):
            w.writerow([f"{lam:g}"] + [f"{v:.6f}" for i in picks for v in (ds.reflectances[i, q], r_est[i, q])])
    return directory


# ---------------------------------------------------------------------------
# angle study


@dataclass(frozen=True)
class AngleRow:
    train_angles: tuple
    test_angle: float

    @classmethod
    def parse(cls, text: str) -> "AngleRow":
        """``"45"`` (train and test at 45) or ``"30+60+90:45"``."""
        if ":" in text:
            tr, te = text.split(":", 1)
        else:
            tr = te = text
        try:
            angles = tuple(float(a) for a in tr.split("+"))
            return cls(angles, float(te))
        except ValueError:
            raise ConfigError(f"bad angle row {text!r}") from None

    @property
    def label(self) -> str:
        return "+".join(f"{a:g}" for a in self.train_angles)


def angle_study(
    rows,
    patches,
    illuminants: list[IlluminantSPD],
    camera: CameraSensitivities,
    net: NetworkConfig,
    cfg: TrainConfig,
    out_dir,
    gen: GenerationConfig | None = None,
    split_fraction=0.9,
    split_seed=0,
):
    """Train once per distinct training-angle set, test each row on the held
    out patches rendered at the row's test angle. Writes ``angle_study.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = gen or GenerationConfig()
    models, table = {}, []
    for row in rows:
        if row.train_angles not in models:
            ds = generate_dataset(patches, illuminants, list(row.train_angles), camera, gen)
            tr, _ = split_by_patch(ds, split_fraction, split_seed)
            attach_normalizer(ds, tr)
            key = run_key(row.label, net, cfg.to_dict(), ds.manifest["illuminants"], split_seed, len(patches), camera.name)
            ckpt = train_cached(ds.split("train"), net, cfg, out_dir / f"train_{row.label}_{key}.ck")
            models[row.train_angles] = (ckpt, ds.manifest["split"]["test"])
        ckpt, test_ids = models[row.train_angles]
        test_ds = generate_dataset(np.asarray(patches)[test_ids], illuminants, [row.test_angle], camera, gen, patch_ids=test_ids)
        rep = evaluate(ckpt, test_ds)
        write_eval_bundle(ckpt, test_ds, rep, out_dir / f"row_{row.label}_to_{row.test_angle:g}")
        s = rep.summary
        table.append({
            "train_angles": row.label,
            "test_angle": f"{row.test_angle:g}",
            "rmse_avg": s["rmse_avg"],
            "pd_avg": s["pd_avg"],
            "de00_avg": s["de00_avg"],
            "spd_rmse_avg": s.get("spd_rmse_avg", ""),
        })
        log.info("angle row %s -> %g: rmse %.4f", row.label, row.test_angle, s["rmse_avg"])
    with open(out_dir / "angle_study.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]) if table else ["train_angles", "test_angle"])
        w.writeheader()
        w.writerows(table)
    return table


# ---------------------------------------------------------------------------
# metamer demonstration


@dataclass
class MetamerDemo:
    illuminant: IlluminantSPD
    metamer_light: IlluminantSPD
    flat_original: np.ndarray
    flat_metamer: np.ndarray
    folded_original: np.ndarray
    folded_metamer: np.ndarray

    @staticmethod
    def _rel(a, b):
        return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)

    @property
    def flat_max_rel_diff(self) -> float:
        return float(self._rel(self.flat_original, self.flat_metamer).max())

    @property
    def folded_difference(self) -> np.ndarray:
        return self._rel(self.folded_original, self.folded_metamer)

    @property
    def folded_max_rel_diff(self) -> float:
        return float(self.folded_difference.max())


def metamer_demo(r, illum: IlluminantSPD, cam: CameraSensitivities, angle=45.0, n=10, samples=None) -> MetamerDemo:
    """Surface ``r`` under ``illum`` against a perfect white under the
    constructed metameric light, rendered flat (no interreflection) and folded."""
    r = np.asarray(r, dtype=float)
    if r.shape != (cam.grid.count,):
        raise ContractError("reflectance does not match the camera grid")
    light = construct_metameric_light(r, illum, cam)
    white = np.ones_like(r)
    kw = {} if samples is None else {"samples": samples}
    eig = eigendecompose(cached_kernel(angle, n, **kw))
    flat = eigendecompose(np.zeros((2 * n * n, 2 * n * n)))

    def pair(e):
        return (render_panel_batch(e, n, r[None], illum.values, cam)[0],
                render_panel_batch(e, n, white[None], light.values, cam)[0])

    fo, fm = pair(flat)
    go, gm = pair(eig)
    return MetamerDemo(illum, light, fo, fm, go, gm)


def write_metamer_outputs(demo: MetamerDemo, out_dir, png_scale: float):
    from .imageio import write_facet_csv, write_png16

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("flat_original", "flat_metamer", "folded_original", "folded_metamer"):
        img = getattr(demo, name)
        write_facet_csv(out_dir / f"{name}.csv", img)
        write_png16(out_dir / f"{name}.png", img, png_scale)
        written += [f"{name}.csv", f"{name}.png"]
    write_facet_csv(out_dir / "folded_difference.csv", demo.folded_difference)
    grid = demo.illuminant.grid
    write_spectral_csv(out_dir / "lights.csv", grid.wavelengths, np.c_[demo.illuminant.values, demo.metamer_light.values])
    summary = {
        "flat_max_rel_diff": demo.flat_max_rel_diff,
        "folded_max_rel_diff": demo.folded_max_rel_diff,
        "illuminant": demo.illuminant.name,
    }
    (out_dir / "metamer_summary.json").write_text(json.dumps(summary, indent=2))
    return written + ["folded_difference.csv", "lights.csv", "metamer_summary.json"]


def with_consistency(cfg: TrainConfig, weight: float) -> TrainConfig:
    return replace(cfg, weights=replace(cfg.weights, consistency=weight))
