"""SGD-with-momentum training, evaluation and inference for the two-branch net."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..crc import crc64
from ..dataset import Dataset, NoiseConfig, Normalizer, augment_noise, compute_normalizer
from ..errors import CheckpointError, ChecksumError, ConfigError, DivergenceError, VersionError
from ..spectra import load_cmfs, load_illuminant, pearson_distance_rows, rmse_rows, spectral_de00
from .losses import LossWeights, loss_and_grads
from .model import NetworkConfig, NetworkParams, backward_from_outputs, forward, forward_train, init_network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 20
    momentum: float = 0.9
    batch_size: int = 50
    epochs: int = 60
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    augment: bool = True
    # passes over the training split per epoch, each with fresh noise
    repeats: int = 1
    # illuminant used in the consistency term when the SPD branch is off
    fixed_illuminant: str = "d65"
    dtype: str = "float32"
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 0 or self.repeats < 1:
            raise ConfigError("invalid training configuration")
        w = self.weights
        if min(w.reflectance, w.spd, w.consistency) < 0:
            raise ConfigError("loss weights must be non-negative")

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self):
        d = asdict(self)
        d["noise"]["variances"] = list(d["noise"]["variances"])
        return d


@dataclass
class Checkpoint:
    params: NetworkParams
    velocity: dict
    epoch: int
    normalizer: Normalizer
    train_config: TrainConfig
    signal_scale: float = 1.0
    history: list = field(default_factory=list)
    rng_state: dict | None = None

    @property
    def config(self) -> NetworkConfig:
        return self.params.config

    def digest(self) -> str:
        return self.params.digest()


def sgd_momentum_step(params, velocity, grads, lr, momentum):
    """v <- momentum v + lr g ; theta <- theta - v (in place)."""
    for k, g in grads.items():
        v = velocity[k]
        v *= momentum
        v += lr * g
        params[k] -= v


def _batch_rng(seed, epoch, batch):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, batch)))


def train(
    train_set: Dataset,
    net_config: NetworkConfig,
    cfg: TrainConfig,
    test_set: Dataset | None = None,
    resume: Checkpoint | None = None,
    log_path=None,
    checkpoint_path=None,
    progress=None,
) -> Checkpoint:
    """Train on ``train_set`` (clean renders; noise is drawn per batch).

    The normalizer comes from the dataset manifest when present, otherwise it
    is computed from ``train_set``.
    """
    dtype = np.dtype(cfg.dtype)
    norm = train_set.normalizer or compute_normalizer(train_set)
    cmfs = load_cmfs(grid=_grid_of(train_set)).matrix
    fixed_spd = None
    if not net_config.spd_branch:
        fixed_spd = load_illuminant(cfg.fixed_illuminant, _grid_of(train_set)).values.astype(dtype)
    if resume is not None:
        params, velocity, start = resume.params.astype(dtype), {k: v.astype(dtype) for k, v in resume.velocity.items()}, resume.epoch
        history = list(resume.history)
    else:
        params = init_network(net_config, cfg.seed, dtype)
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        start, history = 0, []

    images = train_set.images
    R_all = train_set.reflectances.astype(dtype)
    E_all = train_set.spds.astype(dtype)
    mean, std = norm.mean.astype(dtype), norm.std.astype(dtype)
    scale = train_set.signal_scale
    N = len(train_set)
    writer = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["epoch", "lr", "L_R", "L_E", "L_S", "total", "test_rmse", "test_pd", "test_de00", "seconds"])

    ckpt = None
    try:
        for epoch in range(start, cfg.epochs):
            t0 = time.time()
            lr = cfg.learning_rate(epoch)
            order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(epoch, 2**31)))
            order = np.concatenate([order_rng.permutation(N) for _ in range(cfg.repeats)])
            sums = np.zeros(4)
            nb = 0
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                x = images[idx]
                if cfg.augment:
                    x = augment_noise(x, _batch_rng(cfg.seed, epoch, b), cfg.noise, scale)
                x = ((x.astype(dtype) - mean) / std).astype(dtype, copy=False)
                r_hat, e_hat, caches = forward_train(params, x)
                E_t = E_all[idx] if fixed_spd is None else np.broadcast_to(fixed_spd, r_hat.shape)
                lb, gR, gE = loss_and_grads(r_hat, e_hat, R_all[idx], E_t, cmfs, cfg.weights)
                if not math.isfinite(lb.total):
                    ckpt = Checkpoint(params, velocity, epoch, norm, cfg, scale, history)
                    if checkpoint_path is not None:
                        save_checkpoint(ckpt, Path(str(checkpoint_path) + ".diverged"))
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = backward_from_outputs(params, caches, gR, gE)
                sgd_momentum_step(params, velocity, grads, lr, cfg.momentum)
                sums += (lb.L_R, lb.L_E, lb.L_S, lb.total)
                nb += 1
            sums /= max(nb, 1)
            row = {"epoch": epoch, "lr": lr, "L_R": sums[0], "L_E": sums[1], "L_S": sums[2], "total": sums[3]}
            ckpt = Checkpoint(params, velocity, epoch + 1, norm, cfg, scale, history)
            if test_set is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
                rep = evaluate(ckpt, test_set)
                row.update(test_rmse=rep.summary["rmse_avg"], test_pd=rep.summary["pd_avg"], test_de00=rep.summary["de00_avg"])
            row["seconds"] = time.time() - t0
            history.append(row)
            log.info("epoch %d lr %.1e L_R %.5f L_E %.5f L_S %.5f", epoch, lr, *sums[:3])
            if writer is not None:
                writer.writerow([row.get(k, "") for k in ("epoch", "lr", "L_R", "L_E", "L_S", "total", "test_rmse", "test_pd", "test_de00", "seconds")])
                fh.flush()
            if progress is not None:
                progress(row)
            if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, checkpoint_path)
    finally:
        if writer is not None:
            fh.close()
    if ckpt is None:
        ckpt = Checkpoint(params, velocity, start, norm, cfg, scale, history)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def _grid_of(ds: Dataset):
    from ..spectra import WavelengthGrid

    g = ds.manifest.get("grid")
    return WavelengthGrid(**g) if g else WavelengthGrid()


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_batch(ckpt: Checkpoint, images, clamp=True):
    """Raw linear images (B, n, n, s) -> (reflectances, spds or None)."""
    if ckpt.normalizer is None:
        raise CheckpointError("checkpoint carries no normalizer")
    x = ckpt.normalizer.apply(np.asarray(images, dtype=np.float64))
    dtype = ckpt.params["conv1.W"].dtype
    outs_r, outs_e = [], []
    for lo in range(0, len(x), 500):
        r, e = forward(ckpt.params, x[lo:lo + 500].astype(dtype))
        outs_r.append(r)
        outs_e.append(e)
    r = np.concatenate(outs_r).astype(np.float64)
    e = None if outs_e[0] is None else np.concatenate(outs_e).astype(np.float64)
    if clamp:
        r = np.clip(r, 0.0, 1.0)
        e = None if e is None else np.maximum(e, 0.0)
    return r, e


def predict(ckpt: Checkpoint, image):
    """One raw (n, n, s) image -> (reflectance, spd or None), clamped."""
    r, e = predict_batch(ckpt, np.asarray(image)[None])
    return r[0], (None if e is None else e[0])


@dataclass
class EvalReport:
    per_sample: dict
    summary: dict

    def write(self, directory, stem="eval"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        keys = list(self.per_sample)
        with open(directory / f"{stem}_samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in zip(*(self.per_sample[k] for k in keys)):
                w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
        with open(directory / f"{stem}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.summary.items():
                w.writerow([k, f"{v:.10g}" if isinstance(v, float) else v])
        (directory / f"{stem}_summary.json").write_text(json.dumps(self.summary, indent=2))


def nearest_rank_percentile(values, pct):
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return float("nan")
    k = max(int(math.ceil(pct / 100.0 * len(v))), 1)
    return float(v[k - 1])


def summarize(values, prefix) -> dict:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return {
        f"{prefix}_avg": float(v.mean()) if len(v) else float("nan"),
        f"{prefix}_max": float(v.max()) if len(v) else float("nan"),
        f"{prefix}_p95": nearest_rank_percentile(v, 95),
    }


def evaluate_predictions(R_true, R_est, E_true=None, E_est=None, grid=None, images_meta=None) -> EvalReport:
    """Metrics on reflectances (RMSE, Pearson distance, CIEDE2000 under D65 /
    2-degree) and, if given, SPD RMSE."""
    from ..spectra import DEFAULT_GRID

    grid = grid or DEFAULT_GRID
    cmfs = load_cmfs(grid=grid)
    d65 = load_illuminant("d65", grid)
    R_true = np.asarray(R_true, dtype=np.float64)
    R_est = np.asarray(R_est, dtype=np.float64)
    per = {
        "rmse": rmse_rows(R_true, R_est),
        "pd": pearson_distance_rows(R_true, R_est),
        "de00": spectral_de00(R_true, R_est, d65, cmfs),
    }
    summary = {"count": len(R_true)}
    for k in ("rmse", "pd", "de00"):
        summary.update(summarize(per[k], k))
    if E_true is not None and E_est is not None:
        per["spd_rmse"] = rmse_rows(E_true, E_est)
        summary.update(summarize(per["spd_rmse"], "spd_rmse"))
    if images_meta:
        per = {**images_meta, **per}
    per = {k: [x.item() if hasattr(x, "item") else x for x in v] for k, v in per.items()}
    return EvalReport(per, summary)


def evaluate(ckpt: Checkpoint, test_set: Dataset, noise: NoiseConfig | None = None, seed=0) -> EvalReport:
    """Predict every test sample (clean, or with ``noise``) and score it."""
    if len(test_set) == 0:
        raise ConfigError("evaluation split is empty")
    imgs = test_set.images
    if noise is not None:
        imgs = augment_noise(imgs, np.random.default_rng(seed), noise, test_set.signal_scale)
    r, e = predict_batch(ckpt, imgs)
    meta = {
        "patch_id": test_set.patch_ids.tolist(),
        "illum_id": test_set.illum_ids.tolist(),
        "angle": test_set.angles.tolist(),
    }
    return evaluate_predictions(
        test_set.reflectances, r,
        test_set.spds if e is not None else None, e,
        _grid_of(test_set), meta,
    )


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"VCNETCK\x01"
_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path):
    names = list(ckpt.config.shapes())
    blobs, index, off = [], [], 0
    for group, arrays in (("param", ckpt.params), ("velocity", ckpt.velocity)):
        for k in names:
            a = np.ascontiguousarray(arrays[k])
            le = a.dtype.newbyteorder("<")
            b = a.astype(le).tobytes()
            index.append({"group": group, "name": k, "dtype": le.str, "shape": list(a.shape), "offset": off, "nbytes": len(b)})
            blobs.append(b)
            off += len(b)
    meta = {
        "network": json.loads(ckpt.config.to_json()),
        "config_digest": ckpt.config.digest(),
        "train": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "normalizer": ckpt.normalizer.to_dict() if ckpt.normalizer else None,
        "signal_scale": ckpt.signal_scale,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "tensors": index,
    }
    mj = json.dumps(meta, sort_keys=True).encode()
    body = b"".join([_MAGIC, struct.pack("<IQ", _VERSION, len(mj)), mj] + blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", crc64(body)))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 20:
        raise ChecksumError(f"{path}: file too short")
    if raw[: len(_MAGIC)] != _MAGIC:
        raise VersionError(f"{path}: not a checkpoint file")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if crc64(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, mlen = struct.unpack_from("<IQ", raw, len(_MAGIC))
    if version != _VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    start = len(_MAGIC) + 12
    meta = json.loads(body[start:start + mlen])
    data = body[start + mlen:]
    groups = {"param": {}, "velocity": {}}
    for t in meta["tensors"]:
        a = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=int)), offset=t["offset"])
        groups[t["group"]][t["name"]] = a.reshape(t["shape"]).astype(np.dtype(t["dtype"]).newbyteorder("="))
    cfg = NetworkConfig(**meta["network"])
    if cfg.digest() != meta["config_digest"]:
        raise CheckpointError(f"{path}: network config digest mismatch")
    norm = Normalizer.from_dict(meta["normalizer"]) if meta["normalizer"] else None
    return Checkpoint(
        NetworkParams(cfg, groups["param"]),
        groups["velocity"],
        meta["epoch"],
        norm,
        TrainConfig(**meta["train"]),
        meta["signal_scale"],
        meta["history"],
        meta["rng_state"],
    )


# ---------------------------------------------------------------------------
# consistency-loss ablation


def ablate_consistency(train_set, test_set, net_config, cfg: TrainConfig, seeds=(0, 1, 2), arms=(0.0, 1.0), trainer=None):
    """Train once per (seed, consistency weight) and report the percentage
    improvement of the second arm over the first on RMSE, PD and DE00."""
    trainer = trainer or (lambda tc: train(train_set, net_config, tc))
    per_seed = []
    for s in seeds:
        res = {}
        for w in arms:
            tc = replace(cfg, seed=s, weights=replace(cfg.weights, consistency=w))
            rep = evaluate(trainer(tc), test_set)
            res[w] = {k: rep.summary[f"{k}_avg"] for k in ("rmse", "pd", "de00")}
        off, on = res[arms[0]], res[arms[1]]
        per_seed.append({
            "seed": s,
            "without": off,
            "with": on,
            "improvement_pct": {k: 100.0 * (off[k] - on[k]) / off[k] if off[k] else 0.0 for k in off},
        })
    mean = {
        k: float(np.mean([p["improvement_pct"][k] for p in per_seed])) for k in ("rmse", "pd", "de00")
    }
    mean_metrics = {
        arm: {k: float(np.mean([p[arm][k] for p in per_seed])) for k in ("rmse", "pd", "de00")}
        for arm in ("without", "with")
    }
    return {"per_seed": per_seed, "mean_improvement_pct": mean, "mean_metrics": mean_metrics}
