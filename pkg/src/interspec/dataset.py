"""Rendered training corpora: generation, patch-level splits, normalization,
noise augmentation and the binary dataset container."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ChecksumError,
    ContractError,
    DegenerateChannelError,
    IngestionError,
    SplitError,
    VersionError,
)
from .crc import crc64
from .geometry import DEFAULT_SAMPLES, cached_kernel, eigendecompose
from .render import render_panel_batch
from .spectra import DEFAULT_GRID, CameraSensitivities, IlluminantSPD, ReflectanceSpectrum, WavelengthGrid

log = logging.getLogger(__name__)


@dataclass
class NoiseConfig:
    peak: float = 1e4  # photon count at unit signal
    variances: tuple = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3)
    probability: float = 0.5

    def __post_init__(self):
        self.variances = tuple(float(v) for v in self.variances)
        if len(self.variances) != 5 or list(self.variances) != sorted(self.variances):
            raise ContractError("noise config needs 5 ascending Gaussian variances")
        if not 0 <= self.probability <= 1:
            raise ContractError("Gaussian probability must lie in [0, 1]")


@dataclass
class GenerationConfig:
    n: int = 10
    samples_per_pair: int = DEFAULT_SAMPLES
    kernel_seed: int = 0
    seed: int = 0
    side: float = 1.0


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, images):
        return (np.asarray(images) - self.mean) / self.std

    def invert(self, images):
        return np.asarray(images) * self.std + self.mean

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class Sample:
    image: np.ndarray
    target_reflectance: np.ndarray
    target_spd: np.ndarray
    meta: dict


@dataclass(eq=False)
class Dataset:
    """Clean renders plus targets; ``images`` is (N, n, n, s) float32."""

    images: np.ndarray
    reflectances: np.ndarray  # (N, q) float32
    spds: np.ndarray  # (N, q) float32
    patch_ids: np.ndarray  # (N,) int
    illum_ids: np.ndarray  # (N,) int
    angles: np.ndarray  # (N,) float
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        names = self.manifest.get("illuminants", [])
        k = int(self.illum_ids[i])
        return Sample(
            self.images[i],
            self.reflectances[i],
            self.spds[i],
            {
                "patch_id": int(self.patch_ids[i]),
                "illuminant": names[k] if k < len(names) else k,
                "angle": float(self.angles[i]),
            },
        )

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(
            self.images[idx], self.reflectances[idx], self.spds[idx],
            self.patch_ids[idx], self.illum_ids[idx], self.angles[idx], dict(self.manifest),
        )

    @property
    def normalizer(self) -> Normalizer | None:
        d = self.manifest.get("normalizer")
        return Normalizer.from_dict(d) if d else None

    @property
    def signal_scale(self) -> float:
        return float(self.manifest.get("signal_scale", 1.0))

    def split(self, name) -> "Dataset":
        """Train or test part according to the manifest's split assignment."""
        sp = self.manifest.get("split")
        if not sp:
            raise SplitError("dataset has no split assignment")
        ids = set(sp[name])
        return self.subset(np.array([p in ids for p in self.patch_ids], dtype=bool))

    def equals(self, other) -> bool:
        arrays = ("images", "reflectances", "spds", "patch_ids", "illum_ids", "angles")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and (
            self.manifest == other.manifest
        )


def unit_signal(cam: CameraSensitivities) -> float:
    """Largest channel response of a flat perfect white under unit equal-energy
    light; the noise model counts photons relative to this level."""
    return float(np.max(cam.matrix.sum(axis=1)) * cam.grid.step / np.pi)


def generate_dataset(
    patches,
    illuminants: list[IlluminantSPD],
    angles,
    camera: CameraSensitivities,
    config: GenerationConfig | None = None,
    patch_ids=None,
    chunk: int = 256,
) -> Dataset:
    """One clean render per (angle, illuminant, patch), in that nesting order."""
    config = config or GenerationConfig()
    R = np.stack([np.asarray(p, dtype=float) for p in patches]) if len(patches) else np.empty((0, camera.grid.count))
    if R.ndim != 2 or R.shape[1] != camera.grid.count:
        raise IngestionError("patch spectra do not match the camera grid")
    if not illuminants:
        raise IngestionError("no illuminants given")
    angles = [float(a) for a in np.atleast_1d(angles)]
    patch_ids = np.arange(len(R)) if patch_ids is None else np.asarray(patch_ids)
    n, s = config.n, camera.channels
    images, refl, spd, pid, iid, ang = [], [], [], [], [], []
    kernels = {}
    for a in angles:
        K = cached_kernel(a, n, config.samples_per_pair, config.kernel_seed, config.side)
        kernels[a] = {"samples": K.samples, "seed": K.seed, "raw_asymmetry": K.raw_asymmetry}
        eig = eigendecompose(K)
        for k, il in enumerate(illuminants):
            for start in range(0, len(R), chunk):
                block = R[start:start + chunk]
                images.append(render_panel_batch(eig, n, block, il.values, camera).astype(np.float32))
            refl.append(R.astype(np.float32))
            spd.append(np.repeat(il.values[None].astype(np.float32), len(R), axis=0))
            pid.append(patch_ids)
            iid.append(np.full(len(R), k))
            ang.append(np.full(len(R), a))
        log.info("rendered angle %g: %d illuminants x %d patches", a, len(illuminants), len(R))
    q = camera.grid.count
    manifest = {
        "tool_version": __version__,
        "grid": camera.grid.to_dict(),
        "n": n,
        "channels": s,
        "camera": camera.name,
        "angles": angles,
        "illuminants": [il.name for il in illuminants],
        "patch_ids": [int(p) for p in patch_ids],
        "generation": asdict(config),
        "kernels": {f"{a:g}": v for a, v in kernels.items()},
        "signal_scale": unit_signal(camera),
    }
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.empty(shape)  # noqa: E731
    return Dataset(
        cat(images, (0, n, n, s)).astype(np.float32),
        cat(refl, (0, q)).astype(np.float32),
        cat(spd, (0, q)).astype(np.float32),
        cat(pid, (0,)).astype(np.int64),
        cat(iid, (0,)).astype(np.int64),
        cat(ang, (0,)).astype(np.float64),
        manifest,
    )


def split_by_patch(dataset: Dataset, train_fraction=0.9, seed=0):
    """Assign whole patches to train or test; returns (train, test) and
    records the assignment in ``dataset.manifest``."""
    if not 0 < train_fraction < 1:
        raise SplitError("train fraction must lie strictly between 0 and 1")
    ids = np.unique(dataset.patch_ids)
    if len(ids) < 2:
        raise SplitError("need at least two patches to split")
    n_train = min(max(int(math.floor(train_fraction * len(ids))), 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(ids)
    train_ids = np.sort(perm[:n_train])
    test_ids = np.sort(perm[n_train:])
    dataset.manifest["split"] = {
        "seed": seed,
        "fraction": train_fraction,
        "train": [int(p) for p in train_ids],
        "test": [int(p) for p in test_ids],
    }
    return dataset.split("train"), dataset.split("test")


def compute_normalizer(train: Dataset | np.ndarray) -> Normalizer:
    images = train.images if isinstance(train, Dataset) else np.asarray(train)
    if len(images) == 0:
        raise ContractError("cannot normalize an empty training split")
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 1e-12 * np.maximum(np.abs(mean), 1.0)):
        raise DegenerateChannelError("a channel has zero variance over the training split")
    return Normalizer(mean, std)


def attach_normalizer(dataset: Dataset, train: Dataset) -> Normalizer:
    norm = compute_normalizer(train)
    dataset.manifest["normalizer"] = norm.to_dict()
    return norm


def apply_normalizer(image, stats: Normalizer):
    return stats.apply(image)


def per_image_normalize(images):
    """Alternative per-image standardization (each image to zero mean, unit std
    per channel). Removes the absolute-intensity cue; off by default."""
    x = np.asarray(images, dtype=np.float64)
    mu = x.mean(axis=(-3, -2), keepdims=True)
    sd = x.std(axis=(-3, -2), keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0)


def augment_noise(image, rng: np.random.Generator, cfg: NoiseConfig, scale: float = 1.0):
    """Poisson shot noise then, with probability ``cfg.probability``, additive
    Gaussian noise of one of the configured variances; clamped at zero.

    ``scale`` is the signal level that counts as unit signal. Works on one
    image or a batch (leading axis), drawing independently per image.
    """
    x = np.asarray(image)
    if np.any(x < 0):
        raise ContractError("noise model expects non-negative linear signal")
    batch = x if x.ndim == 4 else x[None]
    u = batch.astype(np.float64) / scale
    noisy = rng.poisson(u * cfg.peak) / cfg.peak
    apply = rng.random(len(batch)) < cfg.probability
    var = np.asarray(cfg.variances)[rng.integers(0, 5, len(batch))]
    sigma = np.where(apply, np.sqrt(var), 0.0).reshape((-1,) + (1,) * (batch.ndim - 1))
    noisy = noisy + sigma * rng.standard_normal(batch.shape)
    out = (np.maximum(noisy, 0.0) * scale).astype(x.dtype, copy=False)
    return out if x.ndim == 4 else out[0]


# ---------------------------------------------------------------------------
# container

_MAGIC = b"VCDSET\x00\x01"
_VERSION = 1
_HEADER = struct.Struct("<8sIQdddIII")


def _record_dtype(n, s, q):
    return np.dtype([
        ("image", "<f4", (n, n, s)),
        ("reflectance", "<f4", (q,)),
        ("spd", "<f4", (q,)),
        ("patch_id", "<f4"),
        ("illum_id", "<f4"),
        ("angle", "<f4"),
    ])


def save_dataset(ds: Dataset, path):
    g = ds.manifest.get("grid", DEFAULT_GRID.to_dict())
    n = ds.images.shape[1] if ds.images.ndim == 4 else ds.manifest.get("n", 10)
    s = ds.images.shape[-1] if ds.images.ndim == 4 else ds.manifest.get("channels", 3)
    q = ds.reflectances.shape[1]
    rec = np.zeros(len(ds), dtype=_record_dtype(n, s, q))
    rec["image"] = ds.images
    rec["reflectance"] = ds.reflectances
    rec["spd"] = ds.spds
    rec["patch_id"] = ds.patch_ids
    rec["illum_id"] = ds.illum_ids
    rec["angle"] = ds.angles
    for name, arr in (("patch_id", ds.patch_ids), ("illum_id", ds.illum_ids), ("angle", ds.angles)):
        if not np.array_equal(rec[name].astype(arr.dtype), arr):
            raise ContractError(f"{name} values are not exactly representable in float32")
    man = json.dumps(ds.manifest, sort_keys=True).encode()
    body = b"".join([
        _HEADER.pack(_MAGIC, _VERSION, len(ds), g["start"], g["end"], g["step"], n, s, q),
        struct.pack("<Q", len(man)),
        man,
        rec.tobytes(),
    ])
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", crc64(body)))
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 16:
        raise ChecksumError(f"{path}: file too short")
    magic, version, count, g0, g1, gs, n, s, q = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise VersionError(f"{path}: not a dataset file")
    if version != _VERSION:
        raise VersionError(f"{path}: dataset version {version}, expected {_VERSION}")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if crc64(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = _HEADER.size
    (mlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    manifest = json.loads(raw[off:off + mlen])
    off += mlen
    dt = _record_dtype(n, s, q)
    if len(body) - off != count * dt.itemsize:
        raise ChecksumError(f"{path}: record block size mismatch")
    rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
    return Dataset(
        rec["image"].copy(),
        rec["reflectance"].copy(),
        rec["spd"].copy(),
        rec["patch_id"].astype(np.int64),
        rec["illum_id"].astype(np.int64),
        rec["angle"].astype(np.float64),
        manifest,
    )
