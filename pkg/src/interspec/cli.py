"""Command-line entry point: ``interspec <subcommand> ...``.

Options can also come from a JSON file given with ``--config`` (keys mirror
the long flag names, with dashes or underscores); flags on the command line
win. A manifest written by an earlier run is accepted as a config file, which
is how a run is reproduced. Exit codes: 0 success, 2 configuration or contract
errors, 3 ingestion/file errors, 4 numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, IngestionError, NumericError

log = logging.getLogger("interspec")

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_ILLUMINANTS = "planck:4000:15000:500"


# ---------------------------------------------------------------------------
# shared helpers


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _resolve_patches(spec, grid=None):
    """``all``, ``a:b`` (index slice), comma-separated indices or Munsell
    notations, or a spectral CSV with one patch per column. Returns
    (spectra, ids)."""
    from .spectra import DEFAULT_GRID, load_munsell_matrix, munsell_notations

    grid = grid or DEFAULT_GRID
    spec = str(spec)
    if Path(spec).is_file():
        R = load_munsell_matrix(spec, grid)
        return R, np.arange(len(R))
    M = load_munsell_matrix(grid=grid)
    if spec == "all":
        ids = np.arange(len(M))
    elif ":" in spec and "/" not in spec:
        lo, hi = spec.split(":", 1)
        ids = np.arange(len(M))[slice(int(lo) if lo else None, int(hi) if hi else None)]
    else:
        names = munsell_notations()
        ids = []
        for part in spec.split(","):
            part = part.strip()
            if part.lstrip("-").isdigit():
                ids.append(int(part))
            elif part in names:
                ids.append(names.index(part))
            else:
                raise ConfigError(f"unknown patch {part!r}")
        ids = np.asarray(ids)
    if len(ids) == 0 or ids.min() < 0 or ids.max() >= len(M):
        raise ConfigError(f"patch selection {spec!r} is empty or out of range")
    return M[ids], ids


def _write_manifest(path, command, args, outputs):
    from .geometry import cache_dir

    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "log_level")}
    manifest = {
        "command": command,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cache_dir": str(cache_dir()),
        "config": cfg,
        "outputs": [str(o) for o in outputs],
    }
    Path(path).write_text(json.dumps(manifest, indent=2, default=str))


def _sidecar(path):
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_kernel(args):
    from .geometry import cached_kernel, eigendecompose, save_kernel

    K = cached_kernel(args.angle, args.n, args.samples, args.seed, workers=args.workers)
    rho = eigendecompose(K.matrix).spectral_radius
    print(f"kernel angle={args.angle:g} n={args.n} samples={args.samples} seed={args.seed}")
    print(f"max row sum {K.matrix.sum(axis=1).max():.6f}  spectral radius {rho:.6f}  raw asymmetry {K.raw_asymmetry:.3e}")
    if args.output:
        _ensure_parent(args.output)
        save_kernel(args.output, K)
        _write_manifest(_sidecar(args.output), "kernel", args, [args.output])
    return EXIT_OK


def cmd_render(args):
    from .dataset import unit_signal
    from .geometry import build_v_cavity, cached_kernel, eigendecompose
    from .imageio import write_facet_csv, write_png16
    from .render import render_panel_image
    from .spectra import load_camera, load_illuminant

    cam = load_camera(args.camera)
    R, _ = _resolve_patches(args.reflectance, cam.grid)
    if len(R) != 1:
        raise ConfigError("render takes exactly one reflectance")
    illum = load_illuminant(args.illuminant, cam.grid)
    eig = eigendecompose(cached_kernel(args.angle, args.n, args.samples))
    img = render_panel_image(build_v_cavity(args.angle, 1.0, args.n), eig, R[0], illum, cam)
    out = Path(args.output)
    _ensure_parent(out)
    outputs = [out]
    write_png16(out, img, args.tone / unit_signal(cam))
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    write_facet_csv(csv_path, img)
    outputs.append(csv_path)
    _write_manifest(_sidecar(out), "render", args, outputs)
    print(f"wrote {out} and {csv_path}")
    return EXIT_OK


def cmd_dataset_gen(args):
    from .dataset import GenerationConfig, attach_normalizer, generate_dataset, save_dataset, split_by_patch
    from .spectra import load_camera, parse_illuminant_list

    cam = load_camera(args.camera)
    R, ids = _resolve_patches(args.patches, cam.grid)
    ils = parse_illuminant_list(args.illuminants, cam.grid)
    gen = GenerationConfig(n=args.n, samples_per_pair=args.samples, kernel_seed=args.kernel_seed, seed=args.seed)
    ds = generate_dataset(R, ils, _floats(args.angle), cam, gen, patch_ids=ids)
    if args.split and len(np.unique(ds.patch_ids)) >= 2:
        tr, _ = split_by_patch(ds, args.split, args.seed)
        attach_normalizer(ds, tr)
    _ensure_parent(args.output)
    save_dataset(ds, args.output)
    _write_manifest(_sidecar(args.output), "dataset gen", args, [args.output])
    print(f"wrote {len(ds)} samples to {args.output}")
    return EXIT_OK


def cmd_dataset_info(args):
    from .dataset import load_dataset

    ds = load_dataset(args.dataset)
    m = dict(ds.manifest)
    if "split" in m:
        m["split"] = {k: (len(v) if isinstance(v, list) else v) for k, v in m["split"].items()}
    m.pop("patch_ids", None)
    print(json.dumps({"samples": len(ds), **m}, indent=2))
    return EXIT_OK


def _net_config(args, ds):
    from .net.model import NetworkConfig

    return NetworkConfig(
        input_size=ds.images.shape[1], in_channels=ds.images.shape[3],
        c1=args.c1, c2=args.c2, c3=args.c3, hidden=args.hidden,
        outputs=ds.reflectances.shape[1], pool=args.pool, spd_branch=not args.no_spd_branch,
    )


def _train_config(args):
    from .dataset import NoiseConfig
    from .net.losses import LossWeights
    from .net.train import TrainConfig

    return TrainConfig(
        lr0=args.lr0, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
        momentum=args.momentum, repeats=args.repeats, augment=not args.no_augment,
        weights=LossWeights(args.w_reflectance, args.w_spd, args.w_consistency),
        noise=NoiseConfig(peak=args.noise_peak, probability=args.noise_probability),
        dtype=args.dtype, eval_every=args.eval_every, checkpoint_every=args.checkpoint_every,
    )


def _splits(ds):
    if "split" in ds.manifest:
        return ds.split("train"), ds.split("test")
    return ds, None


def cmd_train(args):
    from .dataset import load_dataset
    from .net.train import load_checkpoint, train

    ds = load_dataset(args.dataset)
    tr, te = _splits(ds)
    net = _net_config(args, ds)
    cfg = _train_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    _ensure_parent(args.output)
    log_path = args.log or str(Path(args.output).with_suffix(".log.csv"))

    def progress(row):
        extra = f" test rmse {row['test_rmse']:.4f}" if "test_rmse" in row else ""
        print(f"epoch {row['epoch']:3d} lr {row['lr']:.1e} L_R {row['L_R']:.5f} L_E {row['L_E']:.5f} L_S {row['L_S']:.5f}{extra}", flush=True)

    ckpt = train(tr, net, cfg, test_set=te, resume=resume, log_path=log_path, checkpoint_path=args.output, progress=progress)
    _write_manifest(_sidecar(args.output), "train", args, [args.output, log_path])
    print(f"checkpoint {args.output} ({ckpt.digest()[:16]})")
    return EXIT_OK


def cmd_eval(args):
    from .dataset import NoiseConfig, load_dataset
    from .experiments import check_compatible, write_eval_bundle
    from .net.train import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    check_compatible(ckpt, ds)
    subset = ds if args.split == "all" else ds.split(args.split)
    if len(subset) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    noise = NoiseConfig(peak=args.noise_peak, probability=args.noise_probability) if args.noise else None
    rep = evaluate(ckpt, subset, noise=noise, seed=args.seed)
    out = Path(args.output)
    write_eval_bundle(ckpt, subset, rep, out)
    _write_manifest(out / "manifest.json", "eval", args,
                    ["eval_samples.csv", "eval_summary.csv", "eval_summary.json", "eval_spectra.csv"])
    s = rep.summary
    print(f"{s['count']} samples  RMSE avg {s['rmse_avg']:.4f} max {s['rmse_max']:.4f} 95th {s['rmse_p95']:.4f}  "
          f"PD avg {s['pd_avg']:.4f}  DE00 avg {s['de00_avg']:.4f}"
          + (f"  SPD RMSE avg {s['spd_rmse_avg']:.4f}" if "spd_rmse_avg" in s else ""))
    return EXIT_OK


def cmd_estimate(args):
    from .geometry import cached_kernel, eigendecompose
    from .imageio import read_facet_csv
    from .inverse import SolverConfig, build_basis, estimate_reflectance
    from .spectra import load_camera, load_illuminant, load_munsell_matrix, write_spectral_csv

    cam = load_camera(args.camera)
    img = read_facet_csv(args.image)
    illum = load_illuminant(args.illuminant, cam.grid)
    basis = build_basis(load_munsell_matrix(args.basis, cam.grid), args.k)
    eig = eigendecompose(cached_kernel(args.angle, img.shape[0], args.samples))
    cfg = SolverConfig(k=args.k, max_iter=args.max_iter, starts=args.starts, seed=args.seed)
    res = estimate_reflectance(img, eig, illum, cam, basis, cfg)
    _ensure_parent(args.output)
    write_spectral_csv(args.output, cam.grid.wavelengths, res.reflectance.values)
    diag = Path(args.output).with_suffix(".json")
    diag.write_text(json.dumps({
        "converged": res.converged, "iterations": res.iterations, "jacobian_rank": res.jacobian_rank,
        "ambiguous": res.ambiguous, "message": res.message, "objective_trace": res.objective_trace,
    }, indent=2))
    _write_manifest(_sidecar(args.output), "estimate", args, [args.output, diag])
    print(f"{'converged' if res.converged else 'iteration cap reached'} after {res.iterations} iterations; "
          f"final objective {res.objective_trace[-1]:.3e}")
    if res.ambiguous:
        print(f"warning: {res.message}", file=sys.stderr)
    return EXIT_OK


def cmd_angle_study(args):
    from .dataset import GenerationConfig
    from .experiments import AngleRow, angle_study
    from .spectra import load_camera, parse_illuminant_list

    cam = load_camera(args.camera)
    R, _ = _resolve_patches(args.patches, cam.grid)
    ils = parse_illuminant_list(args.illuminants, cam.grid)
    rows = [AngleRow.parse(r) for r in args.row] if args.row else [AngleRow((a,), a) for a in _floats(args.angles)]
    from .net.model import NetworkConfig

    net = NetworkConfig(c1=args.c1, c2=args.c2, c3=args.c3, hidden=args.hidden, pool=args.pool,
                        spd_branch=not args.no_spd_branch, in_channels=cam.channels, outputs=cam.grid.count,
                        input_size=args.n)
    gen = GenerationConfig(n=args.n, samples_per_pair=args.samples)
    table = angle_study(rows, R, ils, cam, net, _train_config(args), args.output, gen, args.split, args.seed)
    _write_manifest(Path(args.output) / "manifest.json", "angle-study", args, ["angle_study.csv"])
    print("train\ttest\tRMSE\tPD\tDE00\tSPD RMSE")
    for t in table:
        spd = f"{t['spd_rmse_avg']:.4f}" if t["spd_rmse_avg"] != "" else "-"
        print(f"{t['train_angles']}\t{t['test_angle']}\t{t['rmse_avg']:.4f}\t{t['pd_avg']:.4f}\t{t['de00_avg']:.4f}\t{spd}")
    return EXIT_OK


def cmd_metamer(args):
    from .dataset import unit_signal
    from .experiments import metamer_demo, write_metamer_outputs
    from .spectra import load_camera, load_illuminant

    cam = load_camera(args.camera)
    R, _ = _resolve_patches(args.patch, cam.grid)
    if len(R) != 1:
        raise ConfigError("metamer takes exactly one patch")
    demo = metamer_demo(R[0], load_illuminant(args.illuminant, cam.grid), cam, args.angle, args.n)
    written = write_metamer_outputs(demo, args.output, args.tone / unit_signal(cam))
    _write_manifest(Path(args.output) / "manifest.json", "metamer", args, written)
    print(f"flat max relative difference {demo.flat_max_rel_diff:.3e}; "
          f"folded max relative difference {demo.folded_max_rel_diff:.3e}")
    return EXIT_OK


def cmd_report(args):
    from .report import build_report

    res = build_report(args.run_dir, args.output)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(res.files)} files to {Path(args.output) if args.output else Path(args.run_dir) / 'report'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_net_flags(p):
    g = p.add_argument_group("network")
    g.add_argument("--c1", type=int, default=32)
    g.add_argument("--c2", type=int, default=32)
    g.add_argument("--c3", type=int, default=128)
    g.add_argument("--hidden", type=int, default=200)
    g.add_argument("--pool", choices=["max", "avg"], default="max")
    g.add_argument("--no-spd-branch", action="store_true", help="single-illuminant mode (fixed light in the consistency term)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=60)
    g.add_argument("--lr0", type=float, default=1e-4)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--batch-size", type=int, default=50)
    g.add_argument("--repeats", type=int, default=1, help="passes over the training split per epoch")
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--w-reflectance", type=float, default=1.0)
    g.add_argument("--w-spd", type=float, default=1.0)
    g.add_argument("--w-consistency", type=float, default=1.0)
    g.add_argument("--noise-peak", type=float, default=1e4)
    g.add_argument("--noise-probability", type=float, default=0.5)
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    g.add_argument("--eval-every", type=int, default=0)
    g.add_argument("--checkpoint-every", type=int, default=0)


def build_parser():
    top = argparse.ArgumentParser(prog="interspec", description="Spectral estimation from V-cavity interreflections.")
    top.add_argument("--version", action="version", version=f"interspec {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults (or a previous run manifest)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log-level", default="WARNING")
    sub = top.add_subparsers(dest="command", required=True)
    leaves = {}

    p = sub.add_parser("kernel", parents=[common], help="precompute and cache a geometric kernel")
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_kernel)
    leaves["kernel"] = p

    p = sub.add_parser("render", parents=[common], help="render one panel image")
    p.add_argument("--reflectance", required=True, help="Munsell index or notation, or a spectral CSV")
    p.add_argument("--illuminant", default="d65")
    p.add_argument("--camera", default="xyz")
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--tone", type=float, default=1.0, help="PNG white level as a multiple of the unit signal")
    p.add_argument("--csv", help="facet CSV path (default: next to the PNG)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_render)
    leaves["render"] = p

    p = sub.add_parser("dataset", help="dataset generation and inspection")
    dsub = p.add_subparsers(dest="action", required=True)
    q = dsub.add_parser("gen", parents=[common])
    q.add_argument("--patches", default="all")
    q.add_argument("--illuminants", default=DEFAULT_ILLUMINANTS)
    q.add_argument("--angle", default="45", help="one angle or a comma-separated list")
    q.add_argument("--camera", default="xyz")
    q.add_argument("--n", type=int, default=10)
    q.add_argument("--samples", type=int, default=256)
    q.add_argument("--kernel-seed", type=int, default=0)
    q.add_argument("--split", type=float, default=0.9, help="train fraction (0 disables the split)")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_dataset_gen)
    leaves["dataset gen"] = q
    q = dsub.add_parser("info", parents=[common])
    q.add_argument("dataset")
    q.set_defaults(func=cmd_dataset_info)
    leaves["dataset info"] = q

    p = sub.add_parser("train", parents=[common], help="train the network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("-o", "--output", required=True)
    _add_net_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)
    leaves["train"] = p

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--noise", action="store_true", help="evaluate on noisy images")
    p.add_argument("--noise-peak", type=float, default=1e4)
    p.add_argument("--noise-probability", type=float, default=0.5)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)
    leaves["eval"] = p

    p = sub.add_parser("estimate", parents=[common], help="least-squares baseline on one facet CSV")
    p.add_argument("--image", required=True)
    p.add_argument("--illuminant", default="d65")
    p.add_argument("--camera", default="xyz")
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--basis", help="spectral CSV for the PCA basis (default: bundled Munsell set)")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--starts", type=int, default=12)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_estimate)
    leaves["estimate"] = p

    p = sub.add_parser("angle-study", parents=[common], help="train and test across fold angles")
    p.add_argument("--angles", default="30,45,60,90,120,150", help="rows trained and tested at the same angle")
    p.add_argument("--row", action="append", help="TRAIN[+TRAIN...]:TEST, repeatable; overrides --angles")
    p.add_argument("--patches", default="all")
    p.add_argument("--illuminants", default=DEFAULT_ILLUMINANTS)
    p.add_argument("--camera", default="xyz")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_net_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_angle_study)
    leaves["angle-study"] = p

    p = sub.add_parser("metamer", parents=[common], help="flat vs folded metamer demonstration")
    p.add_argument("--patch", default="5YR 4/4")
    p.add_argument("--illuminant", default="e")
    p.add_argument("--camera", default="xyz")
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--tone", type=float, default=1.0)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_metamer)
    leaves["metamer"] = p

    p = sub.add_parser("report", parents=[common], help="collate run artifacts into tables")
    p.add_argument("run_dir")
    p.add_argument("-o", "--output", help="report directory (default RUN_DIR/report)")
    p.set_defaults(func=cmd_report)
    leaves["report"] = p
    # required flags may come from a config file, so they are checked after merging
    for leaf in leaves.values():
        leaf.deferred_required = [a for a in leaf._actions if a.required]
        for a in leaf.deferred_required:
            a.required = False
    return top, leaves


def _load_config(path, leaf):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {a.dest for a in leaf._actions}
    out = {}
    for k, v in data.items():
        dest = k.replace("-", "_")
        if dest in ("command", "action"):
            continue
        if dest not in known:
            raise ConfigError(f"{path}: unknown option {k!r}")
        out[dest] = v
    return out


def parse_args(argv=None):
    top, leaves = build_parser()
    args = top.parse_args(argv)
    leaf = leaves[args.command + (f" {args.action}" if getattr(args, "action", None) else "")]
    if getattr(args, "config", None):
        leaf.set_defaults(**_load_config(args.config, leaf))
        args = top.parse_args(argv)
    missing = [a.option_strings[-1] if a.option_strings else a.dest
               for a in leaf.deferred_required if getattr(args, a.dest) is None]
    if missing:
        leaf.error("the following arguments are required: " + ", ".join(missing))
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
