"""Command-line front end.

Exit codes: 0 success, 1 validation failure (bad input, unmet threshold),
2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .basis import (
    BandlimitParams,
    PswfConvergenceError,
    build_rotation_grid,
    cached_pswf_basis,
    quaternion_to_matrix,
    rotation_zyz,
)
from .em import EmConfig, MemoryBudgetError, PatchSet, ResumeMismatchError, SingularSystemError, run
from .evaluation import align, coefficient_rotator, fsc, pick
from .forward import (
    CoefficientLayout,
    ConjugateSymmetryError,
    compute_beta_table,
    fit_coefficients,
    project,
    render_volume,
)
from .io import (
    ArtifactMismatchError,
    check_same_hash,
    load_coefficients,
    read_json,
    read_sidecar,
    save_coefficients,
    write_json,
    write_sidecar,
)
from .mrc import MrcError, read_mrc, write_mrc
from .simulate import (
    Micrograph,
    PlacementError,
    SimConfig,
    ExpansionSource,
    VoxelSource,
    add_noise,
    downsample,
    gaussian_blobs,
    patch_ground_truth,
    place_projections,
    pooled_noise_variance,
    shepp_logan_3d,
)

log = logging.getLogger("patchem")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class ThresholdNotMet(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _params(cfg: dict, ell_max: int | None = None) -> BandlimitParams:
    b = cfg["basis"]
    return BandlimitParams(L=b["L"], ell_max=cfgmod.ell_max(cfg) if ell_max is None else ell_max,
                           c=b["c"], alpha_threshold=b["alpha_threshold"], n_quad=b["n_quad"])


def _tables(cfg: dict):
    params = _params(cfg)
    basis = cached_pswf_basis(params, cfg["paths"].get("cache"))
    return params, basis, compute_beta_table(basis)


def _phantom(cfg: dict, size: int) -> np.ndarray:
    name = cfg["simulation"]["phantom"]
    if name == "blobs":
        return gaussian_blobs(size, cfg["simulation"]["phantom_seed"])
    if name == "shepp-logan":
        return shepp_logan_3d(size)
    vol = np.asarray(read_mrc(name), dtype=float)
    if vol.shape != (size,) * 3:
        raise ValueError(f"phantom {name} has shape {vol.shape}, expected {size}^3")
    return vol


def _out_dir(cfg: dict, override) -> Path:
    out = Path(override or cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_micrographs(paths):
    mics, hashes = [], []
    for p in paths:
        side = read_sidecar(p)
        if side is None:
            raise ArtifactMismatchError(f"{p}: missing manifest sidecar {p}.json")
        mic = Micrograph.from_manifest(read_mrc(p).astype(float), side["manifest"])
        if side.get("clean"):
            clean_path = Path(p).with_name(side["clean"])
            if clean_path.exists():
                mic.clean = read_mrc(clean_path).astype(float)
        mics.append(mic)
        hashes.append(side.get("config_hash"))
    return mics, check_same_hash(hashes, "micrographs")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, args) -> int:
    sim = cfg["simulation"]
    h = cfgmod.config_hash(cfg)
    out = _out_dir(cfg, args.out)
    params, basis, beta = _tables(cfg)
    Lb = params.L
    written = []
    if sim["method"] == "expanded-volume":
        Lp = sim["L"] or Lb
        if Lp != Lb:
            raise ValueError("expanded-volume micrographs use the basis projection size")
        layout = CoefficientLayout.from_params(params)
        x_true = fit_coefficients(_phantom(cfg, Lb), params, layout)
        save_coefficients(out / "truth_coeffs.npz", x_true, params, h)
        truth = render_volume(x_true, params)
    else:
        Lp = sim["L"] or Lb
        vol = _phantom(cfg, Lp)
        truth = vol
        if sim["downsample_to"] not in (None, Lb):
            raise ValueError("downsample_to must equal basis.L for reconstruction")
    write_mrc(out / "truth.mrc", truth, label=f"patchem truth {h}")
    write_sidecar(out / "truth.mrc", h, kind="volume", config=cfg)
    configs = [SimConfig(N=sim["N"], gamma=sim["gamma"], snr=sim["snr"], L=Lp, mode=sim["mode"],
                         method=sim["method"], seed=sim["seed"] + i,
                         downsample_to=sim["downsample_to"], on_infeasible=sim["on_infeasible"])
               for i in range(sim["n_micrographs"])]
    source = ExpansionSource(x_true, basis, beta) if sim["method"] == "expanded-volume" else VoxelSource(vol)
    # every micrograph shares the noise level set by the pooled projection energy
    placed = [place_projections(source, sc) for sc in configs]
    sigma2 = pooled_noise_variance(placed, sim["snr"])
    for i, (sc, mic) in enumerate(zip(configs, placed)):
        mic = add_noise(mic, sc.snr, sigma2=sigma2)
        if sc.downsample_to is not None:
            mic = downsample(mic, sc.downsample_to)
        path = out / f"micrograph_{i:03d}.mrc"
        write_mrc(path, mic.pixels, label=f"patchem micrograph {h}")
        clean_path = out / f"micrograph_{i:03d}_clean.mrc"
        write_mrc(clean_path, mic.clean, label=f"patchem noiseless micrograph {h}")
        write_sidecar(path, h, kind="micrograph", manifest=mic.manifest(), config=cfg,
                      clean=clean_path.name)
        written.append(str(path))
        log.info("micrograph %d: T=%d occupancy=%.3f sigma2=%.4g", i, mic.T, mic.occupancy(), mic.sigma2)
    print(json.dumps({"micrographs": written, "config_hash": h}))
    return EXIT_OK


def cmd_reconstruct(cfg: dict, args) -> int:
    mics, mic_hash = _load_micrographs(args.micrographs)
    h = cfgmod.config_hash(cfg)
    if mic_hash and mic_hash != h and not args.allow_foreign:
        raise ArtifactMismatchError(
            f"micrographs carry config hash {mic_hash} but this run is {h}; "
            "pass --allow-foreign to reconstruct them under a different configuration")
    params, basis, beta = _tables(cfg)
    em = cfg["em"]
    patches = PatchSet.from_micrographs(mics, params.L, em["patch_policy"])
    grid = build_rotation_grid(em["K"], em["grid_seed"], params.ell_max)
    ec = EmConfig(schedule=tuple(tuple(s) for s in em["schedule"]), S=em["S"], eps=em["eps"],
                  seed=em["seed"], init_seed=em["init_seed"], stop_mode=em["stop_mode"],
                  stop_statistic=em["stop_statistic"], threads=args.threads, chunk=em["chunk"],
                  assembly=em["assembly"], memory_budget=em["memory_budget"])
    out = _out_dir(cfg, args.out)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    logf = open(out / "progress.jsonl", "a")

    def progress(rec):
        logf.write(json.dumps({**rec, "time": time.time()}) + "\n")
        logf.flush()
        print(f"k={rec['k']} ell_max={rec['ell_max']} Q={rec['Q']:.6f} "
              f"loglik={rec['loglik']:.6f} wall={rec.get('wall', 0):.2f}s", file=sys.stderr)

    try:
        res = run(patches, ec, basis, beta, grid, checkpoint_dir=ckdir, resume=args.resume, progress=progress)
    finally:
        logf.close()
    x = res.state.x
    save_coefficients(out / "estimate_coeffs.npz", x, params, h)
    vol = render_volume(x, params)
    write_mrc(out / "estimate.mrc", vol, label=f"patchem estimate {h}")
    write_sidecar(out / "estimate.mrc", h, kind="volume", history=res.history, config=cfg)
    np.save(out / "rho.npy", res.state.rho.rho)
    print(json.dumps({"volume": str(out / "estimate.mrc"), "iterations": len(res.history),
                      "config_hash": h}))
    return EXIT_OK


def cmd_pick(cfg: dict, args) -> int:
    mics, mic_hash = _load_micrographs(args.micrographs)
    x, params, xh = load_coefficients(args.coeffs)
    check_same_hash([mic_hash, xh] if not args.allow_foreign else [mic_hash], "micrographs and coefficients")
    full = _params(cfg, x.ell_max)
    basis = cached_pswf_basis(full, cfg["paths"].get("cache"))
    beta = compute_beta_table(basis)
    grid = build_rotation_grid(cfg["em"]["K"], cfg["em"]["grid_seed"], x.ell_max)
    pc = cfg["pick"]
    reports = []
    for i, mic in enumerate(mics):
        ps = PatchSet.from_micrographs([mic], full.L)
        truth = patch_ground_truth(mic, full.L) if mic.L_proj == full.L and mic.clean is not None else None
        rep = pick(ps, x, grid, basis, beta, truth=truth, empty_threshold=pc["empty_threshold"],
                   empty_energy_fraction=pc["empty_energy_fraction"], threads=args.threads)
        reports.append(rep)
        if rep.degenerate:
            warnings.warn("coefficients are zero: picking degenerates to the prior argmax")
    scored = [r for r in reports if np.isfinite(r.f1_empty)]
    f1 = float(np.mean([r.f1_empty for r in scored])) if scored else None
    acc = float(np.nanmean([r.localization_accuracy for r in scored])) if scored else None
    out = _out_dir(cfg, args.out)
    summary = {"f1_empty": f1, "localization_accuracy": acc,
               "baseline_f1": float(np.mean([r.baseline_f1 for r in scored])) if scored else None,
               "chance_accuracy": reports[0].chance_accuracy,
               "config_hash": mic_hash, "reports": [r.as_dict() for r in reports]}
    write_json(out / "pick_report.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "reports"}))
    failed = []
    if (pc["min_f1"] is not None or pc["min_accuracy"] is not None) and not scored:
        raise ValueError("picking thresholds need ground truth (noiseless micrographs were not found)")
    if pc["min_f1"] is not None and not f1 >= pc["min_f1"]:
        failed.append(f"F1 {f1:.3f} < {pc['min_f1']}")
    if pc["min_accuracy"] is not None and not acc >= pc["min_accuracy"]:
        failed.append(f"accuracy {acc:.3f} < {pc['min_accuracy']}")
    if failed:
        raise ThresholdNotMet("; ".join(failed))
    return EXIT_OK


def cmd_evaluate(cfg: dict, args) -> int:
    est = np.asarray(read_mrc(args.estimate), dtype=float)
    truth = np.asarray(read_mrc(args.truth), dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"grid mismatch: {est.shape} vs {truth.shape}")
    hashes = [(read_sidecar(p) or {}).get("config_hash") for p in (args.estimate, args.truth)]
    if not args.allow_foreign:
        check_same_hash(hashes, "volumes")
    ev = cfg["evaluate"]
    info = {}
    if args.align:
        rotate = None
        if args.coeffs:
            x, params, _ = load_coefficients(args.coeffs)
            rotate = coefficient_rotator(x, params)
        al = align(est, truth, ev["n_rotations"], ev["refine_steps"], rotate=rotate)
        est = al.aligned
        info = {"ncc": al.score, "reflected": al.reflected, "shift": list(al.shift),
                "rotation": al.rotation.tolist()}
    else:
        warnings.warn("volumes are compared without alignment (pass --align to search rotations)")
    curve = fsc(est, truth)
    out = _out_dir(cfg, args.out)
    curve.to_csv(out / "fsc.csv")
    if args.plot:
        _plot_fsc(curve, out / "fsc.png")
    report = {"resolution_shell": curve.resolution_shell, "nyquist_shell": curve.nyquist_shell,
              "fsc": curve.values.tolist(), "shells": curve.shells.tolist(), "aligned": bool(args.align),
              **info}
    write_json(out / "evaluate_report.json", report)
    print(json.dumps({k: report[k] for k in ("resolution_shell", "nyquist_shell", "aligned")}))
    failed = []
    if ev["min_resolution_shell"] is not None and curve.resolution_shell < ev["min_resolution_shell"]:
        failed.append(f"resolution shell {curve.resolution_shell} < {ev['min_resolution_shell']}")
    if ev["min_fsc_up_to"] is not None:
        radius, level = ev["min_fsc_up_to"]
        if curve.min_up_to(radius) < level:
            failed.append(f"FSC below {level} before shell {radius}")
    if failed:
        raise ThresholdNotMet("; ".join(failed))
    return EXIT_OK


def _plot_fsc(curve, path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        warnings.warn("matplotlib is not installed; skipping the FSC plot")
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(curve.frequency, curve.values, "o-")
    ax.axhline(0.5, color="k", ls="--", lw=0.8)
    ax.set_xlabel("spatial frequency (1/voxel)")
    ax.set_ylabel("FSC")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_render_projection(cfg: dict, args) -> int:
    x, params, h = load_coefficients(args.coeffs)
    full = _params(cfg, x.ell_max) if cfg["basis"]["L"] == params.L else params
    basis = cached_pswf_basis(full, cfg["paths"].get("cache"))
    beta = compute_beta_table(basis)
    if args.quaternion:
        R = quaternion_to_matrix(np.asarray(args.quaternion, dtype=float))
    else:
        R = rotation_zyz(*(args.euler or (0.0, 0.0, 0.0)))
    img = project(x, R, basis, beta).image
    out = Path(args.output)
    write_mrc(out, img, label=f"patchem projection {h}")
    write_sidecar(out, h, kind="projection", rotation=R.tolist())
    print(json.dumps({"projection": str(out)}))
    return EXIT_OK


def cmd_cache_basis(cfg: dict, args) -> int:
    params = _params(cfg)
    t = time.perf_counter()
    basis = cached_pswf_basis(params, cfg["paths"].get("cache"))
    print(json.dumps({"key": params.cache_key(), "count": basis.count,
                      "seconds": round(time.perf_counter() - t, 3)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _global_options(p, prefix=""):
    # subcommands accept the global options too; their values land under a prefix and are merged
    sup = {"default": argparse.SUPPRESS} if prefix else {}
    p.add_argument("--config", dest=prefix + "config", help="JSON experiment configuration",
                   **({"default": None} if not prefix else sup))
    p.add_argument("--set", dest=prefix + "set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a configuration value (repeatable)", **({"default": []} if not prefix else sup))
    p.add_argument("--threads", dest=prefix + "threads", type=int,
                   help="worker threads (results do not depend on it)", **({"default": 1} if not prefix else sup))
    p.add_argument("--log-level", dest=prefix + "log_level", **({"default": "WARNING"} if not prefix else sup))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchem", description="Volume reconstruction directly from micrographs.")
    _global_options(p)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, "sub_")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write micrographs and their manifests")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", parents=[common], help="run EM on micrographs")
    s.add_argument("micrographs", nargs="+")
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--allow-foreign", action="store_true")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("pick", parents=[common], help="most likely shift per patch and picking scores")
    s.add_argument("micrographs", nargs="+")
    s.add_argument("--coeffs", required=True)
    s.add_argument("--out")
    s.add_argument("--allow-foreign", action="store_true")
    s.set_defaults(func=cmd_pick)

    s = sub.add_parser("evaluate", parents=[common], help="FSC between two volumes")
    s.add_argument("estimate")
    s.add_argument("truth")
    s.add_argument("--align", action="store_true")
    s.add_argument("--coeffs", help="estimate coefficients, for exact rotations during alignment")
    s.add_argument("--plot", action="store_true")
    s.add_argument("--out")
    s.add_argument("--allow-foreign", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render-projection", parents=[common], help="synthesize one projection from coefficients")
    s.add_argument("--coeffs", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--quaternion", type=float, nargs=4)
    g.add_argument("--euler", type=float, nargs=3, help="ZYZ Euler angles in radians")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_render_projection)

    s = sub.add_parser("cache-basis", parents=[common], help="precompute and cache the PSWF basis")
    s.set_defaults(func=cmd_cache_basis)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key in ("config", "threads", "log_level"):
        if hasattr(args, "sub_" + key):
            setattr(args, key, getattr(args, "sub_" + key))
    args.set = list(args.set) + list(getattr(args, "sub_set", []))
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = cfgmod.load(args.config, args.set)
        with threadpool_limits(limits=args.threads):
            return args.func(cfg, args)
    except ThresholdNotMet as exc:
        print(f"threshold not met: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (cfgmod.ConfigError, ArtifactMismatchError, ResumeMismatchError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SingularSystemError, PswfConvergenceError, MemoryBudgetError, ConjugateSymmetryError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, MrcError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
