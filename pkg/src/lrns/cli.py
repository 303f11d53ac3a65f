"""Command-line entry point: ``lrns <subcommand> --config run.json``.

Exit codes: 0 success, 1 failed verify checks, 2 invalid configuration or
input files, 3 numerical failure (diverging Neumann series, non-elliptic
samples, failed solves).
"""

from __future__ import annotations

import argparse
import os
import platform
import subprocess
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__, fem, io
from .config import PIPELINES, ConfigError, ExperimentConfig, load, parse
from .control import build_reduced, optimize
from .diffusion import (assemble_cn, build_lrns, lrns_solve, qoi_error, qoi_mse, reference_solve,
                        scan_sigma, scan_tau, setup)
from .linalg import RsvdConfig
from .lowrank import MatrixCollection, compress, compression_report, gram_accumulate
from .parallel import reproducible_blas
from .randfield import write_spectrum_csv
from .verify import run_checks

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_TAUS = [1.0, 0.95, 0.88, 0.5, 0.1]
DEFAULT_SIGMAS = [0.1, 0.2, 0.5]
DEFAULT_TERMS = [0, 1, 2, 3, 5, 10, 15]


class GuardFailure(RuntimeError):
    pass


def _threads(args, cfg: ExperimentConfig) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("LRNS_THREADS")
    if env:
        return max(1, int(env))
    if cfg.threads is not None:
        return cfg.threads
    return os.cpu_count() or 1


def _versions() -> dict:
    out = {"python": platform.python_version(), "lrns": __version__}
    for pkg in ("numpy", "scipy", "threadpoolctl", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _artifact_version() -> str:
    """``<package version>+g<commit>`` when run from a git checkout, else the package version."""
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _trajectory(out: Path, name: str, problem, traj) -> None:
    io.write_trajectory(out / name, traj.times, problem.mesh.nodes, traj.mean)


def _check_guard(report) -> None:
    if report.diverging:
        raise GuardFailure(
            f"Neumann series diverges for {len(report.diverging)} sample(s) "
            f"(first {report.diverging[0]}, rho_max {float(report.rho.max()):.3f})")


# -- pipelines -----------------------------------------------------------------


def run_solve_diffusion(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict) -> int:
    dcfg = cfg.diffusion()
    t0 = time.perf_counter()
    problem = setup(dcfg)
    system = assemble_cn(problem)
    manifest["timings"]["setup"] = time.perf_counter() - t0
    lrns = build_lrns(problem, system, threads=threads)
    io.write_json(out / "solve_report.json", lrns.report.as_dict())
    write_spectrum_csv(out / "kl_spectrum.csv", problem.kl)
    _check_guard(lrns.report)
    traj = lrns_solve(problem, system, lrns, threads)
    manifest["timings"].update(traj.timings)
    _trajectory(out, "trajectory.csv", problem, traj)
    summary = {"solver": "lrns", "rank": lrns.factors.rank, "terms": dcfg.terms, "tau": dcfg.tau,
               "rho_max": float(lrns.report.rho.max()), "samples": problem.count}
    if problem.ellipticity is not None:
        summary["permeability_min"] = problem.ellipticity.minimum
        summary["permeability_max"] = problem.ellipticity.maximum
    if cfg.compare_reference:
        ref = reference_solve(problem, system, threads)
        manifest["timings"].update(ref.timings)
        _trajectory(out, "reference_trajectory.csv", problem, ref)
        summary["error"] = qoi_error(traj, ref, problem.mass, dcfg.dt)
        summary["mse"] = qoi_mse(traj, ref)
        summary["time_ratio"] = traj.timings["lrns_solve"] / ref.timings["reference_solve"]
    # timings stay in the manifest so numeric outputs remain byte-stable
    io.write_json(out / "summary.json", {k: v for k, v in summary.items() if k != "time_ratio"})
    if "time_ratio" in summary:
        manifest["timings"]["lrns_over_reference"] = summary["time_ratio"]
    return EXIT_OK


def run_solve_control(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict) -> int:
    ccfg = cfg.control()
    ops = build_reduced(ccfg, threads)
    manifest["timings"].update(ops.timings)
    io.write_json(out / "solve_report.json", ops.lrns.report.as_dict())
    _check_guard(ops.lrns.report)
    t0 = time.perf_counter()
    trace = optimize(ops, threads=threads)
    manifest["timings"]["optimize"] = time.perf_counter() - t0
    io.write_rows(out / "trace.csv", ["iteration", "objective", "grad_norm", "alpha"],
                  zip(trace.iteration, trace.objective, trace.grad_norm, trace.alpha))
    problem = ops.problem
    times = problem.times
    controls = fem.extend(trace.controls, problem.dofs)
    io.write_trajectory(out / "controls.csv", times[1:], problem.mesh.nodes, controls)
    io.write_trajectory(out / "state_mean.csv", times, problem.mesh.nodes,
                        fem.extend(trace.state_mean, problem.dofs))
    summary = trace.summary()
    summary["hessian_asymmetry"] = ops.asymmetry
    summary["line_search_evaluations"] = trace.line_search_evals
    io.write_json(out / "summary.json", summary)
    return EXIT_OK


def run_compress(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict, config_dir: Path) -> int:
    sec = cfg.section("compress")
    path = Path(sec["collection"])
    if not path.is_absolute():
        path = config_dir / path
    try:
        members, _ = io.read_collection(path)
        coll = MatrixCollection(members)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"compress.collection: {exc}") from None
    tau = sec.get("tau", 1.0)
    rsvd = RsvdConfig(1, sec.get("oversampling"), sec.get("power_iters", 1), cfg.effective_seed())
    t0 = time.perf_counter()
    gram = gram_accumulate(coll)
    factors = compress(coll, tau, rsvd, gram=gram, store="dense")
    manifest["timings"]["compress"] = time.perf_counter() - t0
    report = compression_report(factors, coll, gram)
    eigs = report.eigenvalues
    total = eigs.sum()
    share = np.cumsum(eigs) / total if total > 0 else np.ones_like(eigs)
    io.write_rows(out / "gram_spectrum.csv", ["index", "eigenvalue", "cumulative_share"],
                  zip(range(1, len(eigs) + 1), eigs, share))
    doc = report.as_dict()
    doc.update(members=len(coll), dimension=coll.dimension, relative_rmsre=report.rmsre / coll.scale())
    io.write_json(out / "compression_report.json", doc)
    if sec.get("write_factors", False):
        io.write_matrix(out / "basis.bin", factors.basis)
        io.write_collection(out / "factors", [factors.factor(m) for m in range(len(coll))])
    return EXIT_OK


def run_scan_tau(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict) -> int:
    problem = setup(cfg.diffusion())
    taus = cfg.section("scan").get("taus", DEFAULT_TAUS)
    result = scan_tau(problem, taus, threads)
    manifest["timings"].update(result.timings)
    io.write_dicts(out / "scan_tau.csv", result.rows,
                   ["tau", "k", "k_effective", "error", "mse", "rho_max"])
    return EXIT_OK


def run_scan_sigma(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict) -> int:
    sec = cfg.section("scan")
    result = scan_sigma(cfg.diffusion(), sec.get("sigmas", DEFAULT_SIGMAS), sec.get("terms", DEFAULT_TERMS),
                        threads)
    manifest["timings"].update(result.timings)
    io.write_dicts(out / "scan_sigma.csv", result.rows, ["sigma", "R", "error", "mse", "rho_max"])
    return EXIT_OK


def run_verify(cfg: ExperimentConfig, out: Path, threads: int, manifest: dict) -> int:
    sec = cfg.section("verify")
    try:
        results = run_checks(sec.get("tolerances"), sec.get("only"))
    except KeyError as exc:
        raise ConfigError(f"verify: {exc.args[0]}") from None
    for r in results:
        print(r.line())
    io.write_rows(out / "verify.csv", ["check", "measured", "tolerance", "passed"],
                  ((r.name, r.measured, r.tolerance, r.passed) for r in results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_CHECKS if failed else EXIT_OK


# -- driver ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrns", description="Low-rank Neumann-series solvers for "
                                     "perturbed linear systems and stochastic diffusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "solve-diffusion": "LRNS solve of the random diffusion problem; writes the mean trajectory",
        "solve-control": "optimal control of the random diffusion problem",
        "compress": "shared-basis compression of a matrix collection on disk",
        "scan-tau": "LRNS error against the direct reference over compression ratios",
        "scan-sigma": "LRNS error over perturbation scales and truncation indices",
        "verify": "run the oracle suite",
    }
    for name in PIPELINES:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=name != "verify", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--tau", type=float, help="override the compression ratio")
        p.add_argument("--out", help="output directory (overrides 'output')")
        p.add_argument("--threads", type=int, help="worker threads (default: LRNS_THREADS or all cores)")
        rep = p.add_mutually_exclusive_group()
        rep.add_argument("--reproducible", dest="reproducible", action="store_true", default=None,
                         help="pin BLAS to one thread for bitwise-stable output (default)")
        rep.add_argument("--no-reproducible", dest="reproducible", action="store_false")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be nonnegative")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = args.out
    if args.reproducible is not None:
        cfg.reproducible = args.reproducible
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads: must be >= 1")
    if args.tau is not None:
        if not 0.0 < args.tau <= 1.0:
            raise ConfigError("--tau: must lie in (0, 1]")
        if cfg.pipeline == "scan-tau":
            cfg.sections.setdefault("scan", {})["taus"] = [args.tau]
        else:
            section = {"solve-control": "control", "compress": "compress"}.get(cfg.pipeline, "diffusion")
            cfg.sections.setdefault(section, {})["tau"] = args.tau
    # revalidate the amended document
    return parse({k: v for k, v in cfg.as_dict().items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config_dir = Path.cwd()
    try:
        if args.config:
            cfg = load(args.config)
            config_dir = Path(args.config).resolve().parent
            if cfg.pipeline != args.command:
                raise ConfigError(f"pipeline: config is for {cfg.pipeline!r} but subcommand is {args.command!r}")
        else:
            cfg = parse({"pipeline": args.command})
        cfg = _apply_overrides(cfg, args)
    except (ConfigError, OSError) as exc:
        print(f"lrns: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"lrns: configuration error: output: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    threads = _threads(args, cfg)
    manifest = {
        "pipeline": cfg.pipeline,
        "config_sha256": cfg.digest(),
        "config": cfg.as_dict(),
        "artifact_version": _artifact_version(),
        "versions": _versions(),
        "seeds": {"master": cfg.effective_seed(_SECTION.get(cfg.pipeline)),
                  "per_sample": "SeedSequence(master, spawn_key=(m,)); redraw j uses spawn_key=(m, j)"},
        "threads": threads,
        "reproducible": cfg.reproducible,
        "timings": {},
    }
    runners = {
        "solve-diffusion": run_solve_diffusion,
        "solve-control": run_solve_control,
        "scan-tau": run_scan_tau,
        "scan-sigma": run_scan_sigma,
        "verify": run_verify,
    }
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        with reproducible_blas(cfg.reproducible), warnings.catch_warnings():
            warnings.simplefilter("always")
            if cfg.pipeline == "compress":
                status = run_compress(cfg, out, threads, manifest, config_dir)
            else:
                status = runners[cfg.pipeline](cfg, out, threads, manifest)
    except ConfigError as exc:
        print(f"lrns: configuration error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except (GuardFailure, np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"lrns: numerical failure: {exc}", file=sys.stderr)
        manifest["error"] = str(exc)
        status = EXIT_NUMERIC
    manifest["timings"]["total"] = time.perf_counter() - t0
    manifest["exit_status"] = status
    io.write_json(out / "manifest.json", manifest)
    return status


_SECTION = {"solve-diffusion": "diffusion", "scan-tau": "diffusion", "scan-sigma": "diffusion",
            "solve-control": "control"}


if __name__ == "__main__":
    sys.exit(main())
