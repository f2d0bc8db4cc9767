"""Command-line front end: ``capserrin {verify-cap,convergence,shapeopt,eig}``.

Exit codes: 0 all checks pass, 1 a check failed, 2 invalid input.  Reports
are deterministic JSON (sorted keys, no timestamps) and echo the run
configuration and package version.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--theta", type=float, default=math.pi / 2,
                        help="polar angle of the cap direction a (default pi/2)")
    common.add_argument("--c", type=float, default=0.25, help="cap constant c, radius 2c (default 0.25)")
    common.add_argument("--domain", type=str, default=None,
                        help="domain JSON file; overrides --theta/--c")
    common.add_argument("--half-disk", action="store_true", help="use the half disk B2+")
    common.add_argument("--h", type=float, default=0.02, help="target mesh size (default 0.02)")
    common.add_argument("--tol", type=float, default=None, help="command-specific tolerance")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks (default 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")

    p = argparse.ArgumentParser(prog="capserrin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"capserrin {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("verify-cap", parents=[common], help="identity battery on an exact cap")
    conv = sub.add_parser("convergence", parents=[common], help="refinement study with EOC")
    conv.add_argument("--h-list", type=str, default="0.08,0.04,0.02",
                      help="comma-separated mesh sizes, at least three")
    so = sub.add_parser("shapeopt", parents=[common], help="volume-preserving shape flow")
    so.add_argument("--max-iter", type=int, default=60)
    so.add_argument("--perturb", type=float, default=0.1,
                    help="relative radial perturbation of the start cap (default 0.1)")
    so.add_argument("--mode", type=int, default=2, help="perturbation mode (default 2)")
    so.add_argument("--vtk-every", action="store_true", help="write a VTK snapshot per iteration")
    sub.add_parser("eig", parents=[common], help="first Robin and Steklov eigenvalues")
    return p


def _config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())}
    return cfg


def _domain(args, spacing: float | None = None):
    from .geometry import CapSpec, DomainSpec, GeometryError, make_cap_domain, make_half_disk

    h = args.h
    try:
        if args.domain:
            return DomainSpec.load(args.domain), None
        if args.half_disk:
            return make_half_disk(spacing or h / 2), None
        spec = CapSpec(args.theta, args.c)
        spec.validate()
        return make_cap_domain(spec, spacing or min(h / 2, spec.radius / 8)), spec
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc


def _emit(report: dict, args, name: str = "report.json") -> None:
    from .torsion import _finite

    text = json.dumps(_finite(report), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    sys.stdout.write(text)


def _header(args) -> dict:
    return {"command": args.command, "version": __version__, "config": _config(args)}


# -- commands -------------------------------------------------------------------


def cmd_verify_cap(args) -> int:
    import numpy as np

    from .eigen import lambda1, mu1
    from .fem import error_norms, integrate
    from .oracle import ExactCapSolution, cap_torsion_reference, monte_carlo_lens
    from .torsion import certify, pohozaev_residual, serrin_defect, solve_torsion, tau_by_energy, tau_by_volume
    from .mesh import mesh_quality

    if args.domain or args.half_disk:
        raise UsageError("verify-cap needs a cap given by --theta and --c")
    d, spec = _domain(args)
    sol = solve_torsion(d, args.h)
    exact = ExactCapSolution.from_spec(spec)
    ref = cap_torsion_reference(spec)
    tv, te = tau_by_volume(sol.u), tau_by_energy(sol.u, sol.system)
    l2, h1 = error_norms(sol.u, exact.value, exact.gradient)
    sd = serrin_defect(sol.u)
    ph = pohozaev_residual(sol.u, spec.c)
    x2_scale = spec.c**2 * integrate(np.ones(sol.mesh.n_vertices), sol.mesh, weight="x2")
    cert = certify(sol, d)
    lam, mu = lambda1(sol.system), mu1(sol.system)
    mc, mc_err = monte_carlo_lens(spec, lambda x: -exact.value(x), 200_000, seed=args.seed)

    tol = args.tol if args.tol is not None else 0.05
    checks = {
        "oracle_tau": {"value": abs(tv - ref.tau_by_volume) / ref.tau_by_volume, "threshold": 0.01},
        "energy_identity": {"value": abs(tv - te) / abs(tv), "threshold": 1e-9},
        "pohozaev": {"value": abs(ph) / x2_scale, "threshold": 0.01},
        "serrin_defect": {"value": max(sd.c_rel, abs(sd.c_mean / spec.c - 1.0)), "threshold": tol},
        "rigidity_certificate": {"value": 0.0 if cert.verdict == "CAP_CONSISTENT" else 1.0, "threshold": 0.0},
        "lambda1_margin": {"value": -lam.value, "threshold": 0.0, "strict": True},
        "mu1_margin": {"value": 1.0 - mu.value, "threshold": 0.0, "strict": True},
        "oracle_monte_carlo": {"value": abs(mc - ref.tau_by_volume) / mc_err, "threshold": 5.0},
    }
    failures = [k for k, c in checks.items()
                if not (c["value"] < c["threshold"] if c.get("strict") else c["value"] <= c["threshold"])]
    report = _header(args) | {
        "status": "pass" if not failures else "fail",
        "failures": failures,
        "checks": checks,
        "tau_h": tv,
        "tau_ref": ref.tau_by_volume,
        "l2_error": l2,
        "h1_error": h1,
        "serrin": {"c_mean": sd.c_mean, "c_std": sd.c_std, "c_rel": sd.c_rel},
        "pohozaev_residual": ph,
        "lambda1": lam.value,
        "mu1": mu.value,
        "certificate": cert.to_json(),
        "mesh": mesh_quality(sol.mesh).as_dict(),
    }
    if failures and "serrin_defect" in failures:
        report["hint"] = "refine the mesh (smaller --h)"
    _emit(report, args)
    return EXIT_OK if not failures else EXIT_FAIL


def _orders(hs, errs):
    out = []
    for k in range(1, len(hs)):
        e0, e1 = errs[k - 1], errs[k]
        if e0 > 0 and e1 > 0 and math.isfinite(e0) and math.isfinite(e1):
            out.append(math.log(e0 / e1) / math.log(hs[k - 1] / hs[k]))
        else:
            out.append(math.nan)
    return out


def richardson(hs, values) -> tuple[float, float]:
    """Extrapolated limit from the three finest levels and the order used."""
    (h0, h1, h2), (v0, v1, v2) = hs[-3:], values[-3:]
    p = 2.0
    d1, d2 = v1 - v0, v2 - v1
    if d1 != 0 and d2 != 0 and d1 * d2 > 0 and abs(h0 / h1 - h1 / h2) < 1e-9:
        p = math.log(d1 / d2) / math.log(h0 / h1)
    ratio = h1 / h2
    return v2 + (v2 - v1) / (ratio**p - 1.0), p


def cmd_convergence(args) -> int:
    import csv

    from .eigen import lambda1, mu1
    from .fem import error_norms
    from .mesh import mesh_quality
    from .oracle import ExactCapSolution, cap_torsion_reference
    from .torsion import pohozaev_residual, serrin_defect, solve_torsion, tau_by_volume

    try:
        hs = [float(x) for x in args.h_list.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --h-list: {exc}") from exc
    if len(hs) < 3:
        raise UsageError("convergence needs at least three values in --h-list")
    if sorted(hs, reverse=True) != hs or len(set(hs)) != len(hs):
        raise UsageError("--h-list must be strictly decreasing")
    d, spec = _domain(args, spacing=min(hs) / 2)
    exact = ExactCapSolution.from_spec(spec) if spec else None
    ref = cap_torsion_reference(spec).tau_by_volume if spec else math.nan
    rows = []
    for h in hs:
        sol = solve_torsion(d, h)
        tau = tau_by_volume(sol.u)
        if exact:
            l2, h1 = error_norms(sol.u, exact.value, exact.gradient)
            c = spec.c
        else:
            l2 = h1 = math.nan
            c = serrin_defect(sol.u).c_mean
        rows.append({
            "h": h,
            "n_vertices": sol.mesh.n_vertices,
            "L2_err": l2,
            "H1_err": h1,
            "tau": tau,
            "tau_err": abs(tau - ref) if exact else math.nan,
            "lambda1": lambda1(sol.system).value,
            "mu1": mu1(sol.system).value,
            "pohozaev": pohozaev_residual(sol.u, c),
            "h_max": mesh_quality(sol.mesh).h_max,
        })
    eoc = {k: _orders(hs, [r[k] for r in rows]) for k in ("L2_err", "H1_err", "tau_err")}
    taus = [r["tau"] for r in rows]
    tau_rich, p = richardson(hs, taus)
    # Growth faster than linear in 1/h means no finite limit (e.g. the half disk).
    diverging = all(t1 / t0 > hs[k] / hs[k + 1] for k, (t0, t1) in enumerate(zip(taus, taus[1:])))
    if diverging:
        tau_rich = math.inf
    report = _header(args) | {
        "tau_diverging": diverging,
        "rows": rows,
        "eoc": eoc,
        "tau_richardson": tau_rich,
        "richardson_order": p,
        "tau_ref": ref,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: f"{v:.12g}" if isinstance(v, float) else v for k, v in r.items()})
    _emit(report, args)
    return EXIT_OK


def cmd_shapeopt(args) -> int:
    from .geometry import CapSpec, DomainSpec, GeometryError, perturbed_cap_domain
    from .shapeopt import ShapeOptError, ShapeOptions, optimize
    from .torsion import write_fields_vtk, solve_torsion

    try:
        if args.domain:
            d0 = DomainSpec.load(args.domain)
        elif args.half_disk:
            d0, _ = _domain(args)
        else:
            spec = CapSpec(args.theta, args.c)
            spec.validate()
            d0 = perturbed_cap_domain(spec, args.perturb, args.mode, args.h / 2)
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc
    if args.max_iter < 0:
        raise UsageError("--max-iter must be non-negative")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    opts = ShapeOptions(
        h=args.h,
        tol=args.tol if args.tol is not None else 0.02,
        max_iter=args.max_iter,
        trajectory_path=str(out / "trajectory.jsonl") if out else None,
        vtk_dir=str(out) if out and args.vtk_every else None,
    )
    try:
        state = optimize(d0, opts)
        error = None
    except ShapeOptError as exc:
        state, error = exc.state, str(exc)
    report = _header(args) | {
        "status": state.status,
        "iterations": state.iteration,
        "remeshes": state.remeshes,
        "history": state.history,
        "error": error,
    }
    ok = False
    if error is None:
        cert = state.certificate
        report["certificate"] = cert.to_json()
        report["equivalent_cap_radius"] = state.equivalent_cap_radius
        ok = state.status == "converged" and cert.verdict == "CAP_CONSISTENT"
        if state.status != "converged":
            report["message"] = "not converged"
    if out:
        state.domain.save(out / "final_domain.json")
        sol = solve_torsion(state.domain, args.h)
        write_fields_vtk(sol, out / f"field_{state.iteration:03d}.vtk", "final shape")
    _emit(report, args)
    if not ok and error is None and state.status != "converged":
        print("not converged", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eig(args) -> int:
    from .eigen import lambda1, mu1
    from .fem import SolverError, assemble
    from .mesh import mesh_quality, triangulate

    d, _ = _domain(args)
    try:
        m = triangulate(d, args.h)
        sys_ = assemble(m)
        lam, mu = lambda1(sys_), mu1(sys_)
    except SolverError as exc:
        raise UsageError(str(exc)) from exc
    report = _header(args) | {
        "lambda1": lam.value,
        "mu1": mu.value,
        "margins": {"lambda1": lam.value, "mu1": mu.value - 1.0},
        "converged": lam.converged and mu.converged,
        "iterations": {"lambda1": lam.iterations, "mu1": mu.iterations},
        "mesh": mesh_quality(m).as_dict(),
    }
    _emit(report, args)
    return EXIT_OK if report["converged"] else EXIT_FAIL


COMMANDS = {
    "verify-cap": cmd_verify_cap,
    "convergence": cmd_convergence,
    "shapeopt": cmd_shapeopt,
    "eig": cmd_eig,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    if not (args.h > 0 and math.isfinite(args.h)):
        print("error: --h must be positive", file=sys.stderr)
        return EXIT_USAGE
    from .geometry import GeometryError
    from .mesh import MeshError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, GeometryError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
