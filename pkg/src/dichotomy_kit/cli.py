"""Command line interface: ``dichotomy-kit analyze | certify | generate``.

Exit codes: 0 success, 1 usage or parse error, 2 negative mathematical result
(no dichotomy, certification failed).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .cocycle import INV_COND_MAX, PROJ_TOL, VERIFY_TOL, generate_example, verify_certificate
from .dichotomy import (
    GROWTH_FACTOR,
    INV_NORM_MAX,
    RATE_TOL,
    BlockVector,
    assemble,
    classify_invertibility,
    recover_certificate,
    solve,
)
from .errors import (
    ConfigurationError,
    DomainError,
    PreconditionError,
    RecoveryError,
    ShortWindowError,
    SingularityError,
    UsageError,
)
from .formats import (
    SchemaError,
    cocycle_from_json,
    cocycle_to_json,
    read_json,
    trajectory_from_json,
    trajectory_to_json,
    write_csv,
    write_json,
)
from .nonuniform import (
    TrajectoryData,
    build_adapted_norm,
    certify_trajectory,
    check_adapted_norm,
    epsilon0,
    estimate_CK,
    recover_splitting,
)
from .seqspace import parse_space

EXIT_OK, EXIT_USAGE, EXIT_NEGATIVE = 0, 1, 2
THREADS_ENV = "DICHOTOMY_KIT_THREADS"


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _space(text):
    def loader(path):
        return read_json(path)

    try:
        return parse_space(text, loader)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"--space: {exc}") from exc


def _rows(window, W):
    """Rows of the section on a document window, optionally cut to ``[-W, W]``."""
    lo, hi = window[0] + 1, window[1]
    if W is not None:
        if W < 1:
            raise UsageError("--window must be a positive integer")
        lo, hi = max(lo, -W), min(hi, W)
    if hi - lo < 3:
        raise UsageError(f"window [{lo}, {hi}] too short")
    return (lo, hi)


def _add_tolerances(p):
    g = p.add_argument_group("tolerances")
    g.add_argument("--verify-tol", type=float, default=VERIFY_TOL)
    g.add_argument("--proj-tol", type=float, default=PROJ_TOL)
    g.add_argument("--rate-tol", type=float, default=RATE_TOL)
    g.add_argument("--inv-norm-max", type=float, default=INV_NORM_MAX)
    g.add_argument("--inv-cond-max", type=float, default=INV_COND_MAX)
    g.add_argument("--growth-factor", type=float, default=GROWTH_FACTOR)


def _check_tolerances(args):
    for name in ("verify_tol", "proj_tol", "rate_tol", "inv_norm_max", "inv_cond_max"):
        v = getattr(args, name)
        if not (v > 0 and math.isfinite(v)):
            raise UsageError(f"--{name.replace('_', '-')} must be a positive finite number")
    if not args.growth_factor > 1:
        raise UsageError("--growth-factor must exceed 1")


# --------------------------------------------------------------------------- analyze


def _impulse_profile(c, space, window, inv_cond_max):
    """``max_i |x_n|_n`` of the responses to ``delta_mid e_i``."""
    op = assemble(c, space, window, inv_cond_max=inv_cond_max)
    mid = (op.a + op.b) // 2
    prof = np.zeros(op.unknowns)
    for i in range(c.dim):
        y = BlockVector.impulse(mid, np.eye(c.dim)[i])
        x = solve(op, y)
        L = c.norms.roots(x.offset, x.last)
        prof = np.maximum(prof, np.linalg.norm(np.einsum("nij,nj->ni", L, x.values), axis=1))
    return [(op.first_unknown + k, v) for k, v in enumerate(prof)]


def cmd_analyze(args):
    _check_tolerances(args)
    space = _space(args.space)
    t0 = time.perf_counter()
    c = cocycle_from_json(read_json(args.input), args.input)
    window = _rows((c.n_min, c.n_max), args.window)
    report = {
        "command": "analyze",
        "input": args.input,
        "space": space.to_json(),
        "window": list(window),
        "tolerances": {
            "verify_tol": args.verify_tol,
            "proj_tol": args.proj_tol,
            "rate_tol": args.rate_tol,
            "inv_norm_max": args.inv_norm_max,
            "inv_cond_max": args.inv_cond_max,
            "growth_factor": args.growth_factor,
        },
        "certificate": None,
        "rates": None,
    }
    timings = {}
    cl = classify_invertibility(
        c, space, window, growth_factor=args.growth_factor, inv_norm_max=args.inv_norm_max,
        inv_cond_max=args.inv_cond_max,
    )
    timings["classify"] = time.perf_counter() - t0
    report["invertibility"] = cl.to_json()
    code = EXIT_OK
    if not cl.invertible:
        report["result"] = "not invertible: no exponential dichotomy detected"
        code = EXIT_NEGATIVE
    else:
        try:
            cert, info = recover_certificate(
                c, window, None, args.rate_tol, args.proj_tol, args.verify_tol, args.inv_norm_max,
                args.inv_cond_max,
            )
        except (PreconditionError, RecoveryError, SingularityError) as exc:
            report["result"] = f"no certificate: {exc}"
            code = EXIT_NEGATIVE
        else:
            rep = verify_certificate(c, cert, args.verify_tol, args.inv_cond_max)
            report["rates"] = info["rates"].to_json()
            report["certificate"] = {
                "core": list(info["core"]),
                "margin": info["margin"],
                "D": cert.D,
                "D_fit": info["D_fit"],
                "D_hat_sufficient": info["D_hat_sufficient"],
                "lambda": cert.lam,
                "mu": cert.mu,
                "stable_rank": int(round(float(np.trace(cert.projections[0])))),
                "recovery_residuals": info["recovery"],
                "residuals": rep.residuals,
                "passes": rep.passes,
            }
            if args.projections:
                report["certificate"]["projections"] = cert.projections
            if rep.passes:
                report["result"] = "exponential dichotomy"
            else:
                report["result"] = "recovered certificate does not verify"
                code = EXIT_NEGATIVE
        timings["certificate"] = time.perf_counter() - t0
    if args.csv:
        rows = []
        if cl.invertible:
            rows = _impulse_profile(c, space, window, args.inv_cond_max)
        write_csv(args.csv, ["n", "impulse_response_norm"], rows)
    if args.timings:
        report["timings"] = timings
    report["exit_code"] = code
    write_json(args.report, report)
    print(report["result"])
    return code


# --------------------------------------------------------------------------- certify


def _certify_one(path, args, space):
    t0 = time.perf_counter()
    t, nominal = trajectory_from_json(read_json(path), path)
    rows = _rows(t.window, args.window)
    out = {"orbit": path, "window": list(rows), "epsilon": args.epsilon}
    try:
        h = recover_splitting(
            t, space, rows, args.epsilon, rate_tol=args.rate_tol, proj_tol=args.proj_tol,
            inv_norm_max=args.inv_norm_max,
        )
    except (PreconditionError, RecoveryError, SingularityError) as exc:
        out.update({"ok": False, "reason": f"splitting recovery failed: {exc}"})
        return out, [], time.perf_counter() - t0
    out["recovered_rates"] = {"lambda": h.lam, "mu": h.mu}
    out["recovery_residuals"] = {k: v for k, v in h.residuals.items() if k != "rates"}
    if nominal:
        h = dataclasses.replace(h, lam=nominal.get("lambda", h.lam), mu=nominal.get("mu", h.mu))
    out["rates"] = {"lambda": h.lam, "mu": h.mu}
    e0 = epsilon0(h.lam, h.mu)
    out["eps0"] = e0
    if not (0 < args.epsilon < e0):
        raise DomainError(f"--epsilon {args.epsilon} outside (0, eps0) with eps0 = {e0:.6g}")
    ck = estimate_CK(t, h, args.epsilon)
    out["tempered"] = ck.to_json()
    try:
        norm = build_adapted_norm(t, h, args.epsilon)
    except ShortWindowError as exc:
        out.update({"ok": False, "reason": f"short window: {exc}", "required_length": exc.required_length})
        return out, [], time.perf_counter() - t0
    cert = certify_trajectory(t, h, args.epsilon, space, norm=norm)
    out["certificate"] = cert.to_json()
    checks = check_adapted_norm(t, norm, args.n_vectors, args.seed)
    out["adapted_norm_checks"] = checks
    out["ok"] = bool(cert.ok and ck.tempered_ok)
    out["reason"] = cert.reason if not cert.ok else ("" if ck.tempered_ok else "tempered check failed")
    s = h.stable_dim
    csv_rows = []
    for k in range(h.bases.shape[0]):
        n = h.n_min + k
        es = h.bases[k][:, :s].ravel().tolist()
        eu = h.bases[k][:, s:].ravel().tolist()
        csv_rows.append([path, n, norm.Gfun[k], ck.Cfun[k], ck.Kfun[k], ck.angles[k]] + es + eu)
    return out, csv_rows, time.perf_counter() - t0


def _jobs(requested):
    cap = os.environ.get(THREADS_ENV)
    n = requested if requested is not None else 1
    if cap:
        try:
            n = min(n, max(int(cap), 1)) if requested is not None else max(int(cap), 1)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    return max(n, 1)


def cmd_certify(args):
    _check_tolerances(args)
    space = _space(args.space)
    if not (args.epsilon > 0 and math.isfinite(args.epsilon)):
        raise UsageError("--epsilon must be a positive number")
    jobs = _jobs(args.jobs)
    if jobs > 1 and len(args.orbit) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(lambda p: _certify_one(p, args, space), args.orbit))
    else:
        results = [_certify_one(p, args, space) for p in args.orbit]
    docs = []
    for out, _, dt in results:
        if args.timings:
            out["timings"] = {"total": dt}
        docs.append(out)
    ok = all(d["ok"] for d in docs)
    report = {"command": "certify", "space": space.to_json(), "epsilon": args.epsilon, "results": docs, "ok": ok}
    code = EXIT_OK if ok else EXIT_NEGATIVE
    report["exit_code"] = code
    write_json(args.report, report)
    if args.csv:
        width = max((len(r) for _, rows, _ in results for r in rows), default=6)
        header = ["orbit", "n", "G", "C", "K", "angle"] + [f"basis_{i}" for i in range(width - 6)]
        write_csv(args.csv, header, [r for _, rows, _ in results for r in rows])
    for d in docs:
        print(f"{d['orbit']}: {'certified' if d['ok'] else 'failed: ' + d['reason']}")
    return code


# --------------------------------------------------------------------------- generate


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def cmd_generate(args):
    W = args.window
    if W < 2:
        raise UsageError("--window must be at least 2")
    params = {}
    kind = args.kind
    if kind == "diagonal":
        params["entries"] = _floats(args.entries)
    elif kind == "identity":
        params["dim"] = args.dim
    elif kind == "nonuniform_scalar_pair":
        params.update(lam=args.lam, mu=args.mu, eps=args.eps)
    elif kind == "perturbed":
        base_params = {}
        if args.base == "diagonal":
            base_params["entries"] = _floats(args.entries)
        elif args.base == "nonuniform_scalar_pair":
            base_params.update(lam=args.lam, mu=args.mu, eps=args.eps)
        elif args.base == "identity":
            base_params["dim"] = args.dim
        params.update(base=args.base, base_params=base_params, delta=args.delta, seed=args.seed)
    c = generate_example(kind, (-W, W), args.norms, **params)
    meta = {"kind": kind, "params": params, "norms": args.norms}
    if args.orbit:
        if args.norms != "flat":
            raise UsageError("orbit files use Euclidean fibers; drop --norms")
        lam = args.lam if kind == "nonuniform_scalar_pair" else None
        mu = args.mu if kind == "nonuniform_scalar_pair" else None
        doc = trajectory_to_json(TrajectoryData.from_cocycle(c), lam, mu, meta)
    else:
        doc = cocycle_to_json(c, meta)
    write_json(args.out, doc)
    return EXIT_OK


# --------------------------------------------------------------------------- entry


def build_parser():
    p = _Parser(prog="dichotomy-kit", description="Exponential dichotomies from invertibility of T_B.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    a = sub.add_parser("analyze", help="classify a cocycle and recover its dichotomy")
    a.add_argument("--input", required=True)
    a.add_argument("--space", default="l2")
    a.add_argument("--window", type=int, default=None, help="use rows [-W, W]")
    a.add_argument("--report", required=True)
    a.add_argument("--csv", default=None)
    a.add_argument("--projections", action="store_true", help="include P_n in the report")
    a.add_argument("--timings", action="store_true", help="include wall times (breaks byte-identity)")
    _add_tolerances(a)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("certify", help="certify nonuniform hyperbolicity along orbits")
    c.add_argument("--orbit", required=True, nargs="+")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--space", default="l2")
    c.add_argument("--window", type=int, default=None)
    c.add_argument("--report", required=True)
    c.add_argument("--csv", default=None)
    c.add_argument("--jobs", type=int, default=None, help=f"worker threads (capped by {THREADS_ENV})")
    c.add_argument("--n-vectors", type=int, default=1000, help="random vectors per point for norm checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--timings", action="store_true")
    _add_tolerances(c)
    c.set_defaults(func=cmd_certify)

    g = sub.add_parser("generate", help="write an example cocycle or orbit file")
    g.add_argument("--kind", required=True,
                   choices=["diagonal", "identity", "catmap", "nonuniform_scalar_pair", "perturbed"])
    g.add_argument("--window", type=int, default=64, help="indices [-W, W]")
    g.add_argument("--out", required=True)
    g.add_argument("--norms", choices=["flat", "matched"], default="flat")
    g.add_argument("--orbit", action="store_true", help="write an orbit file instead of a cocycle file")
    g.add_argument("--entries", default="0.5,2")
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--lam", type=float, default=0.5)
    g.add_argument("--mu", type=float, default=2.0)
    g.add_argument("--eps", type=float, default=0.1)
    g.add_argument("--base", default="catmap",
                   choices=["diagonal", "identity", "catmap", "nonuniform_scalar_pair"])
    g.add_argument("--delta", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, UsageError, ConfigurationError, DomainError) as exc:
        print(f"dichotomy-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
