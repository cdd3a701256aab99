"""Command line interface: ``ddrom <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .bounds import evaluate_hmt_bounds
from .local import DEFAULT_EXPLICIT_CAP


def _ids(text):
    if text is None:
        return None
    return [int(x) for x in text.split(",") if x.strip()]


def _hops(text, count):
    h = _ids(text)
    return h * count if len(h) == 1 else h


def _common(p, *names):
    if "epsilon" in names:
        p.add_argument("--epsilon", type=float, default=1e-2, help="singular value truncation tolerance")
    if "method" in names:
        p.add_argument("--method", choices=("randomized", "explicit"), default="randomized")
    if "sketch" in names:
        p.add_argument("--sketch-divisor", type=int, default=8, help="sketch k = floor(M / divisor)")
    if "seed" in names:
        p.add_argument("--seed", type=int, default=0)
    if "tol" in names:
        p.add_argument("--tol", type=float, default=1e-10, help="relative residual for CG")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddrom", description="Distributed FE solves with local reduced bases.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition a mesh and write extended submeshes")
    p.add_argument("--mesh", required=True, help="mesh file, or cube:<N> / square:<N>")
    p.add_argument("--n", type=int, required=True, help="number of subdomains")
    p.add_argument("--r-hops", type=int, default=4)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--coefficient", default="one", help="one or osc:<k>")
    p.add_argument("--load", default="unit_energy", help="unit_energy, one or zero")
    p.add_argument("--explicit-cap", type=int, default=DEFAULT_EXPLICIT_CAP)
    _common(p, "epsilon", "method", "sketch", "seed")

    p = sub.add_parser("reduce", help="compute local bases with worker processes")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--subdomains", help="comma-separated ids (default: all pending)")
    p.add_argument("--retry-failed", action="store_true")

    p = sub.add_parser("solve", help="assemble and solve the reduced system")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", action="store_true", help="also compute the full solve and reduction error")
    p.add_argument("--kappa", action="store_true", help="Lanczos condition estimates")
    _common(p, "tol")

    p = sub.add_parser("full-solve", help="reference full-order FE solve")
    p.add_argument("--out", required=True)
    _common(p, "tol")

    p = sub.add_parser("spectra", help="write weighted singular values per subdomain")
    p.add_argument("--out", required=True)
    p.add_argument("--subdomains")
    p.add_argument("--max-count", type=int)

    p = sub.add_parser("convergence", help="error against mesh size on unit cubes")
    p.add_argument("--sizes", required=True, help="comma-separated divisions per axis")
    p.add_argument("--n", help="comma-separated subdomain counts (default: about 1000 DOFs each)")
    p.add_argument("--r-hops", default="4", help="one hop count, or one per size")
    p.add_argument("--out", help="table file")
    _common(p, "epsilon", "method", "seed")

    p = sub.add_parser("bounds", help="evaluate sketching error bounds")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--u", type=float, default=5.0)
    p.add_argument("--singular-values", help="file with one value per line (default: none, bounds are 0)")

    p = sub.add_parser("worker", help=argparse.SUPPRESS)
    p.add_argument("--submesh", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--subdomain", type=int, required=True)
    p.add_argument("--coefficient", default="one")
    p.add_argument("--load", default="unit_energy")
    p.add_argument("--explicit-cap", type=int, default=DEFAULT_EXPLICIT_CAP)
    _common(p, "epsilon", "method", "sketch", "seed")
    return ap


def _print(rec: dict) -> None:
    for k, v in rec.items():
        print(f"{k}={v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "partition":
            man = pipeline.cmd_partition(args.mesh, args.n, args.r_hops, args.out, seed=args.seed,
                                         epsilon=args.epsilon, method=args.method,
                                         sketch_divisor=args.sketch_divisor, coefficient=args.coefficient,
                                         load=args.load, explicit_cap=args.explicit_cap)
            print(f"wrote {man['n']} submeshes to {args.out}")
        elif args.command == "reduce":
            man = pipeline.cmd_reduce(args.out, workers=args.workers, subdomains=_ids(args.subdomains),
                                      retry_failed=args.retry_failed)
            print(pipeline.manifest_summary(man))
            if any(r["status"] == pipeline.FAILED for r in man["subdomains"]):
                return 1
        elif args.command == "solve":
            rep = pipeline.cmd_solve(args.out, tol=args.tol, reference=args.reference, kappa=args.kappa)
            _print(rep.as_record())
        elif args.command == "full-solve":
            _print(pipeline.cmd_full_solve(args.out, tol=args.tol))
        elif args.command == "spectra":
            out = pipeline.cmd_spectra(args.out, _ids(args.subdomains), args.max_count)
            for i, s in out.items():
                print(f"subdomain {i}: {s.size} values, largest {s[0] if s.size else 0.0:.4g}")
        elif args.command == "convergence":
            study = pipeline.convergence_study(_ids(args.sizes), epsilon=args.epsilon,
                                               r_hops=_hops(args.r_hops, len(_ids(args.sizes))),
                                               n_subdomains=_ids(args.n), method=args.method, seed=args.seed)
            if args.out:
                pipeline.write_convergence_table(args.out, study)
            for r in study["rows"]:
                print(json.dumps(r))
            print(f"slope={study['slope']}")
        elif args.command == "bounds":
            s = [1.0]
            if args.singular_values:
                with open(args.singular_values) as fh:
                    s = [float(x) for x in fh.read().split()]
            b = evaluate_hmt_bounds(s, args.k, args.p, args.t, args.u)
            _print({"expected": b.expected, "tail": b.tail, "failure_probability": b.failure_probability})
        elif args.command == "worker":
            return pipeline.run_worker(args.submesh, args.basis, args.epsilon, args.method,
                                       pipeline.subdomain_seed(args.seed, args.subdomain), args.coefficient,
                                       args.load, args.sketch_divisor, args.explicit_cap)
    except (pipeline.PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
