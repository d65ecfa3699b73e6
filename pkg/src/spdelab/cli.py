"""Command line entry point.

Exit codes: 0 when the run passes (or performs no check), 2 when a
verification check fails, 1 on configuration or operational errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config
from .io import write_json
from . import pipeline as pl

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def _probes(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"probes must be comma separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or TOML run configuration")
    common.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default $SPDE_LAB_WORKERS or 1)")
    common.add_argument("--probes", type=_probes, help="comma separated probe points for law comparisons")

    p = argparse.ArgumentParser(prog="spdelab", description="Stochastic heat equation solver and verification lab")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="solve the SPDE")
    s.add_argument("--kernel", choices=("sbm", "fv", "none"))

    s = sub.add_parser("particles", parents=[common], help="simulate a particle system")
    s.add_argument("model", choices=("sbm", "fv"))

    s = sub.add_parser("verify", parents=[common], help="run a verification check")
    s.add_argument("check", choices=("mp", "yw", "coupling", "law", "holder"))
    s.add_argument("--k", type=int, default=10, help="largest Yamada-Watanabe index")
    s.add_argument("--model", choices=("sbm", "fv"), default="sbm", help="particle model for mp")

    s = sub.add_parser("bdsde", parents=[common], help="backward doubly stochastic equations")
    s.add_argument("action", choices=("solve", "ipp", "represent"))

    sub.add_parser("compare", parents=[common], help="particle ensemble against solver ensemble")
    return p


def _dispatch(args, cfg, out: Path, workers: int) -> tuple[str, pl.RunResult]:
    cmd = args.command
    if cmd == "solve":
        return "solve", pl.run_solve(cfg, out, args.kernel, workers)
    if cmd == "particles":
        return "particles", pl.run_particles(cfg, args.model, out, workers)
    if cmd == "verify":
        c = args.check
        if c == "mp":
            return "mp", pl.run_verify_mp(cfg, args.model, out, workers)
        if c == "yw":
            if args.k < 1:
                raise ConfigError("--k must be at least 1")
            return "yw", pl.run_verify_yw(args.k)
        if c == "coupling":
            return "coupling", pl.run_verify_coupling(cfg, out)
        if c == "law":
            return "law", pl.run_verify_law(cfg, out, args.probes, workers)
        return "holder", pl.run_verify_holder(cfg, out)
    if cmd == "bdsde":
        fn = {"solve": pl.run_bdsde_solve, "ipp": pl.run_bdsde_ipp, "represent": pl.run_bdsde_represent}[args.action]
        return {"solve": "bdsde", "ipp": "ipp", "represent": "represent"}[args.action], fn(cfg, out)
    return "compare", pl.compare_pipeline(cfg, out, args.probes, workers)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    name = args.command + (f"-{getattr(args, 'check', '')}" if args.command == "verify" else "")
    out = args.out or Path("runs") / name
    workers = args.workers if args.workers is not None else pl.default_workers()
    start = time.perf_counter()
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        out.mkdir(parents=True, exist_ok=True)
        stem, result = _dispatch(args, cfg, out, workers)
        report_json = write_json(out / f"{stem}_report.json", result.report)
        report_txt = out / f"{stem}_report.txt"
        report_txt.write_text(result.text + "\n", encoding="utf-8")
        result.files += [report_json, report_txt]
        manifest = pl.build_manifest(" ".join(sys.argv[1:] if argv is None else argv), cfg, result,
                                     out, time.perf_counter() - start)
        manifest.write(out)
    except ConfigError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # operational failure, reported not raised
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(result.text)
    print(f"status: {manifest.status}  ({out})")
    return EXIT_FAIL if result.passed is False else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
