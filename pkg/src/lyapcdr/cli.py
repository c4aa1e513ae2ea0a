"""Command-line entry point: ``lyapcdr {verify-operators,run,mms-convergence,equilibrium-study}``.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 integration failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .app import equilibrium_study, mms_convergence, run_simulation
from .config import RunConfig, StudyConfig, load_run_config, load_study_config
from .errors import ConfigurationError, IntegrationError, LyapcdrError
from .verification import DEFECTS, verify_operators

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_INTEGRATION = 0, 1, 2, 3

log = logging.getLogger("lyapcdr")


def _int_range(text: str) -> list[int]:
    """Parse ``"3"``, ``"1-4"`` or ``"1,3,5"``."""
    out: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid integer range {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("empty range")
    return out


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--output-dir", type=Path, help="directory for results (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads for the RHS volume terms")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                      help="fixed accumulation order (bitwise reproducible output)")
    mode.add_argument("--fast", dest="deterministic", action="store_false",
                      help="allow nondeterministic reduction order")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lyapcdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-operators", help="certify SBP, tensor and metric invariants")
    p.add_argument("--degrees", type=_int_range, default=[1, 2, 3, 4], help="e.g. 1-4 (default)")
    p.add_argument("--dims", type=_int_range, default=[1, 2, 3], help="e.g. 1-3 (default)")
    p.add_argument("--inject-defect", choices=DEFECTS, help="deliberately break the operator")
    p.add_argument("--dump-matrices", action="store_true", help="write nodes, weights, D, Q, E as text")
    p.add_argument("--tolerance", type=float, default=1e-12)
    _add_common(p, config=False)

    for name, text in (("run", "integrate one configuration"),
                       ("mms-convergence", "manufactured-solution convergence study"),
                       ("equilibrium-study", "time-to-equilibrium versus refinement")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "run":
            p.add_argument("--t-end", type=float, help="override the final time")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.output_dir is not None:
        changes["output_dir"] = str(args.output_dir)
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.deterministic is not None:
        changes["deterministic"] = args.deterministic
    if getattr(args, "t_end", None) is not None:
        changes["t_end"] = args.t_end
    return cfg.with_overrides(**changes) if changes else cfg


def _cmd_verify(args) -> int:
    out = args.output_dir or Path("verify-operators")
    out.mkdir(parents=True, exist_ok=True)
    report = verify_operators(args.degrees, args.dims, defect=args.inject_defect,
                              dump_dir=out / "matrices" if args.dump_matrices else None,
                              tolerance=args.tolerance)
    path = out / "operator_report.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for e in report["entries"]:
        status = "PASS" if e["passed"] else "FAIL " + ",".join(e["failures"])
        print(f"p={e['degree']:<2} dim={e['dim']}  {status}")
    print(f"report written to {path}")
    return EXIT_OK if report["passed"] else EXIT_FAILED


def _cmd_run(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    start = time.perf_counter()
    try:
        result = run_simulation(cfg, output_dir=cfg.output_dir, log=log.info)
    except IntegrationError as exc:
        print(f"integration failed: {exc}; last good state written to {cfg.output_dir}", file=sys.stderr)
        return EXIT_INTEGRATION
    s = result.summary
    print(f"t = {s['t_final']:.6g} after {s['n_steps']} steps ({time.perf_counter() - start:.1f} s)")
    print(f"predicted equilibrium (P, Q) = ({s['predicted_equilibrium'][0]:.12g}, "
          f"{s['predicted_equilibrium'][1]:.12g})")
    print(f"final max-norm distance = ({s['final_distance'][0]:.3e}, {s['final_distance'][1]:.3e}); "
          f"T_eq = {s['T_eq']}")
    if "max_relative_balance_residual" in s:
        print(f"max relative balance residual = {s['max_relative_balance_residual']:.3e}")
    print(f"results written to {cfg.output_dir}")
    return EXIT_OK


def _load_study(args) -> StudyConfig:
    if args.config is None:
        raise ConfigurationError("studies need --config")
    study = load_study_config(args.config)
    base = _apply_overrides(study.base, args)
    return StudyConfig(base=base, levels=study.levels, degrees=study.degrees, overrides=study.overrides)


def _cmd_mms(args) -> int:
    study = _load_study(args)
    res = mms_convergence(study, output_dir=study.base.output_dir, log=log.info)
    print(res["table"])
    print(f"results written to {study.base.output_dir}")
    return EXIT_OK


def _cmd_equilibrium(args) -> int:
    study = _load_study(args)
    res = equilibrium_study(study, output_dir=study.base.output_dir, log=log.info)
    print(res["table"])
    print(f"results written to {study.base.output_dir}")
    return EXIT_OK


COMMANDS = {"verify-operators": _cmd_verify, "run": _cmd_run, "mms-convergence": _cmd_mms,
            "equilibrium-study": _cmd_equilibrium}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except LyapcdrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
