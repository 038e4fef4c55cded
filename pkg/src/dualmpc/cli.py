"""Command line: ``dualmpc run CONFIG`` and ``dualmpc check CONFIG``.

Exit status: 0 success, 2 unreadable or invalid configuration, 3 a standing
assumption or an offline LP fails, 4 a scenario is infeasible at its first
step (unless ``--allow-infeasible``).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import example_config_path
from .config import ConfigAssumptionError, ConfigError, dump_config, parse_config
from .controller import FT, HT
from .sim import monte_carlo, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_INFEASIBLE = 4

log = logging.getLogger("dualmpc")


def _vec(a, digits=6) -> str:
    return "[" + ", ".join(f"{v + 0.0:.{digits}g}" for v in np.ravel(a)) + "]"


_BUNDLED = ("example", "example_sec6", "example_sec6.cfg", "example_sec6.yaml")


def _load(path):
    if path in _BUNDLED and not Path(path).exists():
        path = str(example_config_path())
    return parse_config(path)


def cmd_check(args) -> int:
    cfg = _load(args.config)
    setup = cfg.setup()
    print(f"configuration: {args.config}")
    print(f"lambda_c = {setup.lambda_c!r}")
    ht = setup.offline(HT, cfg.Q, cfg.R)
    print(f"fbar = {_vec(ht.fbar, 17)}")
    print(f"wbar = {_vec(ht.wbar, 17)}")
    if any(c.tube == FT for c in cfg.controllers):
        ft = setup.offline(FT, cfg.Q, cfg.R)
        print(f"flexible tube multipliers (mu_ft = {cfg.mu_ft}):")
        groups: dict = {}
        for r, _ in cfg.setpoints:
            mult = ft.at(r)
            key = mult.lam1.tobytes() + mult.lam2.tobytes()
            groups.setdefault(key, (mult, []))[1].append(r)
        for mult, refs in groups.values():
            print("  reference " + ", ".join(_vec(r) for r in refs))
            for j, row in enumerate(mult.lam1):
                print(f"    constraint row {j}: {_vec(row)}")
            for i, block in enumerate(mult.lam2):
                print(f"    tube row {i}: " + "  ".join(_vec(b) for b in block))
    if args.dump:
        sys.stdout.write("--- effective configuration ---\n")
        sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def _table(summary: dict) -> str:
    head = f"{'controller':<14}{'n':>4}{'infeas':>8}{'median':>10}{'mean':>10}{'ms/step':>10}"
    lines = [head, "-" * len(head)]
    for name, row in summary.items():
        fmt = lambda v, d=2: "-" if v is None else f"{v:.{d}f}"
        lines.append(f"{name:<14}{row['n']:>4}{row['infeasible']:>8}{fmt(row.get('median')):>10}"
                     f"{fmt(row['mean_cost']):>10}{fmt(row['mean_solve_ms'], 1):>10}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    n = args.realizations if args.realizations is not None else cfg.n_realizations
    T = args.horizon if args.horizon is not None else cfg.horizon
    seed = args.seed if args.seed is not None else cfg.base_seed
    workers = args.threads if args.threads is not None else cfg.workers
    configs = cfg.select([s.strip() for s in args.controllers.split(",") if s.strip()]) if args.controllers else cfg.controllers
    out = Path(args.out if args.out is not None else cfg.output)

    def progress(index, recs, elapsed):
        costs = ", ".join(f"{r.controller}={r.total_cost:.3f}" for r in recs)
        log.info("scenario %d done after %.1f s: %s", index, elapsed, costs)

    t0 = time.perf_counter()
    result = monte_carlo(cfg.setup(), configs, n, T, seed, cfg.reference(), workers=workers,
                         progress=progress, x0=cfg.x0)
    elapsed = time.perf_counter() - t0
    summary = write_outputs(result, out, {"realizations": n, "horizon": T, "base_seed": seed})
    (out / "config.yaml").write_text(dump_config(cfg))
    print(_table(summary))
    print(f"{n} scenarios x {len(configs)} controllers in {elapsed:.1f} s; outputs in {out}")
    at_start = sum(row["infeasible_at_start"] for row in summary.values())
    if at_start and not args.allow_infeasible:
        print(f"error: {at_start} run(s) infeasible at the first step", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualmpc", description="Tube MPC with set-membership identification.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress per scenario")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the closed-loop Monte Carlo experiment")
    run.add_argument("config", help="experiment YAML file, or 'example' for the bundled one")
    run.add_argument("--realizations", type=int, help="number of scenarios")
    run.add_argument("--horizon", type=int, help="closed-loop steps per scenario")
    run.add_argument("--seed", type=int, help="base seed of the scenario streams")
    run.add_argument("--controllers", help="comma-separated subset of controller names")
    run.add_argument("--threads", type=int, help="worker processes")
    run.add_argument("--out", help="output directory")
    run.add_argument("--allow-infeasible", action="store_true", help="exit 0 even if some run is infeasible at k = 0")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="run the offline computations and print them")
    check.add_argument("config", help="experiment YAML file, or 'example' for the bundled one")
    check.add_argument("--dump", action="store_true", help="also print the effective configuration")
    check.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for name in ("realizations", "horizon", "threads"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            print(f"error: --{name} must be positive", file=sys.stderr)
            return EXIT_CONFIG
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigAssumptionError as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
