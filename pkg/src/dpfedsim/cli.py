"""Command-line interface.

Subcommands:
  calibrate  print the noise variance for a privacy budget
  optimal    print the bound-minimizing step size, probability, horizon
  run        execute an experiment config, emit per-round CSV
  sweep      run a sweep grid, emit per-replication CSV plus summary table
  gen        generate a federation from a spec file and serialize it

Exit codes: 0 success, 2 configuration error, 3 divergence in every
replication of some cell (or every seed of a run).
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import harness, problems, theory
from .harness import ConfigError, fmt_float
from .privacy import PrivacyBudget, calibrate_sigma2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfedsim",
        description="Deterministic simulator of differentially private "
        "federated optimization on synthetic convex objectives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="noise variance for a privacy budget")
    cal.add_argument("--epsilon", type=float, required=True)
    cal.add_argument("--delta", type=float, required=True)
    cal.add_argument("--clip", type=float, required=True)
    cal.add_argument("--p", type=float, required=True)
    cal.add_argument("--rounds", type=int, required=True)
    cal.add_argument("--v", type=float, default=2.0)

    opt = sub.add_parser("optimal", help="bound-minimizing hyperparameters")
    opt.add_argument("--mu", type=float, required=True)
    opt.add_argument("--L", type=float, required=True, dest="ell")
    opt.add_argument("--psi0", type=float, required=True)
    opt.add_argument("--epsilon", type=float, required=True)
    opt.add_argument("--delta", type=float, required=True)
    opt.add_argument("--clip", type=float, required=True)
    opt.add_argument("--v", type=float, default=2.0)

    runp = sub.add_parser("run", help="run an experiment config")
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--out", default=None)
    runp.add_argument("--workers", type=int, default=1)

    swp = sub.add_parser("sweep", help="run a sweep grid")
    swp.add_argument("--config", required=True)
    swp.add_argument(
        "--mode",
        required=True,
        choices=["local-steps", "comm-rounds", "epsilon"],
    )
    swp.add_argument("--out", default=None)
    swp.add_argument("--metric", default="final_psi",
                     choices=["final_psi", "final_loss", "final_dist"])
    swp.add_argument("--workers", type=int, default=1)

    gen = sub.add_parser("gen", help="generate and serialize a federation")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)

    return parser


def _cmd_calibrate(args) -> int:
    budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    sigma2 = calibrate_sigma2(budget, args.clip, args.p, args.rounds, args.v)
    print(f"sigma2 = {fmt_float(sigma2)}")
    return EXIT_OK


def _cmd_optimal(args) -> int:
    budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    params = theory.optimal_params(
        args.mu, args.ell, args.psi0, budget, args.clip, args.v
    )
    print(f"eta_star = {fmt_float(params.eta_star)}")
    print(f"p_star = {fmt_float(params.p_star)}")
    print(f"T_star_real = {fmt_float(params.t_star_real)}")
    print(f"T_star = {params.t_star}")
    print(f"expected_local_steps = {fmt_float(params.expected_local_steps)}")
    print(f"expected_comm_rounds = {fmt_float(params.expected_comm_rounds)}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = harness.parse_config(args.config)
    seeds = (args.seed,) if args.seed is not None else None
    text, diverged = harness.run_experiment(
        cfg, seeds=seeds, out=args.out, workers=args.workers
    )
    n_seeds = len(seeds) if seeds is not None else len(cfg.seeds)
    if not (args.out or cfg.out):
        sys.stdout.write(text)
    if diverged == n_seeds:
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = harness.parse_config(args.config)
    mode = args.mode.replace("-", "_")
    if cfg.sweep_spec is None:
        raise ConfigError("config has no [sweep] section")
    spec = cfg.sweep_spec
    if spec.mode != mode:
        spec = harness.SweepSpec(
            mode=mode,
            values=spec.values,
            epsilons=spec.epsilons,
            budget_steps=spec.budget_steps,
            replications=spec.replications,
        )
    result, csv_text = harness.sweep(spec, cfg, metric=args.metric, workers=args.workers)
    target = args.out or cfg.out
    if target:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    sys.stdout.write(harness.emit_summary(result))
    if harness.any_cell_fully_diverged(result, spec.replications):
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_gen(args) -> int:
    spec, cfg_seed = harness.parse_heterogeneity_spec(args.spec)
    seed = args.seed if args.seed is not None else cfg_seed
    fed = problems.generate_federation(spec, seed)
    problems.save_federation(fed, args.out)
    print(
        f"wrote federation: kind={fed.clients[0].kind} N={fed.n_clients} "
        f"d={fed.dim} mu={fmt_float(fed.mu)} ell={fmt_float(fed.ell)}"
    )
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "optimal": _cmd_optimal,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "gen": _cmd_gen,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
