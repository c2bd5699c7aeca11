"""Command-line front-end.

Subcommands: run (one experiment), sweep (a parameter sweep), fql (the
sampled quotient learner on a stored MDP), oracle (exact solvers on a
stored MDP), serve (expose a simulator session to a protocol client), and
report (convergence diagnostics on a trace CSV).

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 a
requested acceptance/convergence check failed.
"""
from __future__ import annotations

import argparse
import sys

from . import fracmdp, fql, harness
from .bridge import BridgeError, BridgeServer
from .sim import ConfigError, SimConfig, Simulation, config_from_text

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_run(args) -> int:
    spec = harness.spec_from_text(_read(args.config))
    table = harness.run_experiment(spec)
    _write(args.out, table.to_csv())
    if args.aggregate_out:
        _write(args.aggregate_out, table.aggregate_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = harness.spec_from_text(_read(args.config))
    values = [v for v in args.values.split(",") if v.strip()]
    csv = harness.sweep(spec, args.axis, [float(v) for v in values])
    _write(args.out, csv)
    return EXIT_OK


def cmd_fql(args) -> int:
    mdp = fracmdp.load(args.mdp)
    stop = fql.StopRule(
        alpha=args.alpha, mode=args.mode,
        steps=args.steps, episodes=args.episodes, zeta=args.zeta,
    )
    gamma_1 = args.gamma1
    if gamma_1 is None:
        gamma_1 = fql.evaluate_policy_all_zero_ratio(mdp)
    inner = None
    if args.exact_inner:
        inner = lambda gamma, _seed: fql.exact_inner(mdp, gamma)
    trace = fql.run_fql(
        fql.TabularSampler(mdp), gamma_1, stop,
        episodes=args.episodes, rng_seed=args.seed, inner=inner,
    )
    _write(args.out, fql.trace_to_csv(trace))
    print(f"gamma_final = {trace.gamma_final!r} (converged: {trace.converged})",
          file=sys.stderr)
    return EXIT_OK


def cmd_oracle(args) -> int:
    mdp = fracmdp.load(args.mdp)
    if args.method in ("enumerate", "both"):
        gamma, policy = fracmdp.enumerate_oracle(mdp)
        print(f"enumerate: gamma* = {gamma!r}, policy = {policy.tolist()}")
    if args.method in ("dinkelbach", "both"):
        gamma, policy = fracmdp.dinkelbach_exact(mdp, tol=args.tol)
        print(f"dinkelbach: gamma* = {gamma!r}, policy = {policy.tolist()}")
    return EXIT_OK


def cmd_serve(args) -> int:
    sim_cfg = config_from_text(_read(args.config))

    def factory(episode: int) -> Simulation:
        cfg = harness.ExperimentSpec(sim=sim_cfg, steps=args.steps).episode_config(
            sim_cfg.seed, episode
        )
        return Simulation(cfg)

    server = BridgeServer(
        factory, episodes=args.episodes, steps=args.steps,
        cost_mode=args.cost_mode, gamma0=args.gamma0,
    )
    if args.stdio:
        server.serve_stdio()
    else:
        def announce(sockname):
            print(f"listening on {sockname[0]}:{sockname[1]}", file=sys.stderr)

        server.serve_tcp(host=args.host, port=args.port,
                         ready_callback=announce, timeout=args.timeout)
    print(f"served {len(server.logs)} episodes", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    trace = fql.trace_from_csv(_read(args.trace))
    report = harness.convergence_report(
        trace, gamma_star=args.gamma_star, alpha=args.alpha,
        controlled=args.controlled,
    )
    _write(args.out, report.to_text() + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aoisched",
        description="Age-minimal task scheduling: simulator, solvers, experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment to CSV")
    p.add_argument("--config", required=True, help="experiment spec file")
    p.add_argument("--out", default="-", help="per-cell CSV destination")
    p.add_argument("--aggregate-out", default=None, help="aggregate CSV destination")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one environment axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fql", help="run the sampled quotient learner on an MDP file")
    p.add_argument("--mdp", required=True, help="plain-text MDP file")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--mode", choices=("bound_steps", "residual"), default="bound_steps")
    p.add_argument("--steps", type=int, default=None, help="explicit sweep budget")
    p.add_argument("--zeta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma1", type=float, default=None,
                   help="initial quotient (default: all-first-action ratio)")
    p.add_argument("--exact-inner", action="store_true",
                   help="replace the sampled learner with the exact solver")
    p.add_argument("--out", default="-", help="trace CSV destination")
    p.set_defaults(func=cmd_fql)

    p = sub.add_parser("oracle", help="exact solvers for a stored MDP")
    p.add_argument("--mdp", required=True)
    p.add_argument("--method", choices=("enumerate", "dinkelbach", "both"),
                   default="both")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("serve", help="serve a simulator session to a protocol client")
    p.add_argument("--config", required=True, help="simulator config file")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--cost-mode", choices=("fractional", "ratio"), default="fractional")
    p.add_argument("--gamma0", type=float, default=0.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--timeout", type=float, default=None,
                   help="seconds to wait for a client")
    p.add_argument("--stdio", action="store_true", help="speak over stdin/stdout")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="convergence diagnostics for a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--gamma-star", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--controlled", action="store_true",
                   help="require the tail-mean ratio to match alpha")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, harness.HarnessError, fracmdp.ValidationError,
            FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fracmdp.SolverError, BridgeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
