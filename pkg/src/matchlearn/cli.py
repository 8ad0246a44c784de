"""Command-line front end.

Exit codes: 0 success or certified, 1 uncertified or violated, 2 usage or
input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from .equilibrium import (
    MAX_ENUMERATION_N,
    enumerate_stable_matchings,
    example1_market,
    is_pure_ne,
    pure_ne_set,
    round_mixed_to_pure,
    verify_mixed_ne,
)
from .exp_learner import ScheduleSpec
from .market import (
    Market,
    MarketError,
    RewardDist,
    actions_to_profile,
    deferred_acceptance,
    is_hierarchical,
    is_stable,
)
from .monotone import RegularizedGame, build_q, is_psd, monotone_identity_check, solve_eps_ne
from .sim import (
    ConfigError,
    build_market,
    gen_general,
    gen_hierarchical,
    load_config,
    local_convergence_probe,
    run,
    summarize,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _load_market(path) -> Market:
    try:
        return Market.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read market: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"malformed market file {path}: {exc}") from None


def _load_profile(path, n: int) -> np.ndarray:
    """Accept {"profile": matrix}, {"actions": list} or a bare matrix/list."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read profile: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed profile file {path}: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("profile", doc.get("actions"))
    try:
        arr = np.asarray(doc, dtype=float)
        if arr.ndim == 1:
            if np.any(arr != np.round(arr)):
                raise ValueError("action lists must hold integers")
            return actions_to_profile([int(w) for w in arr], n)
        if arr.shape != (n, n):
            raise ValueError(f"profile must be {n}x{n}")
        return arr
    except (TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"malformed profile: {exc}") from None


def _market_facts(market: Market) -> dict:
    return {
        "n": market.n,
        "gap": market.gap,
        "mu_min": market.mu_min,
        "mu_max": market.mu_max,
        "c": market.hierarchical_c() if is_hierarchical(market) else market.local_c(),
        "hierarchical": is_hierarchical(market),
    }


# ------------------------------------------------------------------ verbs

def cmd_generate(args) -> int:
    reward = RewardDist(args.reward, args.concentration)
    if args.kind == "example1":
        market = example1_market(args.eps)[0].with_rewards(reward)
    else:
        if args.n is None or args.n < 1:
            raise UsageError("--n must be a positive integer")
        gen = gen_hierarchical if args.kind == "hierarchical" else gen_general
        market = gen(args.n, args.seed, args.min_gap, reward)
    try:
        market.save(args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    _emit(_market_facts(market))
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    if config.seed is None:
        config = config.model_copy(update={"seed": secrets.randbits(63)})
        print(f"seed: {config.seed}", file=sys.stderr)
    if args.out is not None and config.record != "full":
        print("note: trajectory CSVs need record='full'; writing the summary only", file=sys.stderr)
    market = build_market(config.market, Path(args.config).parent)
    trajectories = run(config, market)
    summary = summarize(config, trajectories, market)
    if args.out is not None:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            if config.record == "full":
                for tr in trajectories:
                    tr.write_csv(out / f"trajectory_r{tr.replication:03d}.csv")
            (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        except OSError as exc:
            raise UsageError(f"cannot write outputs: {exc}") from None
    print(
        f"R(T)={summary['regret_final']:.1f}  "
        f"R(T)/log T={summary['regret_final'] / np.log(max(config.horizon, 2)):.3f}  "
        f"stability(last decade)={summary['stability_rate_last_decade']:.3f}"
    )
    return EXIT_OK


def cmd_enumerate(args) -> int:
    market = _load_market(args.market)
    if market.n > MAX_ENUMERATION_N:
        raise UsageError(f"enumeration is limited to n <= {MAX_ENUMERATION_N}")
    stable = enumerate_stable_matchings(market)
    ne = sorted(pure_ne_set(market)) if market.n <= 6 else None
    _emit({"stable_matchings": stable, "pure_equilibria": ne, "deferred_acceptance": deferred_acceptance(market)})
    return EXIT_OK


def cmd_verify(args) -> int:
    market = _load_market(args.market)
    x = _load_profile(args.profile, market.n)
    try:
        pure = bool(np.all((x == 0) | (x == 1)))
        cert = is_pure_ne(market, x, args.tol) if pure else verify_mixed_ne(market, x, args.tol)
    except MarketError as exc:
        raise UsageError(f"malformed profile: {exc}") from None
    report = cert.to_dict()
    if pure and np.all(x.sum(axis=1) == 1):
        actions = x.argmax(axis=1)
        if sorted(actions.tolist()) == list(range(market.n)):
            report["stable"] = is_stable(market, actions)
    _emit(report)
    return EXIT_OK if cert.certified else EXIT_FAIL


def cmd_round(args) -> int:
    market = _load_market(args.market)
    x = _load_profile(args.profile, market.n)
    mu_hat = None
    if args.mu_estimates:
        mu_hat = _load_profile(args.mu_estimates, market.n)
    try:
        result = round_mixed_to_pure(market, x, mu_hat)
    except MarketError as exc:
        raise UsageError(str(exc)) from None
    report = {"matching": list(result.matching), "partial": result.partial}
    ok = True
    if not result.partial and sorted(result.matching) == list(range(market.n)):
        report["stable"] = is_stable(market, result.matching)
        ok = report["stable"]
    _emit(report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_monotone_check(args) -> int:
    market = _load_market(args.market)
    n = market.n
    beta = args.beta if args.beta is not None else n * market.mu_max
    game = RegularizedGame(market, beta)
    rng = np.random.default_rng(args.seed)
    worst_rel, worst_gap = 0.0, -np.inf
    for _ in range(args.pairs):
        x, x2 = rng.dirichlet(np.ones(n), size=n), rng.dirichlet(np.ones(n), size=n)
        lhs, rhs = monotone_identity_check(game, x, x2)
        worst_rel = max(worst_rel, abs(lhs - rhs) / (1 + abs(lhs)))
        worst_gap = max(worst_gap, lhs)
    psd = [is_psd(build_q(game, w).q) for w in range(n)]
    report = {
        "beta": beta,
        "monotone_threshold": game.monotone_threshold,
        "certified_monotone": game.certified_monotone,
        "identity_max_relative_error": worst_rel,
        "max_monotonicity_gap": worst_gap,
        "q_psd": psd,
    }
    ok = worst_rel <= 1e-9
    if game.certified_monotone:
        ok = ok and all(psd) and worst_gap <= 1e-9
    if args.solve:
        res = solve_eps_ne(game, iters=args.iters, log_path=args.log)
        report["solution"] = res.x
        report["residual_regularized"] = res.residual_regularized
        report["residual_simplified"] = res.residual_simplified
        report["iterations"] = res.iterations
    _emit(report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_probe_local(args) -> int:
    market = _load_market(args.market)
    if args.reward is not None:
        market = market.with_rewards(RewardDist(args.reward))
    if args.profile is not None:
        star = [int(w) for w in args.profile.split(",")]
    else:
        star = list(range(market.n)) if is_hierarchical(market) else list(deferred_acceptance(market))
    schedule = ScheduleSpec(kind="custom", n=market.n, alpha=args.alpha, beta=args.beta)
    try:
        report = local_convergence_probe(
            market, star, args.radius, schedule, args.T, args.replications, args.seed
        )
    except MarketError as exc:
        raise UsageError(str(exc)) from None
    body = report.to_dict()
    key = json.dumps({"market": market.to_dict(), "star": star, "alpha": args.alpha, "beta": args.beta, "T": args.T}, sort_keys=True)
    summary = {
        "config_hash": hashlib.sha256(key.encode()).hexdigest()[:16],
        "seed": args.seed,
        "n": market.n,
        "T": args.T,
        "regret_final": None,
        "regret_per_logT_fit": None,
        "stability_rate_last_decade": None,
        "envelope_violation_fraction": body["envelope_violation_fraction"],
        "probe": body,
    }
    if args.out:
        try:
            Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc}") from None
    _emit(summary)
    return EXIT_OK if body["envelope_violation_fraction"] <= args.max_violation else EXIT_FAIL


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a market file")
    g.add_argument("--kind", choices=["hierarchical", "general", "example1"], required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-gap", type=float)
    g.add_argument("--eps", type=float, default=0.1, help="small entry of the example1 market")
    g.add_argument("--reward", choices=RewardDist.KINDS, default="bernoulli")
    g.add_argument("--concentration", type=float, default=20.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="simulate learners from a JSON run config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("enumerate", help="list stable matchings and pure equilibria")
    e.add_argument("market")
    e.set_defaults(func=cmd_enumerate)

    v = sub.add_parser("verify", help="certify a pure or mixed profile as an equilibrium")
    v.add_argument("market")
    v.add_argument("profile")
    v.add_argument("--tol", type=float, default=1e-9)
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("round", help="round a mixed equilibrium to a matching")
    d.add_argument("market")
    d.add_argument("profile")
    d.add_argument("--mu-estimates")
    d.set_defaults(func=cmd_round)

    mc = sub.add_parser("monotone-check", help="check the regularized game's quadratic-form identity")
    mc.add_argument("market")
    mc.add_argument("--beta", type=float)
    mc.add_argument("--pairs", type=int, default=200)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--solve", action="store_true")
    mc.add_argument("--iters", type=int, default=10_000)
    mc.add_argument("--log", help="solver log CSV path")
    mc.set_defaults(func=cmd_monotone_check)

    pl = sub.add_parser("probe-local", help="local convergence envelope probe")
    pl.add_argument("market")
    pl.add_argument("--profile", help="comma-separated pure equilibrium; defaults to the identity or DA")
    pl.add_argument("--T", type=int, default=5000)
    pl.add_argument("--replications", type=int, default=100)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--radius", type=float)
    pl.add_argument("--alpha", type=float, default=0.75, help="eta = t^-alpha")
    pl.add_argument("--beta", type=float, default=1.0 / 3.0, help="gamma = t^-beta")
    pl.add_argument("--reward", choices=RewardDist.KINDS)
    pl.add_argument("--max-violation", type=float, default=0.1)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_probe_local)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, MarketError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
