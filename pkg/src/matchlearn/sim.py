"""Round-by-round market simulation.

Each round every man proposes, each woman keeps her favourite proposer, and
matched men draw a reward.  Replications are simulated side by side as
stacked arrays; every (replication, man) pair owns private random streams so
results never depend on how many replications run together or on which
metrics are recorded.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .baselines import (
    _select_updaters,
    choose_baseline,
    estimated_gaps,
    is_good_state,
    theorem6_eps_bound,
    trial_action,
    unsatisfied,
)
from .equilibrium import MAX_ENUMERATION_N, enumerate_stable_matchings, example1_market, is_pure_ne_actions
from .exp_learner import (
    GAMMA_CAP,
    ScheduleSpec,
    adjust,
    local_schedule,
    logit,
    make_estimate,
    sample_index,
    theorem3_M,
)
from .market import (
    SINK,
    Market,
    MarketError,
    RewardDist,
    actions_to_profile,
    gradient_matrix,
    is_hierarchical,
    matched_pairs,
    resolve_proposals,
)
from .monotone import RegularizedGame, max_safe_step, pg_step

BLOCK = 1024
MAX_CHUNK = 4096
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for run configurations that are well-formed but inconsistent."""


# ================================================================ round resolution

@dataclass(frozen=True)
class RoundOutcome:
    proposals: tuple
    accepted: tuple
    rewards: dict  # man -> reward, matched men only
    waitlist_counts: Optional[tuple] = None

    @property
    def matches(self) -> tuple:
        return matched_pairs(self.proposals, self.accepted)


@dataclass(frozen=True)
class ManFeedback:
    """Everything man m may observe about round t.

    A rejected man in standard mode sees only his proposal and the rejection.
    """

    t: int
    proposal: int
    accepted: bool
    reward: Optional[float] = None
    waitlist: Optional[int] = None


def resolve_round(
    market: Market, proposals, rng: Optional[np.random.Generator] = None, waiting_list: bool = False
) -> RoundOutcome:
    rng = rng if rng is not None else np.random.default_rng()
    a = np.asarray(proposals, dtype=np.int64)
    if a.shape != (market.n,) or np.any((a < SINK) | (a >= market.n)):
        raise MarketError("proposals must list a woman index or SINK for every man")
    accepted, ahead = resolve_proposals(market, a)
    rewards = {
        m: float(market.reward_dist.sample(rng, market.mu[m, a[m]], 1)[0])
        for m in range(market.n)
        if accepted[m]
    }
    wait = tuple(int(k) for k in ahead) if waiting_list else None
    return RoundOutcome(tuple(int(w) for w in a), tuple(bool(x) for x in accepted), rewards, wait)


def feedback_for(outcome: RoundOutcome, m: int, t: int) -> ManFeedback:
    """Man m's private slice of a round's outcome."""
    w = outcome.proposals[m]
    if outcome.accepted[m]:
        return ManFeedback(t, w, True, outcome.rewards[m], 0 if outcome.waitlist_counts else None)
    wait = outcome.waitlist_counts[m] if outcome.waitlist_counts is not None else None
    return ManFeedback(t, w, False, None, wait)


# ================================================================ generators

def _default_gap(n: int) -> float:
    return 1.0 / (n + 2)


def _grid_row(rng: np.random.Generator, n: int, min_gap: float) -> np.ndarray:
    """n distinct values from the grid {g, 2g, ...} inside (0, 1]; pairwise gaps are >= g."""
    size = int(math.floor(1.0 / min_gap + 1e-9))
    if size < n:
        raise MarketError(f"min_gap={min_gap} leaves only {size} distinct values in (0, 1] for n={n}")
    picks = rng.choice(size, size=n, replace=False) + 1
    return np.round(picks * min_gap, 12)


def gen_hierarchical(
    n: int, seed: int, min_gap: Optional[float] = None, reward_dist: Optional[RewardDist] = None
) -> Market:
    """Random market where man k and woman k rank each other above every partner of higher index."""
    if n < 1:
        raise MarketError("n must be >= 1")
    min_gap = _default_gap(n) if min_gap is None else min_gap
    rng = np.random.default_rng(seed)
    mu = np.empty((n, n))
    for k in range(n):
        row = _grid_row(rng, n, min_gap)
        j = k + int(np.argmax(row[k:]))
        row[[k, j]] = row[[j, k]]
        mu[k] = row
    ranks = np.empty((n, n), dtype=np.int64)
    for w in range(n):
        perm = rng.permutation(n)
        slots = np.flatnonzero(perm >= w)
        rest = perm[slots][perm[slots] != w]
        perm[slots] = np.concatenate(([w], rng.permutation(rest)))
        ranks[w] = perm
    return Market(mu, ranks, reward_dist or RewardDist())


def gen_general(
    n: int, seed: int, min_gap: Optional[float] = None, reward_dist: Optional[RewardDist] = None
) -> Market:
    if n < 1:
        raise MarketError("n must be >= 1")
    min_gap = _default_gap(n) if min_gap is None else min_gap
    if min_gap <= 0:
        raise MarketError("min_gap must be positive")
    rng = np.random.default_rng(seed)
    mu = np.stack([_grid_row(rng, n, min_gap) for _ in range(n)])
    ranks = np.stack([rng.permutation(n) for _ in range(n)])
    return Market(mu, ranks, reward_dist or RewardDist())


# ================================================================ configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RewardConfig(_Strict):
    kind: Literal["bernoulli", "beta", "deterministic"] = "bernoulli"
    concentration: float = Field(20.0, gt=0)


class MarketConfig(_Strict):
    file: Optional[str] = None
    generator: Optional[Literal["hierarchical", "general", "example1"]] = None
    n: Optional[int] = Field(None, ge=1)
    seed: int = 0
    min_gap: Optional[float] = Field(None, gt=0)
    eps: float = Field(0.1, gt=0, lt=1)
    reward: Optional[RewardConfig] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.generator is None):
            raise ValueError("give exactly one of 'file' or 'generator'")
        if self.generator in ("hierarchical", "general") and self.n is None:
            raise ValueError(f"generator {self.generator!r} needs 'n'")
        return self


class ScheduleConfig(_Strict):
    kind: Literal["theorem3", "local", "custom", "adaptive"] = "theorem3"
    M: Optional[float] = Field(None, gt=0)
    c: Optional[float] = Field(None, gt=0)
    alpha: float = Field(0.75, ge=0)
    beta: float = Field(1.0 / 3.0, ge=0)
    eta_scale: float = Field(1.0, gt=0)
    gamma_scale: float = Field(1.0, gt=0)


class TrialConfig(_Strict):
    eps: float = Field(..., ge=0, le=1)
    delta: float = Field(..., gt=0)
    omega: float = Field(0.5, ge=0, lt=1)
    tau: Optional[Union[int, list[int]]] = None
    mode: Literal["theorem6", "free"] = "free"
    p: float = Field(0.9, gt=0, lt=1)
    initial: Optional[list[int]] = None
    diagnostics: bool = False


class BestResponseConfig(_Strict):
    updaters: Literal["all", "single", "random"] = "all"
    start: Optional[list[int]] = None


class MonotoneConfig(_Strict):
    beta: Optional[float] = Field(None, ge=0)
    step: Optional[float] = Field(None, gt=0)


class LearnerConfig(_Strict):
    kind: Literal["exp", "trial", "best-response", "monotone"] = "exp"
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    trial: Optional[TrialConfig] = None
    best_response: BestResponseConfig = Field(default_factory=BestResponseConfig)
    monotone: MonotoneConfig = Field(default_factory=MonotoneConfig)

    @model_validator(mode="after")
    def _needs_trial(self):
        if self.kind == "trial" and self.trial is None:
            raise ValueError("learner kind 'trial' needs a 'trial' block")
        return self


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    market: MarketConfig
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    horizon: int = Field(..., ge=1)
    replications: int = Field(1, ge=1)
    seed: Optional[int] = Field(None, ge=0)
    feedback: Literal["standard", "waiting-list"] = "standard"
    record: Literal["full", "metrics", "summary"] = "full"

    def config_hash(self) -> str:
        """Digest of everything except the seed."""
        body = self.model_dump(mode="json", exclude={"seed"})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: Union[dict, str]) -> RunConfig:
    try:
        if isinstance(data, str):
            return RunConfig.model_validate_json(data)
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def build_market(cfg: MarketConfig, base_dir: Optional[Path] = None) -> Market:
    if cfg.file is not None:
        path = Path(cfg.file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            market = Market.load(path)
        except OSError as exc:
            raise ConfigError(f"cannot read market file: {exc}") from None
    elif cfg.generator == "hierarchical":
        market = gen_hierarchical(cfg.n, cfg.seed, cfg.min_gap)
    elif cfg.generator == "general":
        market = gen_general(cfg.n, cfg.seed, cfg.min_gap)
    else:
        market = example1_market(cfg.eps)[0]
    if cfg.reward is not None:
        market = market.with_rewards(RewardDist(cfg.reward.kind, cfg.reward.concentration))
    return market


def build_schedule(cfg: ScheduleConfig, market: Market, horizon: int) -> ScheduleSpec:
    c = cfg.c
    if cfg.kind == "theorem3" and cfg.M is None and c is None:
        c = market.hierarchical_c() if is_hierarchical(market) else market.local_c()
    return ScheduleSpec(
        kind=cfg.kind,
        n=market.n,
        c=c,
        horizon=horizon,
        M=cfg.M,
        alpha=cfg.alpha,
        beta=cfg.beta,
        eta_scale=cfg.eta_scale,
        gamma_scale=cfg.gamma_scale,
    )


# ================================================================ random streams

class Streams:
    """Independent generators per (replication, man): actions, rewards, episode choices."""

    def __init__(self, seed: int, replications: int, n: int):
        self.act, self.reward, self.episode, self.init = [], [], [], []
        for rep in np.random.SeedSequence(seed).spawn(replications):
            men = rep.spawn(n + 1)
            self.init.append(np.random.default_rng(men[n]))
            kids = [m.spawn(3) for m in men[:n]]
            self.act.append([np.random.default_rng(k[0]) for k in kids])
            self.reward.append([np.random.default_rng(k[1]) for k in kids])
            self.episode.append([np.random.default_rng(k[2]) for k in kids])

    def uniforms(self, length: int) -> np.ndarray:
        """Shape (R, n, length)."""
        return np.array([[g.random(length) for g in row] for row in self.act])

    def reward_table(self, market: Market, length: int) -> np.ndarray:
        """Shape (R, n, n, length): a pre-drawn reward for every (man, woman, round)."""
        return np.array(
            [[market.reward_dist.sample(g, market.mu[m], length) for m, g in enumerate(row)] for row in self.reward]
        )


# ================================================================ trajectories

def doubling_checkpoints(T: int) -> list[int]:
    points, t = [], T
    while t >= 1:
        points.append(t)
        t //= 2
    return sorted(points)


def last_decade_length(T: int) -> int:
    return max(1, T // 10)


@dataclass
class Trajectory:
    replication: int
    n: int
    T: int
    regret_final: int
    stability_last_decade: float
    checkpoints: dict
    proposals: Optional[np.ndarray] = None
    accepted: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    waitlist: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    regret: Optional[np.ndarray] = None
    stable: Optional[np.ndarray] = None
    distance: Optional[np.ndarray] = None
    final_profile: Optional[np.ndarray] = None
    final_scores: Optional[np.ndarray] = None
    baseline_history: Optional[np.ndarray] = None
    episode_log: list = field(default_factory=list)

    @property
    def rounds(self) -> list[RoundOutcome]:
        if self.proposals is None:
            raise ValueError("per-round outcomes were not recorded (record='full' keeps them)")
        out = []
        for t in range(self.T):
            rewards = {m: float(self.rewards[t, m]) for m in range(self.n) if self.accepted[t, m]}
            wait = tuple(int(k) for k in self.waitlist[t]) if self.waitlist is not None else None
            out.append(RoundOutcome(tuple(int(w) for w in self.proposals[t]), tuple(bool(a) for a in self.accepted[t]), rewards, wait))
        return out

    def write_csv(self, path) -> None:
        if self.proposals is None:
            raise ValueError("trajectory CSVs need record='full'")
        n = self.n
        header = ["t"] + [f"proposal_m{m}" for m in range(n)] + [f"accepted_m{m}" for m in range(n)]
        header += [f"reward_m{m}" for m in range(n)]
        if self.waitlist is not None:
            header += [f"waitlist_m{m}" for m in range(n)]
        per_man_gamma = self.gamma is not None and not np.all(self.gamma == self.gamma[:, :1])
        header += ["regret", "eta"] + ([f"gamma_m{m}" for m in range(n)] if per_man_gamma else ["gamma"])

        def num(v) -> str:
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))

        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for t in range(self.T):
                row = [t + 1, *self.proposals[t].tolist(), *self.accepted[t].astype(int).tolist()]
                row += [num(r) for r in self.rewards[t].tolist()]
                if self.waitlist is not None:
                    row += self.waitlist[t].tolist()
                row += [int(self.regret[t]), num(self.eta[t]) if self.eta is not None else ""]
                if self.gamma is None:
                    row.append("")
                elif per_man_gamma:
                    row += [num(g) for g in self.gamma[t].tolist()]
                else:
                    row.append(num(self.gamma[t, 0]))
                out.writerow(row)


def stable_flags(market: Market, proposals) -> np.ndarray:
    """Whether each proposal profile (..., n) is a perfect matching with no blocking pair."""
    a = np.asarray(proposals, dtype=np.int64)
    n = market.n
    valid = np.all(a != SINK, axis=-1)
    a0 = np.where(a == SINK, 0, a)
    onehot = a0[..., :, None] == np.arange(n)
    valid &= np.all(onehot.sum(axis=-2) == 1, axis=-1)
    partner = np.argmax(onehot, axis=-2)  # partner[..., w] = man proposing to w
    mine = market.mu[np.arange(n), a0]  # (..., n)
    better = market.mu > mine[..., :, None]  # m prefers w to his partner
    her_rank_of_m = market.rank_of.T  # [m, w]
    her_rank_of_partner = market.rank_of[np.arange(n), partner]  # [..., w]
    blocking = better & (her_rank_of_m < her_rank_of_partner[..., None, :])
    return valid & ~np.any(blocking, axis=(-2, -1))


def _pure_distance(proposals, perms: np.ndarray) -> np.ndarray:
    """L1 distance from each pure profile (..., n) to the nearest matching in ``perms`` (S, n)."""
    a = np.asarray(proposals)[..., None, :]
    per_man = np.where(a == perms, 0.0, np.where(a == SINK, 1.0, 2.0))
    return per_man.sum(axis=-1).min(axis=-1)


def _mixed_distance(x, perms: np.ndarray) -> np.ndarray:
    """L1 distance from stacked mixed profiles (..., n, n) to the nearest matching profile."""
    n = x.shape[-1]
    hit = x[..., np.arange(n)[None, :], perms]  # (..., S, n)
    return (2.0 * (1.0 - hit)).sum(axis=-1).min(axis=-1)


class _Recorder:
    def __init__(self, market: Market, R: int, T: int, record: str, waiting_list: bool):
        self.market, self.R, self.T, self.record = market, R, T, record
        n = market.n
        self.perms = (
            np.array(enumerate_stable_matchings(market), dtype=np.int64).reshape(-1, n)
            if n <= MAX_ENUMERATION_N
            else None
        )
        self.running = np.zeros(R, dtype=np.int64)
        self.decade_hits = np.zeros(R, dtype=np.int64)
        self.decade_from = T - last_decade_length(T) + 1
        self.checkpoints = doubling_checkpoints(T)
        self.at_checkpoint = {c: np.zeros(R, dtype=np.int64) for c in self.checkpoints}
        full = record == "full"
        keep = record in ("full", "metrics")
        self.proposals = np.empty((R, T, n), dtype=np.int16) if full else None
        self.accepted = np.empty((R, T, n), dtype=bool) if full else None
        self.rewards = np.empty((R, T, n)) if full else None
        self.waitlist = np.empty((R, T, n), dtype=np.int16) if full and waiting_list else None
        self.eta = np.full(T, np.nan) if full else None
        self.gamma = np.full((T, n), np.nan) if full else None
        self.regret = np.empty((R, T), dtype=np.int64) if keep else None
        self.stable = np.empty((R, T), dtype=bool) if keep else None
        self.distance = np.full((R, T), np.nan) if keep else None

    def add(self, t0, proposals, accepted, rewards, ahead, eta=None, gamma=None, distance=None):
        """Record rounds t0 .. t0+L-1; array arguments are (R, L, n)."""
        L = proposals.shape[1]
        sl = slice(t0 - 1, t0 - 1 + L)
        stable = stable_flags(self.market, proposals)
        regret = self.running[:, None] + np.cumsum(~stable, axis=1)
        self.running = regret[:, -1].copy()
        times = np.arange(t0, t0 + L)
        self.decade_hits += stable[:, times >= self.decade_from].sum(axis=1)
        for c in self.checkpoints:
            if t0 <= c < t0 + L:
                self.at_checkpoint[c] = regret[:, c - t0].copy()
        if distance is None and self.perms is not None and self.distance is not None:
            distance = _pure_distance(proposals, self.perms)
        if self.proposals is not None:
            self.proposals[:, sl] = proposals
            self.accepted[:, sl] = accepted
            self.rewards[:, sl] = np.where(accepted, rewards, np.nan)
            if self.waitlist is not None:
                self.waitlist[:, sl] = ahead
            if eta is not None:
                self.eta[sl] = eta
            if gamma is not None:
                self.gamma[sl] = gamma
        if self.regret is not None:
            self.regret[:, sl] = regret
            self.stable[:, sl] = stable
            if distance is not None:
                self.distance[:, sl] = distance

    def trajectories(self) -> list[Trajectory]:
        out = []
        for r in range(self.R):
            pick = lambda arr: None if arr is None else arr[r]  # noqa: E731
            out.append(
                Trajectory(
                    replication=r,
                    n=self.market.n,
                    T=self.T,
                    regret_final=int(self.running[r]),
                    stability_last_decade=float(self.decade_hits[r] / last_decade_length(self.T)),
                    checkpoints={c: int(v[r]) for c, v in self.at_checkpoint.items()},
                    proposals=pick(self.proposals),
                    accepted=pick(self.accepted),
                    rewards=pick(self.rewards),
                    waitlist=pick(self.waitlist),
                    eta=self.eta,
                    gamma=self.gamma,
                    regret=pick(self.regret),
                    stable=pick(self.stable),
                    distance=pick(self.distance),
                )
            )
        return out


def _gather_rewards(table, proposals, col):
    """table (R, n, n, L), proposals (R, n) for round column col -> (R, n)."""
    R, n = proposals.shape
    a = np.where(proposals == SINK, 0, proposals)
    return table[np.arange(R)[:, None], np.arange(n)[None, :], a, col]


# ================================================================ learners

def _run_exp(market, cfg: RunConfig, streams: Streams, rec: _Recorder, R: int, T: int):
    n = market.n
    sched = build_schedule(cfg.learner.schedule, market, T)
    adaptive = sched.kind == "adaptive"
    L = np.zeros((R, n, n))
    N = np.zeros((R, n, n), dtype=np.int64)
    Msum = np.zeros((R, n, n))
    rows, men = np.arange(R)[:, None], np.arange(n)[None, :]
    for start in range(1, T + 1, BLOCK):
        length = min(BLOCK, T - start + 1)
        U = streams.uniforms(length)
        table = streams.reward_table(market, length)
        props = np.empty((R, length, n), dtype=np.int64)
        acc = np.empty((R, length, n), dtype=bool)
        rew = np.empty((R, length, n))
        ahead_b = np.empty((R, length, n), dtype=np.int64)
        etas = np.empty(length)
        gammas = np.empty((length, n))
        dist = np.full((R, length), np.nan)
        for i in range(length):
            t = start + i
            eta = sched.eta(t)
            if adaptive:
                gamma = _adaptive_gamma(sched, N, Msum, t)
            else:
                gamma = sched.gamma(t)
            x_hat = adjust(logit(L, eta), gamma, n)
            a = sample_index(x_hat, U[:, :, i])
            accepted, ahead = resolve_proposals(market, a)
            reward = np.where(accepted, table[rows, men, a, i], 0.0)
            x_aw = np.take_along_axis(x_hat, a[..., None], axis=-1)[..., 0]
            L += make_estimate(n, a, accepted, reward, x_aw)
            if adaptive:
                hit = accepted[..., None] & (a[..., None] == np.arange(n))
                N += hit
                Msum += hit * reward[..., None]
            props[:, i], acc[:, i], rew[:, i], ahead_b[:, i] = a, accepted, reward, ahead
            etas[i] = eta
            gammas[i] = np.mean(gamma, axis=0) if np.ndim(gamma) else gamma
            if rec.perms is not None and rec.distance is not None:
                dist[:, i] = _mixed_distance(x_hat, rec.perms)
        rec.add(start, props, acc, rew, ahead_b, etas, gammas, dist)
    final = adjust(logit(L, sched.eta(T + 1)), _final_gamma(sched, N, Msum, T + 1, adaptive), n)
    return {"final_profile": final, "final_scores": L}


def _adaptive_gamma(sched: ScheduleSpec, N, Msum, t) -> np.ndarray:
    """Per (replication, man) mixing rate driven by each man's own gap estimate."""
    gap = estimated_gaps(N, Msum, t).min(axis=-1)
    means = np.where(N > 0, Msum / np.maximum(N, 1), 0.0).max(axis=-1)
    c = np.minimum(gap, means) / 8.0
    fallback = min(GAMMA_CAP, math.log(max(t, 2)) / math.sqrt(t))
    with np.errstate(divide="ignore"):
        informed = 4.0 * sched.n / np.where(c > 0, c, 1.0) * math.log(max(sched.horizon, 2)) * math.log(max(t, 2)) / t
    return np.where(gap > 0, np.minimum(informed, GAMMA_CAP), fallback)


def _final_gamma(sched, N, Msum, t, adaptive):
    return _adaptive_gamma(sched, N, Msum, t) if adaptive else sched.gamma(t)


def _resolve_tau(tc, n: int) -> np.ndarray:
    if tc.tau is None:
        if tc.eps <= 0:
            raise ConfigError("trial.tau is required when eps = 0")
        return np.full(n, 200 * n * n * math.ceil(1.0 / tc.eps), dtype=np.int64)
    tau = np.atleast_1d(np.asarray(tc.tau, dtype=np.int64))
    if tau.size == 1:
        tau = np.full(n, int(tau[0]), dtype=np.int64)
    if tau.shape != (n,) or np.any(tau < 1):
        raise ConfigError(f"trial.tau must be a positive integer or a list of {n} of them")
    return tau


def check_trial_config(tc: TrialConfig, market: Market) -> None:
    if tc.mode != "theorem6":
        return
    gap = market.gap
    if not tc.delta < gap:
        raise ConfigError(f"trial.delta={tc.delta} must lie below the preference gap {gap:.6g}")
    bound = theorem6_eps_bound(market.n, tc.p, tc.delta, gap)
    if tc.eps > bound or tc.eps <= 0:
        raise ConfigError(f"trial.eps={tc.eps} must lie in (0, {bound:.6g}] for p={tc.p}")
    if tc.omega <= 0:
        raise ConfigError("trial.omega must be positive")


def _baseline_utilities(market: Market, baseline: np.ndarray, m: int) -> np.ndarray:
    """u_m(w, b_-m) for every w: what man m would earn against the others' baselines."""
    n = market.n
    out = np.empty(n)
    for w in range(n):
        a = baseline.copy()
        a[m] = w
        accepted, _ = resolve_proposals(market, a)
        out[w] = market.mu[m, w] if accepted[m] else 0.0
    return out


def _run_trial(market, cfg: RunConfig, streams: Streams, rec: _Recorder, R: int, T: int):
    tc = cfg.learner.trial
    n = market.n
    check_trial_config(tc, market)
    tau = _resolve_tau(tc, n)
    if tc.initial is not None:
        if len(tc.initial) != n or any(not 0 <= w < n for w in tc.initial):
            raise ConfigError(f"trial.initial must list {n} woman indices")
        baseline = np.tile(np.asarray(tc.initial, dtype=np.int64), (R, 1))
    else:
        baseline = np.array([[int(g.integers(n)) for g in row] for row in streams.episode])
    sums = np.zeros((R, n, n))
    counts = np.zeros((R, n, n), dtype=np.int64)
    history, logs = [], [[] for _ in range(R)]
    episode_no = np.zeros(n, dtype=np.int64)
    rows, men = np.arange(R)[:, None, None], np.arange(n)[None, None, :]
    t = 1
    while t <= T:
        next_end = ((t - 1) // tau + 1) * tau  # each man's next episode boundary
        end = int(min(T, next_end.min(), t + MAX_CHUNK - 1))
        length = end - t + 1
        U = streams.uniforms(length)
        table = streams.reward_table(market, length)
        props = trial_action(baseline[:, :, None], tc.eps, n, U).transpose(0, 2, 1)
        accepted, ahead = resolve_proposals(market, props)
        cols = np.arange(length)[None, :, None]
        reward = np.where(accepted, table[rows, men, props, cols], 0.0)
        onehot = props[..., None] == np.arange(n)
        counts += onehot.sum(axis=1)
        sums += (onehot * reward[..., None]).sum(axis=1)
        rec.add(t, props, accepted, reward, ahead)
        closing = np.flatnonzero(end % tau == 0)
        if closing.size:
            before = baseline.copy()
            for m in closing:
                for r in range(R):
                    if tc.diagnostics:
                        truth = _baseline_utilities(market, before[r], m)
                        with np.errstate(invalid="ignore", divide="ignore"):
                            est = np.where(counts[r, m] > 0, sums[r, m] / np.maximum(counts[r, m], 1), np.nan)
                        logs[r].append(
                            {
                                "t": end,
                                "man": int(m),
                                "episode": int(episode_no[m]),
                                "baseline": int(before[r, m]),
                                "utilities": est.tolist(),
                                "counts": counts[r, m].tolist(),
                                "true_utilities": truth.tolist(),
                                "max_abs_error": float(np.nanmax(np.abs(est - truth))),
                            }
                        )
                    baseline[r, m] = choose_baseline(
                        sums[r, m], counts[r, m], int(before[r, m]), tc.delta, tc.omega, streams.episode[r][m]
                    )
                sums[:, m] = 0.0
                counts[:, m] = 0
                episode_no[m] += 1
            history.append(baseline.copy())
        t = end + 1
    hist = np.stack(history, axis=1) if history else np.empty((R, 0, n), dtype=np.int64)
    return {"final_profile": baseline, "baseline_history": hist, "episode_log": logs}


def _run_best_response(market, cfg: RunConfig, streams: Streams, rec: _Recorder, R: int, T: int):
    bc = cfg.learner.best_response
    n = market.n
    start = np.full(n, SINK, dtype=np.int64) if bc.start is None else np.asarray(bc.start, dtype=np.int64)
    if start.shape != (n,) or np.any((start < SINK) | (start >= n)):
        raise ConfigError(f"best_response.start must list {n} woman indices or -1")
    if not is_good_state(market, start):
        raise ConfigError("best_response.start is not a good state")
    state = np.tile(start, (R, 1))
    settled = np.zeros(R, dtype=bool)
    for begin in range(1, T + 1, BLOCK):
        length = min(BLOCK, T - begin + 1)
        table = streams.reward_table(market, length)
        props = np.empty((R, length, n), dtype=np.int64)
        for r in range(R):
            for i in range(length):
                props[r, i] = state[r]
                if settled[r]:
                    props[r, i:] = state[r]
                    break
                todo = unsatisfied(market, state[r])
                if todo.size == 0:
                    settled[r] = True
                    continue
                v = gradient_matrix(market, actions_to_profile(state[r], n))
                movers = _select_updaters(bc.updaters, todo, streams.act[r][0])
                state[r, movers] = np.argmax(v[movers], axis=1)
        accepted, ahead = resolve_proposals(market, props)
        safe = np.where(props == SINK, 0, props)
        reward = np.where(
            accepted,
            table[np.arange(R)[:, None, None], np.arange(n)[None, None, :], safe, np.arange(length)[None, :, None]],
            0.0,
        )
        rec.add(begin, props, accepted, reward, ahead)
    return {"final_profile": state}


def _run_monotone(market, cfg: RunConfig, streams: Streams, rec: _Recorder, R: int, T: int):
    mc = cfg.learner.monotone
    n = market.n
    game = RegularizedGame(market, n * market.mu_max if mc.beta is None else mc.beta)
    step = max_safe_step(game) if mc.step is None else mc.step
    if step > max_safe_step(game):
        raise ConfigError(f"monotone.step must not exceed {max_safe_step(game):.6g}")
    if not game.certified_monotone:
        warnings.warn("monotone.beta is below the monotonicity threshold", stacklevel=2)
    x = np.full((n, n), 1.0 / n)
    for begin in range(1, T + 1, BLOCK):
        length = min(BLOCK, T - begin + 1)
        U = streams.uniforms(length)
        table = streams.reward_table(market, length)
        xs = np.empty((length, n, n))
        for i in range(length):
            xs[i] = x
            x = pg_step(game, x, step)
        props = sample_index(xs[None], U.transpose(0, 2, 1))  # (R, L, n)
        accepted, ahead = resolve_proposals(market, props)
        reward = np.where(
            accepted,
            table[np.arange(R)[:, None, None], np.arange(n)[None, None, :], props, np.arange(length)[None, :, None]],
            0.0,
        )
        dist = None
        if rec.perms is not None:
            dist = np.broadcast_to(_mixed_distance(xs, rec.perms), (R, length))
        rec.add(begin, props, accepted, reward, ahead, np.full(length, step), None, dist)
    return {"final_profile": np.broadcast_to(x, (R, n, n)).copy()}


_LEARNERS = {
    "exp": _run_exp,
    "trial": _run_trial,
    "best-response": _run_best_response,
    "monotone": _run_monotone,
}


def run(config: RunConfig, market: Optional[Market] = None, base_dir: Optional[Path] = None) -> list[Trajectory]:
    """Simulate ``config.replications`` independent runs; the seed must be set."""
    if config.seed is None:
        raise ConfigError("run needs a master seed")
    market = market if market is not None else build_market(config.market, base_dir)
    R, T = config.replications, config.horizon
    streams = Streams(config.seed, R, market.n)
    rec = _Recorder(market, R, T, config.record, config.feedback == "waiting-list")
    extra = _LEARNERS[config.learner.kind](market, config, streams, rec, R, T)
    trajectories = rec.trajectories()
    for r, tr in enumerate(trajectories):
        tr.final_profile = np.asarray(extra["final_profile"][r])
        if "final_scores" in extra:
            tr.final_scores = extra["final_scores"][r]
        if "baseline_history" in extra:
            tr.baseline_history = extra["baseline_history"][r]
            tr.episode_log = extra["episode_log"][r]
    return trajectories


# ================================================================ summaries

def regret_log_fit(checkpoints: dict) -> float:
    """Least-squares slope of mean regret against log t over the doubling checkpoints (t >= 2)."""
    ts = np.array([t for t in checkpoints if t >= 2], dtype=float)
    if ts.size < 2:
        return float("nan")
    ys = np.array([checkpoints[int(t)] for t in ts], dtype=float)
    return float(np.polyfit(np.log(ts), ys, 1)[0])


def summarize(config: RunConfig, trajectories: list[Trajectory], market: Market) -> dict:
    T = config.horizon
    mean_cp = {t: float(np.mean([tr.checkpoints[t] for tr in trajectories])) for t in trajectories[0].checkpoints}
    per_log = {str(t): v / math.log(t) for t, v in mean_cp.items() if t >= 2}
    summary = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "n": market.n,
        "T": T,
        "learner": config.learner.kind,
        "replications": len(trajectories),
        "hierarchical": is_hierarchical(market),
        "regret_final": float(np.mean([tr.regret_final for tr in trajectories])),
        "regret_per_logT_fit": regret_log_fit(mean_cp),
        "regret_per_logT_checkpoints": per_log,
        "stability_rate_last_decade": float(np.mean([tr.stability_last_decade for tr in trajectories])),
        "stability_rate_per_replication": [tr.stability_last_decade for tr in trajectories],
        "envelope_violation_fraction": None,
        "reward_second_moment_bound": market.reward_dist.variance_bound(market.mu),
    }
    return summary


# ================================================================ local convergence probe

def first_local_time(schedule: ScheduleSpec, c: float, n: int, limit: int = 10**18) -> int:
    """Smallest t with 1/eta(t+1) - 1/eta(t) <= c / (ln(n^2 / (2c)) + 3).

    Assumes the increments of 1/eta are nonincreasing, as they are for
    eta = t^-alpha with alpha <= 1.
    """
    bound = c / (math.log(n * n / (2.0 * c)) + 3.0)

    def ok(t: int) -> bool:
        return 1.0 / schedule.eta(t + 1) - 1.0 / schedule.eta(t) <= bound

    if ok(1):
        return 1
    hi = 2
    while not ok(hi):
        hi *= 2
        if hi > limit:
            raise ValueError("schedule never satisfies the local step condition")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


@dataclass
class ProbeReport:
    c: float
    t0: int
    radius: float
    T: int
    initial_distance: np.ndarray
    violated: np.ndarray
    violated_alt: np.ndarray
    final_distance: np.ndarray
    max_ratio: np.ndarray
    log_distance_slope: float

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.violated))

    @property
    def alt_violation_fraction(self) -> float:
        return float(np.mean(self.violated_alt))

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "t0": self.t0,
            "radius": self.radius,
            "T": self.T,
            "replications": int(self.violated.size),
            "envelope_violation_fraction": self.violation_fraction,
            "alt_envelope_violation_fraction": self.alt_violation_fraction,
            "max_distance_to_envelope_ratio": float(self.max_ratio.max()),
            "mean_initial_distance": float(self.initial_distance.mean()),
            "mean_final_distance": float(self.final_distance.mean()),
            "log_distance_slope": self.log_distance_slope,
        }


def local_convergence_probe(
    market: Market,
    x_star,
    radius: Optional[float] = None,
    schedule: Optional[ScheduleSpec] = None,
    T: int = 5000,
    replications: int = 100,
    seed: int = 0,
    c: Optional[float] = None,
    t0: Optional[int] = None,
) -> ProbeReport:
    """Start every man within ``radius`` (L1, stacked) of a pure equilibrium at round t0 and
    track the distance of the logit strategy against the envelope 41 n exp(-c t eta(t+1))."""
    n = market.n
    star = np.asarray(x_star, dtype=np.int64)
    if n < 2:
        raise MarketError("the probe needs n >= 2")
    if star.shape != (n,) or np.any(star < 0):
        raise MarketError("x_star must be a full pure profile")
    if not is_pure_ne_actions(market, star).certified:
        raise MarketError("x_star is not a pure equilibrium")
    c = market.local_c() if c is None else c
    limit = c / (250.0 * n * n)
    radius = limit if radius is None else radius
    if radius > limit:
        warnings.warn(f"radius {radius:g} exceeds c/(250 n^2) = {limit:g}", stacklevel=2)
    schedule = schedule or local_schedule(n)
    t0 = first_local_time(schedule, c, n) if t0 is None else t0

    R = replications
    streams = Streams(seed, R, n)
    target = actions_to_profile(star, n)
    x0 = np.empty((R, n, n))
    for r, g in enumerate(streams.init):
        for m in range(n):
            off = radius / (2 * n) * g.random()
            row = np.zeros(n)
            row[np.arange(n) != star[m]] = g.dirichlet(np.ones(n - 1)) * off
            row[star[m]] = 1.0 - off
            x0[r, m] = row
    with np.errstate(divide="ignore"):
        L = np.log(x0) / schedule.eta(t0)
    violated = np.zeros(R, dtype=bool)
    violated_alt = np.zeros(R, dtype=bool)
    max_ratio = np.zeros(R)
    mean_log = np.empty(T)
    d = np.zeros(R)
    rows, men = np.arange(R)[:, None], np.arange(n)[None, :]
    for start in range(0, T, BLOCK):
        length = min(BLOCK, T - start)
        U = streams.uniforms(length)
        table = streams.reward_table(market, length)
        for i in range(length):
            t = t0 + start + i
            x_hat = adjust(logit(L, schedule.eta(t)), schedule.gamma(t), n)
            a = sample_index(x_hat, U[:, :, i])
            accepted, _ = resolve_proposals(market, a)
            reward = np.where(accepted, table[rows, men, a, i], 0.0)
            x_aw = np.take_along_axis(x_hat, a[..., None], axis=-1)[..., 0]
            L += make_estimate(n, a, accepted, reward, x_aw)
            eta_next = schedule.eta(t + 1)
            d = np.abs(logit(L, eta_next) - target).sum(axis=(1, 2))
            envelope = 41.0 * n * math.exp(-c * t * eta_next)
            alt = 2.0 * n * math.exp(3.0 - c * t * eta_next)
            violated |= d > envelope
            violated_alt |= d > alt
            max_ratio = np.maximum(max_ratio, d / envelope)
            mean_log[start + i] = math.log(max(float(d.mean()), 1e-300))
    d0 = np.abs(x0 - target).sum(axis=(1, 2))
    ts = t0 + np.arange(T, dtype=float)
    slope = float(np.polyfit(ts**0.25 - ts[0] ** 0.25, mean_log, 1)[0]) if T > 1 else float("nan")
    return ProbeReport(c, t0, radius, T, d0, violated, violated_alt, d, max_ratio, slope)
