"""Baseline learners: sample experimentation, a confidence-bound gap oracle,
and complete-information best-response dynamics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .market import (
    SINK,
    Market,
    MarketError,
    actions_to_profile,
    gradient_matrix,
    potential,
    resolve_proposals,
)

SATISFACTION_TOL = 1e-12


# ------------------------------------------------------------ sample experimentation

@dataclass
class TrialLearnerState:
    m: int
    n: int
    baseline: int
    tau: int
    eps: float
    delta: float
    omega: float
    episode: int = 0
    sums: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        if not 0 <= self.eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        if not 0 <= self.omega < 1:
            raise ValueError("omega must lie in [0, 1)")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.sums is None:
            self.sums = np.zeros(self.n)
        if self.counts is None:
            self.counts = np.zeros(self.n, dtype=np.int64)

    @property
    def rounds_in_episode(self) -> int:
        return int(self.counts.sum())


def trial_action(baseline, eps, n: int, u):
    """Baseline when u >= eps, otherwise woman floor(u / eps * n).

    A single uniform draw thus gives the baseline w.p. 1 - eps and each woman
    (the baseline included) w.p. eps / n.  Broadcasts over arrays.
    """
    u = np.asarray(u, dtype=float)
    eps = np.asarray(eps, dtype=float)
    explore = u < eps
    pick = np.floor(np.divide(u, eps, out=np.zeros_like(u), where=explore) * n).astype(np.int64)
    return np.where(explore, np.minimum(pick, n - 1), baseline)


def trial_act(state: TrialLearnerState, rng: np.random.Generator) -> int:
    return int(trial_action(state.baseline, state.eps, state.n, rng.random()))


def trial_record(state: TrialLearnerState, w: int, accepted: bool, reward: float) -> TrialLearnerState:
    # rejected plays count toward n^s with zero utility
    state.counts[w] += 1
    if accepted:
        state.sums[w] += reward
    return state


def episode_utilities(sums, counts) -> np.ndarray:
    """Average realized utility per woman; -inf where she was never played."""
    counts = np.asarray(counts)
    return np.where(counts > 0, np.asarray(sums, dtype=float) / np.maximum(counts, 1), -np.inf)


def improving_set(sums, counts, baseline: int, delta: float) -> np.ndarray:
    util = episode_utilities(sums, counts)
    return np.flatnonzero((np.asarray(counts) > 0) & (util >= util[baseline] + delta))


def choose_baseline(sums, counts, baseline: int, delta: float, omega: float, rng: np.random.Generator) -> int:
    candidates = improving_set(sums, counts, baseline, delta)
    if candidates.size == 0:
        return baseline
    w = int(candidates[rng.integers(candidates.size)])
    return w if rng.random() < 1.0 - omega else baseline


def trial_end_episode(state: TrialLearnerState, rng: np.random.Generator) -> TrialLearnerState:
    if state.rounds_in_episode != state.tau:
        raise ValueError(f"episode holds {state.rounds_in_episode} rounds, expected {state.tau}")
    state.baseline = choose_baseline(state.sums, state.counts, state.baseline, state.delta, state.omega, rng)
    state.sums = np.zeros(state.n)
    state.counts = np.zeros(state.n, dtype=np.int64)
    state.episode += 1
    return state


def theorem6_eps_bound(n: int, p: float, delta: float, gap: float) -> float:
    """Largest exploration rate allowed by min{(1-p)/n, delta/(4n), (gap-delta)/(4n)}."""
    return min((1 - p) / n, delta / (4 * n), (gap - delta) / (4 * n))


# ------------------------------------------------------------ confidence-bound gap oracle

@dataclass
class UcbState:
    n: int
    N: np.ndarray = None
    Msum: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.N is None:
            self.N = np.zeros(self.n, dtype=np.int64)
        if self.Msum is None:
            self.Msum = np.zeros(self.n)

    def means(self) -> np.ndarray:
        return np.where(self.N > 0, self.Msum / np.maximum(self.N, 1), np.nan)


def ucb_update(state: UcbState, w: int, matched: bool, reward: float) -> UcbState:
    state.t += 1
    if matched:
        state.N[w] += 1
        state.Msum[w] += reward
    return state


def confidence_bounds(N, Msum, t) -> tuple[np.ndarray, np.ndarray]:
    """Clipped upper and lower confidence bounds; unmatched pairs get [0, 1].

    Works on stacked counters of shape (..., n).
    """
    N = np.asarray(N)
    seen = N > 0
    mean = np.where(seen, np.asarray(Msum, dtype=float) / np.maximum(N, 1), 0.0)
    width = np.sqrt(2.0 * math.log(max(t, 1)) / np.maximum(N, 1))
    upper = np.where(seen, np.minimum(1.0, mean + width), 1.0)
    lower = np.where(seen, np.maximum(0.0, mean - width), 0.0)
    return upper, lower


def estimated_gaps(N, Msum, t) -> np.ndarray:
    upper, lower = confidence_bounds(N, Msum, t)
    return np.maximum(0.0, lower - upper.min(axis=-1, keepdims=True))


def ucb_bounds(state: UcbState, t: int) -> tuple[np.ndarray, np.ndarray]:
    return confidence_bounds(state.N, state.Msum, t)


def ucb_arm_gaps(state: UcbState, t: int) -> np.ndarray:
    return estimated_gaps(state.N, state.Msum, t)


def ucb_gap(state: UcbState, t: int) -> float:
    # The arm with the smallest upper bound always scores zero here, so this
    # minimum is 0 by construction.  Kept as printed; see the README.
    return float(ucb_arm_gaps(state, t).min())


# ------------------------------------------------------------ best-response dynamics

def _values(market: Market, actions) -> np.ndarray:
    return gradient_matrix(market, actions_to_profile(actions, market.n))


def best_response(market: Market, actions, m: int) -> int:
    """Lowest-index maximizer of man m's payoff gradient against the others."""
    if not 0 <= m < market.n:
        raise IndexError(f"man index {m} out of range")
    return int(np.argmax(_values(market, actions)[m]))


def current_payoffs(market: Market, actions) -> np.ndarray:
    a = np.asarray(actions, dtype=np.int64)
    v = _values(market, a)
    return np.where(a == SINK, 0.0, v[np.arange(market.n), np.where(a == SINK, 0, a)])


def unsatisfied(market: Market, actions, tol: float = SATISFACTION_TOL) -> np.ndarray:
    """Men whose best response strictly improves on their current payoff."""
    v = _values(market, actions)
    return np.flatnonzero(v.max(axis=1) - current_payoffs(market, actions) > tol)


def matched_men(market: Market, actions) -> np.ndarray:
    accepted, _ = resolve_proposals(market, np.asarray(actions, dtype=np.int64))
    return np.flatnonzero(accepted)


def is_good_state(market: Market, actions, tol: float = SATISFACTION_TOL) -> bool:
    """Every matched man already plays a best response."""
    return not np.intersect1d(matched_men(market, actions), unsatisfied(market, actions, tol)).size


UpdaterPolicy = Union[str, Callable[[np.ndarray, np.random.Generator], Sequence[int]]]


def _select_updaters(policy: UpdaterPolicy, candidates: np.ndarray, rng) -> np.ndarray:
    if callable(policy):
        chosen = np.intersect1d(np.asarray(policy(candidates, rng), dtype=np.int64), candidates)
        if chosen.size == 0:
            raise ValueError("updater policy must pick at least one unsatisfied man")
        return chosen
    if policy == "all":
        return candidates
    if policy == "single":
        return candidates[:1]
    if policy == "random":
        mask = rng.random(candidates.size) < 0.5
        mask[rng.integers(candidates.size)] = True
        return candidates[mask]
    raise ValueError(f"unknown updater policy {policy!r}")


def best_response_path(
    market: Market,
    start,
    updaters: UpdaterPolicy = "all",
    rng: Optional[np.random.Generator] = None,
    lam=None,
) -> list[tuple]:
    """Simultaneous best responses of chosen unsatisfied men until none is left.

    Returns the visited profiles, start included; from a good state the
    encoded potential rises at every step and at most n^2 steps are taken.
    """
    a = np.asarray(start, dtype=np.int64).copy()
    if a.shape != (market.n,):
        raise MarketError("start must list one action per man")
    if not is_good_state(market, a):
        raise MarketError("best-response dynamics need a good starting state")
    rng = rng if rng is not None else np.random.default_rng(0)
    path = [tuple(int(w) for w in a)]
    limit = market.n**2
    while True:
        todo = unsatisfied(market, a)
        if todo.size == 0:
            return path
        if len(path) > limit:
            raise RuntimeError("best-response path exceeded n^2 steps")
        v = _values(market, a)
        movers = _select_updaters(updaters, todo, rng)
        a[movers] = np.argmax(v[movers], axis=1)
        path.append(tuple(int(w) for w in a))


def weak_acyclicity_witness(market: Market, start) -> list[tuple]:
    """Better-response path from any pure profile to a pure equilibrium.

    Matched men who can improve move one at a time (lowest index first) until
    the state is good; single-man best-response dynamics finish the job.
    """
    a = np.asarray(start, dtype=np.int64).copy()
    path = [tuple(int(w) for w in a)]
    while True:
        bad = np.intersect1d(matched_men(market, a), unsatisfied(market, a))
        if bad.size == 0:
            break
        m = int(bad[0])
        a[m] = best_response(market, a, m)
        path.append(tuple(int(w) for w in a))
    return path + best_response_path(market, a, updaters="single")[1:]


def potential_trace(market: Market, path, lam=None) -> np.ndarray:
    return np.array([potential(market, p, lam) for p in path])
