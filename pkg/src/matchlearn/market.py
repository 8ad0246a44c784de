"""Market instances, the stable matching game's payoffs, and stability predicates.

Men hold cardinal preferences ``mu[m, w]``; women hold strict rankings
``women_rank[w]`` listing men from most to least preferred.  Pure strategy
profiles are integer arrays ``actions[m] = w`` where ``SINK`` (-1) means man
``m`` makes no proposal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SINK = -1
SIMPLEX_TOL = 1e-12

Matching = tuple  # matching[m] = w, or SINK for an unmatched man


class MarketError(ValueError):
    """Raised when a market or profile violates its invariants."""


@dataclass(frozen=True)
class RewardDist:
    """Reward distribution family; every pair (m, w) uses mean ``mu[m, w]``.

    ``beta`` uses Beta(mu * concentration, (1 - mu) * concentration).
    """

    kind: str = "bernoulli"
    concentration: float = 20.0

    KINDS = ("bernoulli", "beta", "deterministic")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise MarketError(f"unknown reward kind {self.kind!r}; expected one of {self.KINDS}")
        if not self.concentration > 0:
            raise MarketError("beta concentration must be positive")

    def sample(self, rng: np.random.Generator, mean: np.ndarray, size: int) -> np.ndarray:
        """Draw ``size`` rewards for every entry of ``mean``; result has shape ``mean.shape + (size,)``."""
        mean = np.asarray(mean, dtype=float)
        shape = mean.shape + (size,)
        if self.kind == "deterministic":
            return np.broadcast_to(mean[..., None], shape).copy()
        if np.any(mean > 1.0):
            raise MarketError(f"{self.kind} rewards need mu <= 1; normalize the market first")
        if self.kind == "bernoulli":
            return (rng.random(shape) < mean[..., None]).astype(float)
        # mu == 1 degenerates to a point mass at 1
        m = np.minimum(mean, 1.0 - 1e-12)[..., None]
        k = self.concentration
        draws = rng.beta(np.broadcast_to(m * k, shape), np.broadcast_to((1.0 - m) * k, shape))
        return np.where(mean[..., None] >= 1.0, 1.0, draws)

    def variance_bound(self, mu: np.ndarray) -> float:
        """Largest second moment E[r^2] over the market (the sigma^2 of the estimator bound)."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "deterministic":
            return float(np.max(mu**2))
        if self.kind == "bernoulli":
            return float(np.max(mu))
        var = mu * (1 - mu) / (self.concentration + 1)
        return float(np.max(var + mu**2))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "concentration": self.concentration}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardDist":
        return cls(kind=d.get("kind", "bernoulli"), concentration=float(d.get("concentration", 20.0)))


@dataclass(frozen=True, eq=False)
class Market:
    mu: np.ndarray
    women_rank: np.ndarray
    reward_dist: RewardDist = field(default_factory=RewardDist)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        rank = np.array(self.women_rank, dtype=np.int64)
        if mu.ndim != 2 or mu.shape[0] != mu.shape[1] or mu.shape[0] < 1:
            raise MarketError(f"mu must be a non-empty square matrix, got shape {mu.shape}")
        n = mu.shape[0]
        if rank.shape != (n, n):
            raise MarketError(f"women_rank must be {n}x{n}, got {rank.shape}")
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            raise MarketError("every mu entry must be a finite positive real")
        for w in range(n):
            if sorted(rank[w].tolist()) != list(range(n)):
                raise MarketError(f"women_rank[{w}] is not a permutation of 0..{n - 1}")
        if n > 1 and _row_gap(mu) <= 0:
            raise MarketError("men's preferences must be tie-free")
        rank_of = np.empty((n, n), dtype=np.int64)
        for w in range(n):
            rank_of[w, rank[w]] = np.arange(n)
        for a in (mu, rank, rank_of):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "women_rank", rank)
        object.__setattr__(self, "rank_of", rank_of)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def gap(self) -> float:
        """Delta: smallest separation between two entries of the same man's row."""
        return _row_gap(self.mu) if self.n > 1 else float("inf")

    @property
    def mu_min(self) -> float:
        return float(self.mu.min())

    @property
    def mu_max(self) -> float:
        return float(self.mu.max())

    def prefers(self, w: int, m1: int, m2: int) -> bool:
        """True iff woman ``w`` strictly prefers ``m1`` to ``m2``."""
        return bool(self.rank_of[w, m1] < self.rank_of[w, m2])

    def hierarchical_c(self) -> float:
        """(1/8) min_k {Delta, mu[k, k]}, with men and women indexed in hierarchical order."""
        return min(self.gap, float(np.diag(self.mu).min())) / 8.0

    def local_c(self) -> float:
        """(1/8) min {Delta, mu_min}, the neighbourhood constant for general markets."""
        return min(self.gap, self.mu_min) / 8.0

    def normalized(self) -> "Market":
        return Market(self.mu / self.mu_max, self.women_rank, self.reward_dist)

    def with_rewards(self, reward_dist: RewardDist) -> "Market":
        return Market(self.mu, self.women_rank, reward_dist)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mu": self.mu.tolist(),
            "women_rank": self.women_rank.tolist(),
            "reward_dist": self.reward_dist.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Market":
        try:
            mu, rank = d["mu"], d["women_rank"]
        except KeyError as exc:
            raise MarketError(f"market document missing field {exc.args[0]!r}") from None
        market = cls(mu, rank, RewardDist.from_dict(d.get("reward_dist", {})))
        if "n" in d and int(d["n"]) != market.n:
            raise MarketError(f"field n={d['n']} disagrees with mu of size {market.n}")
        return market

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Market":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Market":
        return cls.from_json(Path(path).read_text())


def _row_gap(mu: np.ndarray) -> float:
    s = np.sort(mu, axis=1)
    return float(np.diff(s, axis=1).min())


def is_hierarchical(market: Market) -> bool:
    """Check the sequential preference condition in index order: m_k and w_k
    prefer each other to every partner of higher index."""
    n = market.n
    for k in range(n):
        for j in range(k + 1, n):
            if market.mu[k, k] <= market.mu[k, j]:
                return False
            if not market.prefers(k, k, j):
                return False
    return True


# ---------------------------------------------------------------- profiles

def check_profile(market: Market, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (market.n, market.n):
        raise MarketError(f"profile must be {market.n}x{market.n}, got {x.shape}")
    if np.any(x < 0) or np.any(np.abs(x.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise MarketError("every row of a mixed profile must lie on the probability simplex")
    return x


def actions_to_profile(actions: Sequence[int], n: int) -> np.ndarray:
    """0/1 matrix of a pure profile; a SINK row is all zeros."""
    x = np.zeros((len(actions), n))
    for m, w in enumerate(actions):
        if w != SINK:
            x[m, w] = 1.0
    return x


def profile_to_actions(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all((x == 0) | (x == 1)) or np.any(x.sum(axis=1) > 1):
        raise MarketError("profile is not pure")
    actions = np.full(x.shape[0], SINK, dtype=np.int64)
    rows, cols = np.nonzero(x)
    actions[rows] = cols
    return actions


def _check_man(market: Market, m: int) -> None:
    if not 0 <= m < market.n:
        raise IndexError(f"man index {m} out of range for n={market.n}")


def gradient_matrix(market: Market, x) -> np.ndarray:
    """v[m, w] = mu[m, w] * prod over men k ranked above m by w of (1 - x[k, w])."""
    x = np.asarray(x, dtype=float)
    v = np.empty_like(market.mu)
    for w in range(market.n):
        order = market.women_rank[w]
        free = np.cumprod(1.0 - x[order, w])
        v[order, w] = market.mu[order, w] * np.concatenate(([1.0], free[:-1]))
    return v


def gradient(market: Market, x, m: int) -> np.ndarray:
    _check_man(market, m)
    return gradient_matrix(market, x)[m]


def payoff(market: Market, x, m: int) -> float:
    """Expected matched utility of man ``m`` when everyone proposes independently."""
    _check_man(market, m)
    x = np.asarray(x, dtype=float)
    return float(x[m] @ gradient_matrix(market, x)[m])


def payoffs(market: Market, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.einsum("mw,mw->m", x, gradient_matrix(market, x))


# ---------------------------------------------------------------- stability

def _check_perfect(market: Market, matching: Sequence[int]) -> tuple:
    matching = tuple(int(w) for w in matching)
    if len(matching) != market.n or sorted(matching) != list(range(market.n)):
        raise MarketError(f"not a perfect matching: {matching}")
    return matching


def is_blocking_pair(market: Market, matching: Sequence[int], m: int, w: int) -> bool:
    matching = _check_perfect(market, matching)
    if matching[m] == w:
        return False
    partner = matching.index(w)
    return bool(market.mu[m, w] > market.mu[m, matching[m]] and market.prefers(w, m, partner))


def blocking_pairs(market: Market, matching: Sequence[int]) -> list[tuple[int, int]]:
    matching = _check_perfect(market, matching)
    return [
        (m, w)
        for m in range(market.n)
        for w in range(market.n)
        if is_blocking_pair(market, matching, m, w)
    ]


def is_stable(market: Market, matching: Sequence[int]) -> bool:
    return not blocking_pairs(market, matching)


def deferred_acceptance(market: Market) -> tuple:
    """Men-proposing Gale-Shapley; returns the men-optimal stable matching."""
    n = market.n
    prefs = np.argsort(-market.mu, axis=1, kind="stable")
    next_choice = [0] * n
    holder = [SINK] * n  # holder[w] = man currently held by w
    free = list(range(n))
    while free:
        m = free.pop()
        w = int(prefs[m, next_choice[m]])
        next_choice[m] += 1
        current = holder[w]
        if current == SINK:
            holder[w] = m
        elif market.prefers(w, m, current):
            holder[w] = m
            free.append(current)
        else:
            free.append(m)
    matching = [SINK] * n
    for w, m in enumerate(holder):
        matching[m] = w
    return tuple(matching)


# ---------------------------------------------------------------- acceptance

def resolve_proposals(market: Market, proposals) -> tuple[np.ndarray, np.ndarray]:
    """Women keep their most preferred proposer and reject the rest.

    ``proposals`` has shape (..., n) with SINK allowed.  Returns
    ``(accepted, ahead)`` where ``ahead[..., m]`` counts proposers to m's
    target that the woman ranks strictly above m.
    """
    p = np.asarray(proposals, dtype=np.int64)
    n = market.n
    active = p != SINK
    target = np.where(active, p, 0)
    ranks = market.rank_of[target]  # [..., m, k]: rank of k by m's target
    own = np.diagonal(ranks, axis1=-2, axis2=-1)
    same = (p[..., :, None] == p[..., None, :]) & active[..., None, :]
    ahead = np.sum(same & (ranks < own[..., None]), axis=-1)
    ahead = np.where(active, ahead, 0)
    accepted = active & (ahead == 0)
    assert accepted.shape[-1] == n
    return accepted, ahead


def matched_pairs(proposals, accepted) -> tuple:
    return tuple(int(w) if a else SINK for w, a in zip(proposals, accepted))


# ---------------------------------------------------------------- potential

def default_lambda(market: Market) -> np.ndarray:
    """lam[w, m] = (n - rank of m by w) / n: an order-consistent cardinal encoding."""
    return (market.n - market.rank_of) / market.n


def check_lambda(market: Market, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (market.n, market.n) or np.any(lam <= 0):
        raise MarketError("lambda must be an n x n matrix of positive reals")
    for w in range(market.n):
        if np.any(np.diff(lam[w, market.women_rank[w]]) >= 0):
            raise MarketError(f"lambda row {w} disagrees with woman {w}'s ranking")
    return lam


def potential(market: Market, actions, lam=None) -> float:
    """Sum over women of the encoded value of their best current proposer (0 if none)."""
    a = np.asarray(actions)
    if a.ndim == 2:
        a = profile_to_actions(a)
    lam = default_lambda(market) if lam is None else check_lambda(market, lam)
    accepted, _ = resolve_proposals(market, a)
    return float(sum(lam[a[m], m] for m in range(market.n) if accepted[m]))


def stable_matchings_codes(matchings: Iterable[Sequence[int]], n: int) -> np.ndarray:
    """Encode matchings as base-n integers for fast membership tests."""
    weights = n ** np.arange(n)[::-1]
    return np.array([int(np.dot(mt, weights)) for mt in matchings], dtype=np.int64)
