"""Exhaustive oracles and Nash equilibrium certificates for the stable matching game."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .market import (
    SINK,
    Market,
    MarketError,
    actions_to_profile,
    check_profile,
    gradient_matrix,
    is_stable,
    payoffs,
    profile_to_actions,
)

MAX_ENUMERATION_N = 8
SUPPORT_THRESHOLD = 1e-9
DEFAULT_TOL = 1e-9


@dataclass
class NECertificate:
    profile: np.ndarray
    kind: str  # "pure" | "mixed"
    max_violation: float
    tol: float = DEFAULT_TOL
    support_graph: list[tuple[int, int]] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.max_violation <= self.tol

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "certified": self.certified,
            "max_violation": self.max_violation,
            "tol": self.tol,
            "support_graph": [list(e) for e in self.support_graph],
        }


def support_graph(x, threshold: float = SUPPORT_THRESHOLD) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(np.asarray(x) > threshold)
    return [(int(m), int(w)) for m, w in zip(rows, cols)]


def enumerate_stable_matchings(market: Market) -> list[tuple]:
    if market.n > MAX_ENUMERATION_N:
        raise MarketError(f"enumeration refused for n={market.n} > {MAX_ENUMERATION_N}")
    return [p for p in itertools.permutations(range(market.n)) if is_stable(market, p)]


def is_pure_ne(market: Market, x, tol: float = DEFAULT_TOL) -> NECertificate:
    """Largest gain any man gets from his best pure deviation."""
    x = np.asarray(x, dtype=float)
    profile_to_actions(x)  # rejects non-pure input
    v = gradient_matrix(market, x)
    gain = v.max(axis=1) - np.einsum("mw,mw->m", x, v)
    return NECertificate(x, "pure", float(gain.max()), tol, support_graph(x))


def is_pure_ne_actions(market: Market, actions, tol: float = DEFAULT_TOL) -> NECertificate:
    return is_pure_ne(market, actions_to_profile(actions, market.n), tol)


def verify_mixed_ne(
    market: Market, x, tol: float = DEFAULT_TOL, threshold: float = SUPPORT_THRESHOLD
) -> NECertificate:
    """On-support gradients must equal the payoff; off-support ones must not exceed it."""
    x = check_profile(market, x)
    v = gradient_matrix(market, x)
    u = payoffs(market, x)[:, None]
    on = x > threshold
    residual = np.where(on, np.abs(v - u), np.maximum(v - u, 0.0))
    kind = "pure" if np.all((x == 0) | (x == 1)) else "mixed"
    return NECertificate(x, kind, float(residual.max()), tol, support_graph(x, threshold))


@dataclass
class Rounding:
    matching: tuple
    partial: bool


def round_row(x_m, mu_m, threshold: float = SUPPORT_THRESHOLD) -> int:
    """A man's least preferred woman among those he proposes to with positive mass.

    Uses only his own strategy row and his own (possibly estimated) preferences.
    """
    x_m = np.asarray(x_m, dtype=float)
    support = np.flatnonzero(x_m > threshold)
    if support.size == 0:
        raise MarketError("strategy row has empty support")
    return int(support[np.argmin(np.asarray(mu_m, dtype=float)[support])])


def round_mixed_to_pure(
    market: Market, x, mu_estimates=None, threshold: float = SUPPORT_THRESHOLD
) -> Rounding:
    """Round a mixed equilibrium man by man to a pure profile.

    If some woman receives no proposal mass, only the pairs in which the man is
    his rounded woman's favourite supporter are kept and the result is
    flagged partial.
    """
    x = check_profile(market, x)
    mu = market.mu if mu_estimates is None else np.asarray(mu_estimates, dtype=float)
    picks = [round_row(x[m], mu[m], threshold) for m in range(market.n)]
    supported = x > threshold
    if supported.any(axis=0).all():
        return Rounding(tuple(picks), partial=False)
    matching = []
    for m, w in enumerate(picks):
        rivals = np.flatnonzero(supported[:, w])
        top = rivals[np.argmin(market.rank_of[w, rivals])]
        matching.append(w if top == m else SINK)
    return Rounding(tuple(matching), partial=True)


def example1_market(eps: float = 0.1) -> tuple[Market, np.ndarray]:
    """Three-by-three market with a mixed equilibrium supported on seven edges.

    Returns the market and its closed-form mixed equilibrium.
    """
    if not 0 < eps < 1:
        raise MarketError("eps must lie in (0, 1)")
    mu = np.array([[2.0, 1.0, eps], [3.0, 4.0, 5.0], [eps, 12.0, 6.0]])
    # rows list men from most to least preferred (0-based)
    women_rank = [[1, 0, 2], [0, 1, 2], [2, 1, 0]]
    market = Market(mu, women_rank)
    ratio = mu[1, 1] * mu[2, 2] / (mu[1, 0] * mu[2, 1])
    x = np.zeros((3, 3))
    x[0, 0] = mu[1, 0] / mu[1, 1]
    x[0, 1] = 1 - mu[1, 0] / mu[1, 1]
    x[1, 0] = 1 - mu[0, 1] / mu[0, 0]
    x[1, 1] = 1 - ratio
    x[1, 2] = mu[0, 1] / mu[0, 0] + ratio - 1
    x[2, 1] = mu[1, 0] / mu[1, 2]
    x[2, 2] = 1 - mu[1, 0] / mu[1, 2]
    return market, x


def enumerate_pure_profiles(n: int):
    return itertools.product(range(n), repeat=n)


def pure_ne_set(market: Market, certify: Callable | None = None, tol: float = DEFAULT_TOL) -> set[tuple]:
    """All pure profiles certified as equilibria (exhaustive, n^n profiles)."""
    certify = certify or is_pure_ne_actions
    return {a for a in enumerate_pure_profiles(market.n) if certify(market, a, tol).certified}
