"""Waiting-list feedback game: a regularized, bilinear variant of the matching game.

Under waiting-list feedback a rejected man learns how many higher-ranked
men proposed to the same woman, which makes his perceived payoff linear in
the others' strategies.  Adding a quadratic regularizer ``beta`` yields a
monotone game once ``beta > n * mu_max / 2``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .market import Market, check_profile, resolve_proposals

PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class RegularizedGame:
    market: Market
    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")

    @property
    def monotone_threshold(self) -> float:
        return self.market.n * self.market.mu_max / 2.0

    @property
    def certified_monotone(self) -> bool:
        return self.beta > self.monotone_threshold


@dataclass(frozen=True)
class QMatrix:
    """Per-woman quadratic form in her preference order (row 0 = her favourite)."""

    w: int
    q: np.ndarray
    order: np.ndarray

    def in_man_basis(self) -> np.ndarray:
        """Same matrix indexed by man id instead of rank position."""
        inv = np.argsort(self.order)
        return self.q[np.ix_(inv, inv)]


# ------------------------------------------------------------------ payoffs

def competition(market: Market, x) -> np.ndarray:
    """above[m, w] = total proposal mass that w receives from men she ranks above m."""
    x = np.asarray(x, dtype=float)
    above = np.empty_like(x)
    for w in range(market.n):
        order = market.women_rank[w]
        mass = np.cumsum(x[order, w])
        above[order, w] = np.concatenate(([0.0], mass[:-1]))
    return above


def simplified_payoff(market: Market, x, m: int) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(market.mu[m] * (1.0 - competition(market, x)[m]) * x[m]))


def regularized_payoff(game: RegularizedGame, x, m: int) -> float:
    x = np.asarray(x, dtype=float)
    return simplified_payoff(game.market, x, m) - 0.5 * game.beta * float(x[m] @ x[m])


def regularized_field(game: RegularizedGame, x) -> np.ndarray:
    """F[m, w] = mu[m, w] (1 - mass above m at w) - beta x[m, w]."""
    x = np.asarray(x, dtype=float)
    return game.market.mu * (1.0 - competition(game.market, x)) - game.beta * x


def waitlist_perceived_payoff(market: Market, proposals) -> np.ndarray:
    """Realized perceived payoff mu[m, a_m] (1 - number of higher-ranked rivals) per man."""
    a = np.asarray(proposals, dtype=np.int64)
    _, ahead = resolve_proposals(market, a)
    mu = market.mu[np.arange(market.n), a]
    return mu * (1.0 - ahead)


# ------------------------------------------------------------------ quadratic forms

def build_q(game: RegularizedGame, w: int) -> QMatrix:
    order = np.asarray(game.market.women_rank[w])
    mu_sorted = game.market.mu[order, w]
    n = order.size
    # A[i, j] = mu of the man at rank i whenever rank j is above rank i
    a = np.tril(np.repeat(mu_sorted[:, None], n, axis=1), k=-1)
    q = a + a.T + 2.0 * game.beta * np.eye(n)
    return QMatrix(w, q, order)


def is_psd(q, tol: float = PIVOT_TOL) -> bool:
    """Attempt a symmetric LDL^T factorization without pivoting.

    A pivot below ``-tol`` fails; a pivot within ``tol`` of zero is accepted
    only when the rest of its column vanishes too.
    """
    a = np.array(q, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=tol):
        return False
    for k in range(n):
        d = a[k, k]
        col = a[k + 1 :, k]
        if d < -tol:
            return False
        if d <= tol:
            if np.any(np.abs(col) > tol):
                return False
            continue
        a[k + 1 :, k + 1 :] -= np.outer(col, col) / d
    return True


def monotone_identity_check(game: RegularizedGame, x, x2) -> tuple[float, float]:
    """Both sides of (x2 - x)^T (F(x2) - F(x)) = -1/2 sum_w d_w^T Q^w d_w."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    d = x2 - x
    lhs = float(np.sum(d * (regularized_field(game, x2) - regularized_field(game, x))))
    rhs = 0.0
    for w in range(game.market.n):
        qm = build_q(game, w)
        dw = d[qm.order, w]
        rhs += float(dw @ qm.q @ dw)
    return lhs, -0.5 * rhs


# ------------------------------------------------------------------ solver

def simplex_project(v) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, n + 1)
    rho = np.sum(u - css / k > 0, axis=-1, keepdims=True)
    theta = np.take_along_axis(css, rho - 1, axis=-1) / rho
    return np.maximum(v - theta, 0.0)


def variational_residual(field, x) -> float:
    """max over men of (best coordinate of his field) - (field averaged under his strategy)."""
    x = np.asarray(x, dtype=float)
    return float(np.max(field.max(axis=1) - np.einsum("mw,mw->m", x, field)))


def max_safe_step(game: RegularizedGame) -> float:
    return 1.0 / (2.0 * game.beta + game.market.n * game.market.mu_max)


@dataclass
class SolverResult:
    x: np.ndarray
    residual_regularized: float
    residual_simplified: float
    iterations: int
    log: list[tuple[int, float, float, float]]

    def write_log(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iter", "residual_regularized", "residual_simplified", "step_distance"])
            for row in self.log:
                out.writerow([row[0], *(repr(v) for v in row[1:])])


def pg_step(game: RegularizedGame, x, step: float) -> np.ndarray:
    """One simultaneous projected-gradient ascent step for every man."""
    return simplex_project(x + step * regularized_field(game, x))


def solve_eps_ne(
    game: RegularizedGame,
    x0=None,
    step: Optional[float] = None,
    iters: int = 10_000,
    tol: float = 1e-8,
    log_path=None,
) -> SolverResult:
    market = game.market
    n = market.n
    safe = max_safe_step(game)
    step = safe if step is None else step
    if step > safe:
        raise ValueError(f"step {step} exceeds the safe bound {safe}")
    if not game.certified_monotone:
        warnings.warn("beta is below the monotonicity threshold; convergence is not guaranteed", stacklevel=2)
    x = np.full((n, n), 1.0 / n) if x0 is None else check_profile(market, x0).copy()
    plain = RegularizedGame(market, 0.0)
    log = []
    moved = 0.0
    it = 0
    while True:
        res = variational_residual(regularized_field(game, x), x)
        res_plain = variational_residual(regularized_field(plain, x), x)
        log.append((it, res, res_plain, moved))
        if res <= tol or it >= iters:
            break
        x_new = pg_step(game, x, step)
        moved = float(np.abs(x_new - x).sum())
        x = x_new
        it += 1
    result = SolverResult(x, res, res_plain, it, log)
    if log_path is not None:
        result.write_log(log_path)
    return result
