"""Exponential-weights proposal learner for one man.

All primitives broadcast over leading axes, so the simulation engine applies
the very same functions to a stack of independent learners; row ``m`` of any
stacked computation depends only on man ``m``'s own scores and feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import UcbState, ucb_gap, ucb_update

GAMMA_CAP = 1.0 - 1e-9
SCHEDULE_KINDS = ("theorem3", "local", "custom", "adaptive")


@dataclass(frozen=True)
class ScheduleSpec:
    """Stepsize eta(t) and mixing gamma(t) sequences.

    * ``theorem3``: eta = 1/sqrt(t), gamma = M log t / t, where by default
      M = (4n/c) log(horizon).
    * ``local``: eta = t^-alpha, gamma = t^-beta (defaults 3/4 and 1/3).
    * ``custom``: eta = eta_scale * t^-alpha, gamma = gamma_scale * t^-beta.
    * ``adaptive``: theorem3 with c estimated by each man's confidence-bound
      gap oracle; gamma = log t / sqrt(t) while the estimated gap is zero.
    """

    kind: str = "theorem3"
    n: int = 2
    c: Optional[float] = None
    horizon: int = 10_000
    M: Optional[float] = None
    alpha: float = 0.75
    beta: float = 1.0 / 3.0
    eta_scale: float = 1.0
    gamma_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "theorem3" and self.M is None and not (self.c and self.c > 0):
            raise ValueError("theorem3 schedule needs either M or a positive c")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def mixing_constant(self) -> float:
        if self.M is not None:
            return float(self.M)
        return theorem3_M(self.n, self.c, self.horizon)

    def eta(self, t: int) -> float:
        if self.kind in ("theorem3", "adaptive"):
            return 1.0 / math.sqrt(t)
        return self.eta_scale * t ** (-self.alpha)

    def gamma(self, t: int, c_estimate: Optional[float] = None) -> float:
        if self.kind == "theorem3":
            g = self.mixing_constant * math.log(max(t, 2)) / t
        elif self.kind == "adaptive":
            if not c_estimate:
                g = math.log(max(t, 2)) / math.sqrt(t)
            else:
                g = theorem3_M(self.n, c_estimate, self.horizon) * math.log(max(t, 2)) / t
        else:
            g = self.gamma_scale * t ** (-self.beta)
        return min(g, GAMMA_CAP)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def theorem3_M(n: int, c: float, horizon: int) -> float:
    return 4.0 * n / c * math.log(max(horizon, 2))


def local_schedule(n: int) -> ScheduleSpec:
    """gamma = t^(-1/3), eta = t^(-3/4)."""
    return ScheduleSpec(kind="local", n=n, alpha=0.75, beta=1.0 / 3.0)


# ------------------------------------------------------------------ primitives

def logit(scores, eta):
    """Softmax of eta * scores along the last axis, with max subtraction."""
    z = np.asarray(eta, dtype=float)[..., None] * np.asarray(scores, dtype=float) if np.ndim(eta) else eta * np.asarray(scores, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def adjust(x_m, gamma, n: Optional[int] = None):
    """Mix a strategy with the uniform distribution: (1 - gamma) x + gamma / n."""
    x_m = np.asarray(x_m, dtype=float)
    n = x_m.shape[-1] if n is None else n
    g = np.asarray(gamma, dtype=float)
    if np.any(g <= 0) or np.any(g >= 1):
        raise ValueError("gamma must lie in (0, 1)")
    if g.ndim:
        g = g[..., None]
    return (1.0 - g) * x_m + g / n


def make_estimate(n: int, w_proposed, accepted, reward, x_hat_mw):
    """Importance-weighted payoff-gradient estimate.

    Zero except at the proposed woman, where it is reward / x_hat_mw when the
    proposal was accepted.  Broadcasts over leading axes.
    """
    x_hat_mw = np.asarray(x_hat_mw, dtype=float)
    if np.any(x_hat_mw <= 0):
        raise ValueError("proposal probability must be positive")
    w = np.asarray(w_proposed, dtype=np.int64)
    value = np.where(np.asarray(accepted, dtype=bool), np.asarray(reward, dtype=float) / x_hat_mw, 0.0)
    out = np.zeros(w.shape + (n,))
    np.put_along_axis(out, w[..., None], np.asarray(value, dtype=float)[..., None], axis=-1)
    return out


def sample_index(probs, u):
    """Inverse-CDF draw along the last axis for uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(np.asarray(u, dtype=float)[..., None] >= cdf, axis=-1)
    return np.minimum(idx, np.shape(probs)[-1] - 1)


# ------------------------------------------------------------------ learner

@dataclass
class ExpFeedback:
    """What man m observes after round t: his proposal, acceptance, and reward."""

    w: int
    accepted: bool
    reward: float = 0.0


@dataclass
class ExpLearnerState:
    m: int
    n: int
    schedule: ScheduleSpec
    L_hat: np.ndarray = None
    t: int = 1
    gap_oracle: Optional[UcbState] = None

    def __post_init__(self):
        if self.L_hat is None:
            self.L_hat = np.zeros(self.n)
        self.L_hat = np.asarray(self.L_hat, dtype=float)
        if self.schedule.kind == "adaptive" and self.gap_oracle is None:
            self.gap_oracle = UcbState(self.n)

    @property
    def eta(self) -> float:
        return self.schedule.eta(self.t)

    @property
    def gamma(self) -> float:
        c_est = None
        if self.gap_oracle is not None:
            c_est = oracle_c(self.gap_oracle, self.t)
        return self.schedule.gamma(self.t, c_est)

    def strategy(self) -> np.ndarray:
        """Adjusted mixed strategy played at the current round."""
        return adjust(logit_strategy(self), self.gamma, self.n)

    def act(self, rng: np.random.Generator) -> int:
        return int(sample_index(self.strategy(), rng.random()))


def oracle_c(oracle: UcbState, t: int) -> Optional[float]:
    """Estimated schedule constant (1/8) min{gap, best estimated mean}, or None while the gap estimate is 0."""
    gap = ucb_gap(oracle, t)
    if gap <= 0:
        return None
    means = oracle.means()
    return min(gap, float(np.nanmax(means))) / 8.0


def logit_strategy(state: ExpLearnerState) -> np.ndarray:
    return logit(state.L_hat, state.eta)


def exp_step(state: ExpLearnerState, feedback: ExpFeedback) -> ExpLearnerState:
    """Fold round t's own feedback into the scores and advance to round t+1."""
    x_hat = state.strategy()
    v_hat = make_estimate(state.n, feedback.w, feedback.accepted, feedback.reward, x_hat[feedback.w])
    state.L_hat = state.L_hat + v_hat
    if state.gap_oracle is not None:
        ucb_update(state.gap_oracle, feedback.w, feedback.accepted, feedback.reward)
    state.t += 1
    return state


def stable_regret(proposals, target) -> np.ndarray:
    """Running count of rounds whose proposal profile differs from ``target``."""
    proposals = np.asarray(proposals)
    miss = np.any(proposals != np.asarray(target)[None, :], axis=1)
    return np.cumsum(miss, dtype=np.int64)
