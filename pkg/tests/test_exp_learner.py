import math

import numpy as np
import pytest

from matchlearn.exp_learner import (
    ExpFeedback,
    ExpLearnerState,
    ScheduleSpec,
    adjust,
    exp_step,
    local_schedule,
    logit,
    logit_strategy,
    make_estimate,
    sample_index,
    stable_regret,
    theorem3_M,
)
from matchlearn.market import gradient_matrix, resolve_proposals
from matchlearn.sim import gen_hierarchical, parse_config, run

from conftest import random_market


class TestLogit:
    def test_zero_scores_uniform(self):
        assert np.allclose(logit(np.zeros(4), 0.7), 0.25)

    def test_closed_form(self):
        assert np.allclose(logit([math.log(2), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance(self, rng):
        L = rng.normal(size=5)
        assert np.allclose(logit(L + 1000, 0.3), logit(L, 0.3), atol=1e-12, rtol=0)

    def test_huge_scores_stay_finite(self):
        x = logit([1e200, -1e200, 0.0], 1.0)
        assert np.all(np.isfinite(x)) and x.sum() == pytest.approx(1.0)

    def test_state_uses_current_eta(self):
        state = ExpLearnerState(0, 2, ScheduleSpec(kind="local", n=2), L_hat=np.array([math.log(2), 0.0]))
        assert np.allclose(logit_strategy(state), [2 / 3, 1 / 3])


class TestAdjust:
    def test_affine(self):
        assert np.allclose(adjust([1.0, 0.0], 0.2, 2), [0.9, 0.1])

    def test_small_gamma_is_near_identity(self):
        assert np.allclose(adjust([0.3, 0.7], 1e-12), [0.3, 0.7])

    def test_gamma_near_one_is_uniform(self):
        assert np.allclose(adjust([1.0, 0.0, 0.0], 1 - 1e-12), 1 / 3)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1])
    def test_gamma_out_of_range(self, gamma):
        with pytest.raises(ValueError):
            adjust([1.0, 0.0], gamma)

    def test_floor(self, rng):
        x = rng.dirichlet(np.ones(6), size=10)
        assert np.all(adjust(x, 0.3) >= 0.3 / 6 - 1e-15)


class TestEstimate:
    def test_accepted(self):
        assert make_estimate(3, 1, True, 0.6, 0.5).tolist() == [0.0, 1.2, 0.0]

    def test_rejected(self):
        assert not make_estimate(3, 1, False, 0.6, 0.5).any()

    def test_nonpositive_probability(self):
        with pytest.raises(ValueError):
            make_estimate(3, 1, True, 0.6, 0.0)

    def test_batched(self):
        v = make_estimate(2, np.array([[0, 1]]), np.array([[True, True]]), np.array([[1.0, 0.5]]), np.array([[0.5, 0.25]]))
        assert v.tolist() == [[[2.0, 0.0], [0.0, 2.0]]]

    def test_unbiased_and_bounded(self, rng):
        n, gamma, draws = 3, 0.3, 100_000
        market = random_market(rng, n)
        x_hat = adjust(rng.dirichlet(np.ones(n), size=n), gamma)
        a = sample_index(x_hat[None], rng.random((draws, n)))
        acc, _ = resolve_proposals(market, a)
        r = (rng.random((draws, n)) < market.mu[np.arange(n), a]) & acc
        xa = x_hat[np.arange(n), a]
        v = make_estimate(n, a, acc, r.astype(float), xa)
        assert v.max() <= n / gamma
        se = v.std(axis=0) / math.sqrt(draws)
        assert np.all(np.abs(v.mean(axis=0) - gradient_matrix(market, x_hat)) <= 3 * se + 1e-12)


class TestSchedule:
    def test_default_schedule_formulas(self):
        s = ScheduleSpec(kind="theorem3", n=3, c=0.05, horizon=1000)
        M = 4 * 3 / 0.05 * math.log(1000)
        assert s.mixing_constant == pytest.approx(M) == pytest.approx(theorem3_M(3, 0.05, 1000))
        assert s.eta(16) == 0.25
        assert s.gamma(10**9) == pytest.approx(M * math.log(10**9) / 10**9)

    def test_gamma_clamped_and_defined_at_one(self):
        s = ScheduleSpec(kind="theorem3", n=3, M=5.0)
        assert s.gamma(1) == 1 - 1e-9
        assert 0 < s.gamma(10**6) < 1

    def test_local(self):
        s = local_schedule(3)
        assert s.eta(16) == pytest.approx(16**-0.75)
        assert s.gamma(8) == pytest.approx(0.5)

    def test_eta_nonincreasing(self):
        for s in (local_schedule(2), ScheduleSpec(kind="theorem3", n=2, M=1.0)):
            etas = [s.eta(t) for t in range(1, 500)]
            assert all(a >= b for a, b in zip(etas, etas[1:]))

    def test_default_schedule_needs_c_or_M(self):
        with pytest.raises(ValueError):
            ScheduleSpec(kind="theorem3", n=3)

    def test_adaptive_falls_back(self):
        s = ScheduleSpec(kind="adaptive", n=3)
        assert s.gamma(100) == pytest.approx(math.log(100) / 10)


class TestStep:
    def schedule(self):
        return ScheduleSpec(kind="theorem3", n=3, M=0.5)

    def test_rejection_leaves_scores(self):
        state = ExpLearnerState(0, 3, self.schedule(), L_hat=np.array([1.0, 2.0, 3.0]))
        exp_step(state, ExpFeedback(1, False))
        assert state.L_hat.tolist() == [1.0, 2.0, 3.0] and state.t == 2

    def test_acceptance_adds_weighted_reward(self):
        state = ExpLearnerState(0, 3, self.schedule())
        x = state.strategy()
        exp_step(state, ExpFeedback(2, True, 0.5))
        assert state.L_hat[2] == pytest.approx(0.5 / x[2]) and state.L_hat[:2].tolist() == [0.0, 0.0]

    def test_counter_advances_by_one(self):
        state = ExpLearnerState(0, 3, self.schedule())
        for k in range(5):
            exp_step(state, ExpFeedback(0, bool(k % 2), 1.0))
        assert state.t == 6

    def test_adaptive_learner_tracks_its_oracle(self):
        state = ExpLearnerState(0, 2, ScheduleSpec(kind="adaptive", n=2))
        exp_step(state, ExpFeedback(1, True, 1.0))
        assert state.gap_oracle.N.tolist() == [0, 1]

    def test_engine_matches_per_man_learners(self):
        """Replaying the engine's outcomes through single-man learners reproduces its scores."""
        cfg = parse_config(
            {
                "market": {"generator": "hierarchical", "n": 3, "seed": 2},
                "learner": {"kind": "exp", "schedule": {"kind": "theorem3", "M": 0.5}},
                "horizon": 400,
                "seed": 9,
            }
        )
        tr = run(cfg)[0]
        sched = ScheduleSpec(kind="theorem3", n=3, M=0.5, horizon=400)
        men = [ExpLearnerState(m, 3, sched) for m in range(3)]
        for t in range(400):
            for m, st in enumerate(men):
                w = int(tr.proposals[t, m])
                assert st.strategy()[w] > 0
                exp_step(st, ExpFeedback(w, bool(tr.accepted[t, m]), float(np.nan_to_num(tr.rewards[t, m]))))
        assert np.allclose(np.stack([s.L_hat for s in men]), tr.final_scores, rtol=1e-12, atol=0)


class TestRegret:
    def test_all_on_target(self):
        assert stable_regret(np.tile([0, 1, 2], (5, 1)), [0, 1, 2]).tolist() == [0] * 5

    def test_counts_mismatches(self):
        props = [[0, 1, 2], [1, 1, 2], [0, 1, 2], [2, 0, 1]]
        assert stable_regret(props, [0, 1, 2]).tolist() == [0, 1, 1, 2]


def test_learners_lock_onto_the_stable_partner():
    """After 10^4 rounds on a hierarchical market the first man proposes to his
    stable partner with probability above 0.9 in at least 95 of 100 runs."""
    cfg = parse_config(
        {
            "market": {"generator": "hierarchical", "n": 3, "seed": 1, "min_gap": 0.2},
            "learner": {"kind": "exp", "schedule": {"kind": "theorem3", "M": 0.2}},
            "horizon": 10_000,
            "replications": 100,
            "seed": 2024,
            "record": "summary",
        }
    )
    trs = run(cfg)
    hits = sum(tr.final_profile[0, 0] > 0.9 for tr in trs)
    assert hits >= 95


def test_regret_is_sublinear():
    """Per-round regret of the median run falls across doubling windows."""
    cfg = parse_config(
        {
            "market": {"generator": "hierarchical", "n": 3, "seed": 1, "min_gap": 0.2},
            "learner": {"kind": "exp", "schedule": {"kind": "theorem3", "M": 0.2}},
            "horizon": 16_000,
            "replications": 30,
            "seed": 5,
            "record": "summary",
        }
    )
    trs = run(cfg)
    points = (1000, 2000, 4000, 8000, 16_000)
    rates = [
        np.median([(tr.checkpoints[b] - tr.checkpoints[a]) / (b - a) for tr in trs])
        for a, b in zip(points, points[1:])
    ]
    assert rates[0] >= rates[-1]
    assert rates[-1] < 0.01


def test_hierarchical_generator_used_here_is_hierarchical():
    from matchlearn.market import is_hierarchical

    assert is_hierarchical(gen_hierarchical(3, 1, 0.2))
