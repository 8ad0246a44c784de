import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchlearn.equilibrium import round_mixed_to_pure
from matchlearn.market import Market, actions_to_profile, deferred_acceptance, is_stable
from matchlearn.monotone import (
    RegularizedGame,
    build_q,
    is_psd,
    monotone_identity_check,
    regularized_field,
    regularized_payoff,
    simplex_project,
    simplified_payoff,
    solve_eps_ne,
    variational_residual,
    waitlist_perceived_payoff,
)
from matchlearn.sim import gen_hierarchical

from conftest import markets, random_market


class TestPayoff:
    def test_stable_profile_pays_partner_value(self, rng):
        market = random_market(rng, 4)
        da = deferred_acceptance(market)
        x = actions_to_profile(da, 4)
        for m in range(4):
            assert simplified_payoff(market, x, m) == pytest.approx(market.mu[m, da[m]])

    def test_linear_depletion_can_go_negative(self):
        market = Market([[0.5, 0.1, 0.2], [0.4, 0.2, 0.1], [0.3, 0.1, 0.2]], [[0, 1, 2], [0, 1, 2], [0, 1, 2]])
        x = actions_to_profile([0, 0, 0], 3)
        assert simplified_payoff(market, x, 2) == pytest.approx(-0.3)

    def test_waitlist_monte_carlo(self, rng):
        market = random_market(rng, 4)
        x = rng.dirichlet(np.ones(4), size=4)
        k = 100_000
        cdf = np.cumsum(x, axis=1)
        props = np.minimum((rng.random((k, 4, 1)) >= cdf[None]).sum(-1), 3)
        perceived = waitlist_perceived_payoff(market, props)
        se = perceived.std(axis=0) / np.sqrt(k)
        for m in range(4):
            assert abs(perceived[:, m].mean() - simplified_payoff(market, x, m)) < 3 * se[m] + 1e-12


class TestField:
    def test_no_competition_beta_zero(self):
        market = gen_hierarchical(3, 0)
        x = np.eye(3)[[0, 1, 2]]
        f = regularized_field(RegularizedGame(market, 0.0), np.zeros((3, 3)))
        assert np.allclose(f, market.mu)
        assert x.shape == (3, 3)

    def test_uniform_two_by_two(self):
        # w0 ranks m0 first, w1 ranks m1 first
        market = Market([[0.8, 0.4], [0.6, 0.2]], [[0, 1], [1, 0]])
        f = regularized_field(RegularizedGame(market, 1.0), np.full((2, 2), 0.5))
        expected = [[0.8 - 0.5, 0.4 * 0.5 - 0.5], [0.6 * 0.5 - 0.5, 0.2 - 0.5]]
        assert np.allclose(f, expected)

    @settings(max_examples=100, deadline=None)
    @given(markets(min_n=2, max_n=5), st.floats(0.0, 5.0), st.integers(0, 2**32 - 1))
    def test_finite_differences(self, market, beta, seed):
        game = RegularizedGame(market, beta)
        x = np.random.default_rng(seed).dirichlet(np.ones(market.n), size=market.n)
        h = 1e-6
        f = regularized_field(game, x)
        for m, w in itertools.product(range(market.n), repeat=2):
            xp, xm = x.copy(), x.copy()
            xp[m, w] += h
            xm[m, w] -= h
            fd = (regularized_payoff(game, xp, m) - regularized_payoff(game, xm, m)) / (2 * h)
            assert fd == pytest.approx(f[m, w], abs=1e-6)


class TestQ:
    def test_two_by_two(self):
        market = Market([[0.9, 0.3], [0.5, 0.7]], [[0, 1], [1, 0]])
        q = build_q(RegularizedGame(market, 1.0), 0)
        assert np.allclose(q.q, [[2.0, 0.5], [0.5, 2.0]])

    def test_structure(self, rng):
        market = random_market(rng, 5)
        game = RegularizedGame(market, 0.7)
        for w in range(5):
            qm = build_q(game, w)
            assert np.allclose(qm.q, qm.q.T) and np.allclose(np.diag(qm.q), 1.4)
            order = market.women_rank[w]
            for i, j in itertools.product(range(5), repeat=2):
                if i != j:
                    assert qm.q[i, j] == market.mu[order[max(i, j)], w]

    def test_psd_above_threshold(self, rng):
        for _ in range(50):
            market = random_market(rng, int(rng.integers(2, 7)))
            game = RegularizedGame(market, market.n * market.mu_max / 2 + 1e-6)
            assert game.certified_monotone
            assert all(is_psd(build_q(game, w).q) for w in range(market.n))

    def test_beta_zero_indefinite(self, rng):
        market = random_market(rng, 3)
        qs = [build_q(RegularizedGame(market, 0.0), w).q for w in range(3)]
        assert not any(is_psd(q) for q in qs)
        assert all(np.linalg.eigvalsh(q).min() < 0 for q in qs)

    def test_psd_agrees_with_eigenvalues(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 6))
            a = rng.normal(size=(n, n))
            q = a @ a.T if rng.random() < 0.5 else a + a.T
            lam = np.linalg.eigvalsh(q).min()
            if abs(lam) > 1e-6:
                assert is_psd(q) == (lam > 0)

    def test_singular_psd_accepted(self):
        assert is_psd(np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert not is_psd(np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_man_basis(self, rng):
        market = random_market(rng, 4)
        qm = build_q(RegularizedGame(market, 0.5), 2)
        big = qm.in_man_basis()
        order = market.women_rank[2]
        assert np.allclose(big[np.ix_(order, order)], qm.q)


class TestIdentity:
    def test_same_point(self, rng):
        market = random_market(rng, 3)
        x = rng.dirichlet(np.ones(3), size=3)
        assert monotone_identity_check(RegularizedGame(market, 1.0), x, x) == (0.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(markets(min_n=1, max_n=6), st.floats(0.0, 10.0), st.integers(0, 2**32 - 1))
    def test_identity_holds(self, market, beta, seed):
        rng = np.random.default_rng(seed)
        x, x2 = (rng.dirichlet(np.ones(market.n), size=market.n) for _ in range(2))
        game = RegularizedGame(market, beta)
        lhs, rhs = monotone_identity_check(game, x, x2)
        assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs))
        if game.certified_monotone:
            assert lhs <= 1e-9


class TestProjection:
    def test_examples(self):
        assert np.allclose(simplex_project([0.2, 0.8]), [0.2, 0.8])
        assert np.allclose(simplex_project([2.0, 0.0]), [1.0, 0.0])
        assert np.allclose(simplex_project([0.6, 0.6]), [0.5, 0.5])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_idempotent_and_order_preserving(self, v):
        p = simplex_project(v)
        assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)
        assert np.allclose(simplex_project(p), p, atol=1e-12)
        v = np.asarray(v)
        for i, j in itertools.product(range(v.size), repeat=2):
            if v[i] > v[j]:
                assert p[i] >= p[j]

    def test_rows(self, rng):
        v = rng.normal(size=(4, 3))
        assert np.allclose(simplex_project(v), np.stack([simplex_project(r) for r in v]))


class TestSolver:
    def test_fixed_point_start(self):
        market = gen_hierarchical(2, 1)
        game = RegularizedGame(market, 2 * 2 * market.mu_max)
        first = solve_eps_ne(game, iters=10_000, tol=1e-12)
        again = solve_eps_ne(game, x0=first.x, iters=5, tol=1e-10)
        assert again.iterations == 0

    def test_converges(self, tmp_path):
        market = gen_hierarchical(2, 3)
        game = RegularizedGame(market, 2 * 2 * market.mu_max)
        res = solve_eps_ne(game, iters=10_000, tol=1e-7, log_path=tmp_path / "log.csv")
        assert res.residual_regularized < 1e-6
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "iter,residual_regularized,residual_simplified,step_distance"
        assert len(lines) == res.iterations + 2

    def test_step_bound_enforced(self):
        game = RegularizedGame(gen_hierarchical(2, 0), 5.0)
        with pytest.raises(ValueError):
            solve_eps_ne(game, step=1.0)

    def test_non_monotone_warns(self):
        game = RegularizedGame(gen_hierarchical(3, 0), 0.0)
        with pytest.warns(UserWarning):
            solve_eps_ne(game, iters=3)

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_rounding_the_solution(self):
        """Solutions that are equilibria of the unregularized game round to stable matchings."""
        checked = 0
        for seed in range(10):
            market = gen_hierarchical(3, seed)
            for beta in (0.0, 1e-3, 0.51 * 3 * market.mu_max):
                res = solve_eps_ne(RegularizedGame(market, beta), iters=20_000, tol=1e-10)
                if res.residual_simplified > 1e-8 or not (res.x > 1e-9).any(axis=0).all():
                    continue
                r = round_mixed_to_pure(market, res.x)
                assert not r.partial and is_stable(market, r.matching)
                checked += 1
        assert checked >= 10

    def test_residual_zero_at_best_corner(self):
        f = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert variational_residual(f, np.eye(2)) == 0.0


@pytest.mark.parametrize("n", [1, 2, 3])
def test_simplified_pure_equilibria_are_stable_matchings(n, rng):
    for _ in range(15):
        market = random_market(rng, n)
        plain = RegularizedGame(market, 0.0)
        stable = {p for p in itertools.permutations(range(n)) if is_stable(market, p)}
        ne = set()
        for a in itertools.product(range(n), repeat=n):
            x = actions_to_profile(a, n)
            if variational_residual(regularized_field(plain, x), x) <= 1e-12:
                ne.add(a)
        assert ne == stable
