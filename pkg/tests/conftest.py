import numpy as np
import pytest
from hypothesis import strategies as st

from matchlearn.market import Market, RewardDist


def random_market(rng: np.random.Generator, n: int, reward: str = "bernoulli") -> Market:
    """Tie-free random market with mu in (0, 1)."""
    mu = np.stack([rng.permutation(np.linspace(0.1, 0.9, n)) + rng.uniform(-0.01, 0.01, n) for _ in range(n)])
    ranks = np.stack([rng.permutation(n) for _ in range(n)])
    return Market(mu, ranks, RewardDist(reward))


@st.composite
def markets(draw, min_n=1, max_n=5):
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_market(np.random.default_rng(seed), n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
