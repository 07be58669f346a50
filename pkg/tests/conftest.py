"""Shared fixtures: the default toy task and a couple of tiny instances."""

import numpy as np
import pytest

from twistsmc import (
    DataDist,
    ExactOracle,
    NoiseSchedule,
    TabularDenoiser,
    Vocab,
    token_count,
)


class ToyTask:
    """Default desk-scale task: V=3, N=3, T=8, skewed product data, token_count(0).

    The per-position marginals differ and are tilted away from the rewarded
    token, so the optimal twist has positional structure the pooled feature
    map cannot express exactly and the reward tilt pushes toward states the
    base visits rarely.
    """

    MARGINALS = np.array([[0.05, 0.70, 0.25],
                          [0.25, 0.15, 0.60],
                          [0.45, 0.35, 0.20]])

    def __init__(self, beta: float = 0.5):
        self.vocab = Vocab(3)
        self.length = 3
        self.data = DataDist.from_marginals(self.vocab, self.MARGINALS)
        self.sched = NoiseSchedule.linear(8)
        self.den = TabularDenoiser(self.data)
        self.reward = token_count(self.vocab, 0)
        self.beta = beta

    def oracle(self) -> ExactOracle:
        return ExactOracle(self.den, self.sched)


@pytest.fixture(scope="session")
def toy() -> ToyTask:
    return ToyTask()


@pytest.fixture(scope="session")
def toy_oracle(toy) -> ExactOracle:
    return toy.oracle()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
