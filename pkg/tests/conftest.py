from __future__ import annotations

import numpy as np
import pytest

from sim2act.data import SyntheticEnvConfig, generate_synthetic
from sim2act.policy import build_policy
from sim2act.simulator import SimTrainConfig, build_simulator, train_simulator


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticEnvConfig(d=6, K=4, C=5, n_rows=3000, label_noise=0.05, rare_action_label_bias=0.3, seed=7))


@pytest.fixture(scope="session")
def trained_sim(small_dataset):
    model, _ = train_simulator(build_simulator(6, 4, 5, latent_dim=4, hidden=16, seed=1), small_dataset, SimTrainConfig(epochs=8, seed=1))
    return model


@pytest.fixture()
def tiny_sim():
    return build_simulator(3, 2, 3, latent_dim=2, hidden=4, seed=3)


@pytest.fixture()
def tiny_policy():
    return build_policy(3, 2, hidden=4, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
