import numpy as np
import pytest

from latentmatch.domain import Dataset, LatentTable, Observation, OutcomeRecord
from latentmatch.synthgen import DgpConfig, generate


def latent_table(z, action=None, outcome=None):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    return LatentTable(
        z,
        np.zeros(n, dtype=int) if action is None else action,
        np.zeros(n) if outcome is None else outcome,
        np.arange(n),
        np.zeros(n, dtype=int),
    )


@pytest.fixture(scope="session")
def small_data():
    return generate(DgpConfig(n_units=150, seed=3))


@pytest.fixture
def toy_dataset():
    obs = [
        Observation(0, 7, "heart_rate", 60.0),
        Observation(0, 8, "heart_rate", 70.0),
        Observation(0, 9, "heart_rate", 80.0),
        Observation(0, 9, "breathing_rate", 14.0),
        Observation(1, 2, "heart_rate", 55.0),
    ]
    outs = [
        OutcomeRecord(0, 10, 0, 5.0),
        OutcomeRecord(0, 20, 1, 4.0),
        OutcomeRecord(1, 10, 2, 3.0),
    ]
    return Dataset.from_records(obs, outs, unit_count=2)
