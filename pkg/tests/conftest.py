import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture(scope="session")
def expert_small():
    from prefdiff.momdp import collect_dataset
    return collect_dataset("expert", 300, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
