import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stfusion.core import TARGET_EVAL, Dataset, Observation

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_dataset(rows, num_cameras=3, split=TARGET_EVAL):
    """rows: (obs_id, camera, frame, features, label)."""
    obs = [Observation(i, c, f, np.asarray(x, dtype=float), lab) for i, c, f, x, lab in rows]
    return Dataset(obs, num_cameras, split)


@pytest.fixture
def tiny():
    rows = [
        ("a", 0, 100, [1.0, 0.0], 0),
        ("b", 1, 160, [0.9, 0.1], 0),
        ("c", 2, 40, [0.0, 1.0], 1),
        ("d", 0, 300, [0.1, 1.0], 1),
        ("e", 1, 310, [1.0, 1.0], 2),
    ]
    return make_dataset(rows)
