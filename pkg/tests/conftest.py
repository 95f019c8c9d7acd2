import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-5) -> float:
    """Max elementwise error of analytic vs numeric, relative with unit floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric)))
    assert err <= tol, f"gradient mismatch: max relative error {err:.3e} > {tol}"
    return float(err)


@pytest.fixture
def assert_grads_close():
    return gradcheck
