import numpy as np
import pytest

from fedvote.models import ModelState


def finite_difference_gradient(loss_fn, params, step=1e-5):
    """Central differences, one coordinate at a time."""
    grad = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = loss_fn(params)
        params[i] = orig - step
        down = loss_fn(params)
        params[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def assert_gradients_close(analytic, numeric, rel=1e-4, floor=1e-8):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= floor) | (diff <= rel * scale)
    bad = np.flatnonzero(~ok)
    assert bad.size == 0, (
        f"{bad.size} coordinates disagree, e.g. index {bad[0]}: "
        f"analytic={analytic[bad[0]]!r} numeric={numeric[bad[0]]!r}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def state(spec, params):
    return ModelState(spec, np.asarray(params, dtype=np.float64))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(test_acceptance.VERDICTS[key])
