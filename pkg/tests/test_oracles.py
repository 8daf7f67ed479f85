import math

import numpy as np
import pytest

from espretrain import oracles
from espretrain.errors import ConfigurationError
from espretrain.oracles import (
    OracleReport, cosine, exhaustive_subset_mean, finite_diff_gradient, scalar_reward_oracle,
)


def test_oracles_import_no_production_numerics():
    source = open(oracles.__file__).read()
    for module in ("model", "fitness", "es", "kernels", "tensor_core", "numpy"):
        assert f"from .{module}" not in source and f"import {module}" not in source


def test_reward_oracle_degenerate_cases():
    assert scalar_reward_oracle([[0, 0, 0]] * 3, [0, 1, 2], [1, 1, 1]) == pytest.approx(-math.log(3))
    logits = [[1.0, 0.0], [0.0, 2.0], [0.5, 0.5]]
    only = 1.0 - math.log(math.exp(1.0) + 1.0)
    assert scalar_reward_oracle(logits, [0, 0, 1], [1, 1, 0]) == pytest.approx(only)


def test_finite_difference_quadratic():
    grad = finite_diff_gradient(lambda t: -(t[0] ** 2 + t[1] ** 2), [1.0, 2.0], h=1e-4)
    np.testing.assert_allclose(grad, [-2.0, -4.0], atol=1e-4)


def test_finite_difference_linear_is_constant():
    c = [0.3, -1.2, 2.0]
    f = lambda t: sum(a * b for a, b in zip(c, t))
    np.testing.assert_allclose(finite_diff_gradient(f, [0, 0, 0]), c, atol=1e-9)
    np.testing.assert_allclose(finite_diff_gradient(f, [5, -3, 1]), c, atol=1e-9)


def test_finite_difference_aligns_with_analytic_gradient(rng):
    for _ in range(10):
        m = rng.standard_normal((8, 8))
        a = m @ m.T + np.eye(8)
        theta = rng.standard_normal(8)
        grad = finite_diff_gradient(lambda t: -float(np.asarray(t) @ a @ np.asarray(t)), theta, 1e-5)
        assert cosine(grad, -2 * a @ theta) > 0.999


def test_finite_difference_limits():
    with pytest.raises(ConfigurationError):
        finite_diff_gradient(sum, [0.0] * 201)
    with pytest.raises(ConfigurationError):
        finite_diff_gradient(sum, [0.0], h=0)


def test_exhaustive_subset_mean_examples():
    values = [0.5, -1.0, 2.0, 3.5, -0.25, 1.0]
    score = lambda _, idx: sum(values[i] for i in idx) / len(idx)
    target = sum(values) / len(values)
    for m in (1, 2, 3, 6):
        assert exhaustive_subset_mean(values, None, m, score) == pytest.approx(target, abs=1e-12)


def test_exhaustive_subset_bound():
    with pytest.raises(ConfigurationError):
        exhaustive_subset_mean(list(range(30)), None, 10, lambda *_: 0.0)


def test_report_lines():
    ok = OracleReport("x", "max-abs-diff", 1e-7, 1e-6)
    bad = OracleReport("y", "cosine", 0.2, 0.3, higher_is_better=True)
    assert ok.passed and ok.line().startswith("PASS")
    assert not bad.passed and bad.line().startswith("FAIL")
    assert not OracleReport("z", "m", float("nan"), 1.0).passed
