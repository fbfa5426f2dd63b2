import io
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest
from rich.console import Console

from modac.selftest import (CheckResult, brute_manager_return, brute_option_return, central_difference,
                            check_autodiff, check_returns, flat_equivalence_check, meta_gradient_check,
                            relative_error, run_selftest)


def test_central_difference_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(central_difference(lambda v: float(v @ v), x), 2 * x, atol=1e-6)


def test_relative_error_is_scale_free():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_brute_force_oracles():
    assert brute_option_return(np.array([2.0]), np.array([0.5]), 5.0) == pytest.approx(0.5 * 2.0 + 0.25 * 5.0)
    assert brute_option_return(np.array([2.0]), np.array([1.0]), 5.0) == 0.0
    assert brute_option_return(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 1.0) == pytest.approx(3.0)
    assert brute_manager_return(np.array([0.0, 1.0]), 0.5, 0.1, 2.0) == pytest.approx(0.25 - 0.025 + 0.25)


def test_autodiff_and_return_checks_pass():
    results = check_autodiff() + check_returns(trials=200)
    assert all(r.passed for r in results), [(r.name, r.value) for r in results]


def test_meta_gradient_check_passes():
    result = meta_gradient_check(1, 1)
    assert result.passed, result.value


def test_flat_equivalence_check_passes():
    assert flat_equivalence_check(200).passed


def test_quick_selftest_reports_pass():
    out = io.StringIO()
    assert run_selftest(Console(file=out, width=120), quick=True)
    assert "FAIL" not in out.getvalue()


def test_full_selftest_runs_long_flat_equivalence(mocker):
    ok = [CheckResult("stub", True, 0.0)]
    mocker.patch("modac.selftest.check_autodiff", return_value=ok)
    mocker.patch("modac.selftest.check_returns", return_value=ok)
    meta = mocker.patch("modac.selftest.meta_gradient_check", return_value=ok[0])
    flat = mocker.patch("modac.selftest.flat_equivalence_check", return_value=ok[0])
    assert run_selftest(Console(file=io.StringIO(), width=120), quick=False)
    flat.assert_called_once_with(50000)
    assert meta.call_count == 4
