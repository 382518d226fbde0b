"""The gradient-check harness itself: it must pass correct ops and catch broken ones."""

import numpy as np
import pytest

from conunetr import tensor as T
from conunetr.gradcheck import CheckResult, check_op, format_table, op_suite, run_op_checks


def broken_square(a):
    # forward a*a but backward claims 3a
    return T._result(a.data * a.data, (a,), lambda g: (3 * a.data * g,), "broken")


@pytest.fixture(scope="module")
def results():
    return run_op_checks(seed=0)


class TestHarness:
    def test_every_op_passes(self, results):
        failing = [r for r in results if not r.passed]
        assert not failing, format_table(failing)

    def test_elementwise_ops_checked_in_both_precisions(self, results):
        names64 = {r.name for r in results if r.precision == "64"}
        elementwise = {name for name, _, _, ew in op_suite() if ew}
        assert names64 == elementwise

    def test_catches_wrong_gradient(self, rng):
        r = check_op("broken", broken_square, [rng.normal(size=(3,))], "64")
        assert not r.passed and r.max_rel_err > 0.1

    def test_result_tolerance(self):
        assert CheckResult("x", "32", 9e-4, 1e-3).passed
        assert not CheckResult("x", "32", 1e-3, 1e-3).passed

    def test_table(self):
        table = format_table([CheckResult("add", "64", 1e-9, 1e-6), CheckResult("mul", "32", 0.5, 1e-3)])
        lines = table.splitlines()
        assert lines[0].split() == ["op", "bits", "max_rel_err", "tol", "status"]
        assert lines[1].endswith("ok") and lines[2].endswith("FAIL")

    def test_large_inputs_are_subsampled(self, rng):
        r = check_op("exp", T.exp, [rng.normal(size=(20, 20))], "64", max_coords=10)
        assert r.passed
