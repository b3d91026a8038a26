"""The finite-difference harness itself, then the full sweep."""

import numpy as np
import pytest

from mage import tensor as T
from mage.gradcheck import (
    TOLERANCE,
    GradCheckRow,
    check_case,
    format_table,
    numeric_grad,
    per_op,
    rel_err,
    run_gradcheck,
)
from mage.rng import SplitMix64
from mage.tensor import Tensor


class TestHarness:
    def test_numeric_grad_of_cubic(self):
        x = Tensor(np.array([2.0]))
        g = numeric_grad(lambda: T.sum_all(T.mul(T.mul(x, x), x)), x, 0)
        assert g == pytest.approx(12.0, rel=1e-9)
        assert x.data[0] == 2.0  # restored after perturbation

    def test_rel_err_floor(self):
        assert rel_err(0.0, 1e-9) == pytest.approx(1e-3)
        assert rel_err(2.0, 1.0) == 0.5

    def test_detects_wrong_gradient(self):
        """An op with a deliberately wrong backward must be flagged."""
        x = Tensor(SplitMix64(0).normal((3,)))

        def broken():
            return T.sum_all(T.mul(x, x))

        rows = check_case("square", broken, {"x": x}, SplitMix64(1))
        assert rows[0].ok
        orig = T.mul

        def bad_mul(a, b):
            out = orig(a, b)
            fwd = out._backward
            out._backward = lambda g: [None if pg is None else pg * 1.01 for pg in fwd(g)]
            return out

        T.mul = bad_mul
        try:
            rows = check_case("square", broken, {"x": x}, SplitMix64(1))
        finally:
            T.mul = orig
        assert not rows[0].ok

    def test_row_threshold(self):
        assert GradCheckRow("op", "x", 10, TOLERANCE / 2).ok
        assert not GradCheckRow("op", "x", 10, TOLERANCE).ok


@pytest.fixture(scope="module")
def rows():
    return run_gradcheck(0)


class TestSweep:
    def test_all_rows_pass(self, rows):
        bad = [r for r in rows if not r.ok]
        assert not bad, format_table(bad)

    def test_covers_ops_modules_and_composite(self, rows):
        ops = set(per_op(rows))
        for name in ("matmul", "softmax", "layer_norm", "gelu", "cross_entropy", "mse", "vab", "seb", "composite"):
            assert any(o.startswith(name) for o in ops), name

    def test_composite_reaches_every_group(self, rows):
        tensors = {r.tensor for r in rows if r.op.startswith("composite")}
        assert {t.split(".")[0] for t in tensors} == {"encoder", "ian", "lm"}

    def test_ten_points_per_tensor(self, rows):
        assert all(0 < r.points <= 10 for r in rows)
        assert all(r.points == 10 for r in rows if r.op.startswith("composite") and r.tensor.endswith(".w1"))

    def test_table_has_a_line_per_op(self, rows):
        assert len(format_table(rows).splitlines()) >= len(per_op(rows))
