import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pggcn.exceptions import DimensionError, GradientCheckError
from pggcn.tensor import (Param, elementwise, finite_difference_check, load_tensor, matmul,
                          read_tensor, reduce, save_tensor, softmax_rows, write_tensor)
from pggcn.train import cross_entropy


def triple_loop_matmul(a, b):
    p, q = len(a), len(a[0])
    r = len(b[0])
    out = [[0.0] * r for _ in range(p)]
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return np.array(out)


class TestMatmul:
    def test_identity_left(self):
        m = np.array([[1.5, -2.0], [3.0, 4.25]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_row_times_column(self):
        assert np.array_equal(matmul([[1, 2]], [[3], [4]]), [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop_matmul(a.tolist(), b.tolist()),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
    def test_identity_is_exact(self, a):
        assert np.array_equal(matmul(a, np.eye(3)), a)
        assert np.array_equal(matmul(np.eye(4), a), a)


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows([[1000.0, 1000.0]])
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_matches_direct_formula(self):
        e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        expected = [v / sum(e) for v in e]
        np.testing.assert_allclose(softmax_rows([[1.0, 2.0, 3.0]])[0], expected, rtol=0,
                                   atol=1e-12)

    @settings(max_examples=200)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_are_distributions(self, x):
        y = softmax_rows(x)
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


class TestElementwise:
    def test_mul_by_ones(self):
        a = np.random.default_rng(1).standard_normal((3, 3))
        assert np.array_equal(elementwise("mul", a, np.ones_like(a)), a)

    def test_add_zeros(self):
        a = np.random.default_rng(2).standard_normal((3, 3))
        assert np.array_equal(elementwise("add", a, np.zeros_like(a)), a)

    def test_relu(self):
        np.testing.assert_array_equal(elementwise("relu", [-1.0, 0.0, 2.0]), [0, 0, 2])

    def test_relu_grad_masks(self):
        np.testing.assert_array_equal(elementwise("relu_grad", [-1.0, 0.0, 2.0], [5, 6, 7]),
                                      [0, 0, 7])

    def test_sub_and_scale(self):
        np.testing.assert_array_equal(elementwise("sub", [3.0], [1.0]), [2.0])
        np.testing.assert_array_equal(elementwise("scale", [3.0, -1.0], 2), [6.0, -2.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            elementwise("add", np.ones(3), np.ones(4))


class TestReduce:
    def test_mean(self):
        np.testing.assert_array_equal(reduce("mean", [[2.0, 4.0]], 1), [3.0])

    def test_max_index_tie_goes_low(self):
        assert reduce("max_index", [0.2, 0.5, 0.5], 0) == 1

    def test_sum_against_loops(self):
        x = np.random.default_rng(3).standard_normal((3, 4, 5))
        expected = np.zeros((3, 5))
        for i in range(3):
            for k in range(5):
                s = 0.0
                for j in range(4):
                    s += x[i, j, k]
                expected[i, k] = s
        np.testing.assert_allclose(reduce("sum", x, 1), expected, rtol=0, atol=1e-12)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            reduce("sum", np.ones((2, 2)), 2)


class TestParam:
    def test_zero_grad(self):
        p = Param(np.ones((2, 3)))
        p.accumulate(np.full((2, 3), 4.0))
        p.zero_grad()
        assert np.array_equal(p.grad, np.zeros((2, 3)))
        assert p.grad.shape == p.value.shape

    def test_accumulate_shape_checked(self):
        with pytest.raises(DimensionError):
            Param(np.ones(3)).accumulate(np.ones(4))


class TestFiniteDifference:
    def test_quadratic(self):
        p = Param(np.array([1.0, 2.0, 3.0]))
        rep = finite_difference_check(lambda: float((p.value ** 2).sum()), p,
                                      np.array([2.0, 4.0, 6.0]), 1e-5, 1e-8)
        assert rep.passed

    def test_detects_wrong_gradient(self):
        p = Param(np.array([1.0, 2.0]))
        rep = finite_difference_check(lambda: float((p.value ** 2).sum()), p,
                                      np.array([2.0, 5.0]))
        assert not rep.passed
        assert rep.worst_index == (1,)

    def test_linear_model_cross_entropy(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, 6)
        w = Param(rng.standard_normal((4, 3)))

        def f():
            return cross_entropy(x @ w.value, labels)[0]

        _, g = cross_entropy(x @ w.value, labels)
        assert finite_difference_check(f, w, x.T @ g, 1e-5, 1e-4).passed

    def test_non_finite_objective_aborts(self):
        p = Param(np.array([0.0]))
        with pytest.raises(GradientCheckError):
            with np.errstate(invalid="ignore"):
                finite_difference_check(lambda: float(np.log(p.value[0] - 1.0)), p, np.zeros(1))

    def test_value_restored(self):
        p = Param(np.array([0.3, -0.7]))
        finite_difference_check(lambda: float(p.value.sum()), p, np.ones(2))
        np.testing.assert_array_equal(p.value, [0.3, -0.7])


class TestSerialization:
    def test_layout(self):
        buf = io.BytesIO()
        write_tensor(buf, np.array([[1.0, 2.0, 3.0]]))
        raw = buf.getvalue()
        assert raw[:4] == (2).to_bytes(4, "little")
        assert raw[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(5).standard_normal((2, 3, 4))
        save_tensor(tmp_path / "t.bin", x)
        assert np.array_equal(load_tensor(tmp_path / "t.bin"), x)

    def test_truncated(self):
        buf = io.BytesIO()
        write_tensor(buf, np.ones((2, 2)))
        with pytest.raises(EOFError):
            read_tensor(io.BytesIO(buf.getvalue()[:-3]))
