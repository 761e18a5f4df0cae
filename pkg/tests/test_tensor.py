import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocaps.tensor import (
    DimensionError, RngState, as_tensor, elementwise, matmul, normal_init, reduce, resolve_dtype,
)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self, np_rng):
        a = np_rng.normal(size=(3, 3))
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_example(self):
        out = matmul(as_tensor([[1, 2], [3, 4]]), as_tensor([[0], [1]]))
        np.testing.assert_array_equal(out, [[2], [4]])

    def test_triple_loop_oracle(self, np_rng):
        a, b = np_rng.normal(size=(5, 4)), np_rng.normal(size=(4, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-13)

    def test_batched(self, np_rng):
        a, b = np_rng.normal(size=(2, 5, 4)), np_rng.normal(size=(2, 4, 3))
        out = matmul(a, b)
        for i in range(2):
            np.testing.assert_allclose(out[i], triple_loop(a[i], b[i]), atol=1e-13)

    def test_inner_mismatch_is_descriptive(self):
        with pytest.raises(DimensionError, match=r"\(3 != 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_batch_mismatch(self):
        with pytest.raises(DimensionError, match="batch"):
            matmul(np.ones((2, 2, 3)), np.ones((3, 3, 2)))

    def test_dtype_mismatch(self):
        with pytest.raises(TypeError):
            matmul(np.ones((2, 2), np.float32), np.ones((2, 2)))


class TestElementwise:
    def test_add_zero(self, np_rng):
        x = np_rng.normal(size=(4, 3))
        np.testing.assert_array_equal(elementwise("add", x, 0), x)

    def test_scale_one(self, np_rng):
        x = np_rng.normal(size=(4, 3))
        np.testing.assert_array_equal(elementwise("scale", x, 1), x)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20),
           st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_sub_inverts_add(self, xs, ys):
        n = min(len(xs), len(ys))
        x, y = np.array(xs[:n]), np.array(ys[:n])
        np.testing.assert_allclose(elementwise("sub", elementwise("add", x, y), y), x, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            elementwise("mul", np.ones(3), np.ones(4))

    def test_scale_rejects_tensor(self):
        with pytest.raises(DimensionError):
            elementwise("scale", np.ones(3), np.ones(3))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("pow", np.ones(3), 2.0)


class TestReduce:
    def test_sum(self):
        assert reduce("sum", as_tensor([1, 2, 3]), 0) == 6

    def test_l2norm_pythagoras(self):
        assert reduce("l2norm", as_tensor([3, 4]), 0) == 5

    def test_l2norm_zero(self):
        assert reduce("l2norm", np.zeros(4), 0) == 0

    def test_mean_and_max(self):
        a = as_tensor([[1, 5], [3, 2]])
        np.testing.assert_array_equal(reduce("mean", a, 0), [2, 3.5])
        np.testing.assert_array_equal(reduce("max", a, 1), [5, 3])

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            reduce("sum", np.ones((2, 2)), 2)


class TestNormalInit:
    def test_zero_stddev(self, rng):
        np.testing.assert_array_equal(normal_init((3, 4), 0.7, 0.0, rng), np.full((3, 4), 0.7))

    def test_statistics(self):
        x = normal_init((10 ** 6,), 0.0, 0.01, RngState(7))
        assert abs(x.mean()) < 1e-4
        assert abs(x.std() / 0.01 - 1) < 0.05

    def test_same_seed_bit_identical(self):
        a = normal_init((64, 8), 0.0, 1.0, RngState(3))
        b = normal_init((64, 8), 0.0, 1.0, RngState(3))
        assert a.tobytes() == b.tobytes()

    def test_dtype(self, rng):
        assert normal_init((2,), 0, 1, rng, "f32").dtype == np.float32

    def test_negative_stddev(self, rng):
        with pytest.raises(ValueError):
            normal_init((2,), 0, -1, rng)


class TestRngState:
    def test_split_is_independent_of_parent_draws(self):
        a = RngState(5)
        child1 = a.split("x").uniform(4)
        a.uniform(100)
        np.testing.assert_array_equal(child1, a.split("x").uniform(4))

    def test_split_names_differ(self):
        r = RngState(5)
        assert not np.array_equal(r.split("a").uniform(4), r.split("b").uniform(4))

    def test_uniform_range(self, rng):
        u = rng.uniform(10000)
        assert u.min() >= 0 and u.max() < 1

    @settings(max_examples=25)
    @given(st.integers(1, 500))
    def test_permutation(self, n):
        p = RngState(n).permutation(n)
        np.testing.assert_array_equal(np.sort(p), np.arange(n))

    def test_integers_bounds(self, rng):
        k = rng.integers(7, 5000)
        assert k.min() == 0 and k.max() == 6


def test_resolve_dtype_aliases():
    assert resolve_dtype("f32") == np.float32
    assert resolve_dtype("float64") == np.float64
    with pytest.raises(ValueError):
        resolve_dtype("f16")
