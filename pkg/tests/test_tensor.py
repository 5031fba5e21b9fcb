import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from coda import tensor
from coda.tensor import DimensionError


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for p in range(a.shape[1]):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(tensor.matmul(np.eye(2), m), m)

    def test_hand_example(self):
        np.testing.assert_array_equal(tensor.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        np.testing.assert_allclose(tensor.matmul(a, b), triple_loop(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tensor.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
            left = tensor.matmul(tensor.matmul(a, b), c)
            right = tensor.matmul(a, tensor.matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))

    def test_counts_multiply_adds_per_tag(self):
        with tensor.counting() as c:
            tensor.matmul(np.ones((3, 4)), np.ones((4, 5)))
            with tensor.op_tag("x"):
                tensor.matmul(np.ones((2, 3, 4)), np.ones((4, 1)))
        assert c.by_tag == {"other": 60, "x": 24}
        assert c.total == 84

    def test_no_counter_outside_block(self):
        tensor.matmul(np.ones((2, 2)), np.ones((2, 2)))
        tensor.record_ops(10)  # silently ignored


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = tensor.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_already_normalized(self):
        out = tensor.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-15)
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-12)

    def test_moments(self, rng):
        out = tensor.layer_norm(rng.normal(size=(4, 8)) * 3 + 1, np.ones(8), np.zeros(8))
        assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
        assert np.all(np.abs(out.var(axis=1) - 1) < 1e-6)

    def test_gain_bias_elementwise(self, rng):
        x = rng.normal(size=(3, 5))
        g, b = rng.normal(size=5), rng.normal(size=5)
        base = tensor.layer_norm(x, np.ones(5), np.zeros(5))
        np.testing.assert_allclose(tensor.layer_norm(x, g, b), base * g + b, atol=1e-14)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(6, 8))
        shifted = x + rng.normal(size=(6, 1)) * 10
        np.testing.assert_allclose(tensor.layer_norm(shifted, np.ones(8), np.zeros(8)),
                                   tensor.layer_norm(x, np.ones(8), np.zeros(8)), atol=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.layer_norm(np.zeros((2, 3)), np.ones(2), np.zeros(3))

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            tensor.layer_norm(np.zeros((2, 3)), np.ones(3), np.zeros(3), eps=0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tensor.row_softmax(np.full((1, 7), 2.5)), np.full((1, 7), 1 / 7))

    def test_hand_example(self):
        np.testing.assert_allclose(tensor.row_softmax(np.array([[0.0, np.log(3)]])), [[0.25, 0.75]], atol=1e-15)

    def test_large_entries_are_stable(self):
        out = tensor.row_softmax(np.array([[1e4, -1e4, 1e4 - 1.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1) < 1e-12

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                      elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        out = tensor.row_softmax(x)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-300, 300)))
    def test_logsumexp_matches_direct_formula(self, x):
        mx = max(x)
        direct = mx + np.log(sum(np.exp(v - mx) for v in x))
        assert abs(tensor.logsumexp(x) - direct) <= 1e-12 * max(1.0, abs(direct))

    def test_logsumexp_is_order_free(self, rng):
        x = rng.normal(size=33) * 5
        p = rng.permutation(33)
        assert tensor.logsumexp(x) == tensor.logsumexp(x[p])


class TestRng:
    def test_reproducible(self):
        a, b = tensor.Rng(42), tensor.Rng(42)
        np.testing.assert_array_equal(a.normal(10_000), b.normal(10_000))

    def test_different_seeds_differ(self):
        assert not np.array_equal(tensor.Rng(1).normal(8), tensor.Rng(2).normal(8))

    def test_platform_stable_stream(self):
        # PCG64 with seed 0 has a fixed, documented first output
        assert tensor.Rng(0).integers(0, 2**32) == np.random.Generator(np.random.PCG64(0)).integers(0, 2**32)

    def test_choice_rows_distinct(self):
        rows = tensor.Rng(3).choice_rows(10, 4, 50)
        assert rows.shape == (50, 4)
        assert all(len(set(r)) == 4 for r in rows)

    def test_spawn_is_deterministic(self):
        np.testing.assert_array_equal(tensor.Rng(5).spawn(3).normal(4), tensor.Rng(5).spawn(3).normal(4))
        assert not np.array_equal(tensor.Rng(5).spawn(3).normal(4), tensor.Rng(5).spawn(4).normal(4))


class TestTensorText:
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                      elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip_is_exact(self, m):
        np.testing.assert_array_equal(tensor.parse_tensor(tensor.format_tensor(m)), m)

    def test_header_format(self):
        assert tensor.format_tensor(np.array([[1.0, 2.5]])) == "1 2\n1.0 2.5\n"

    def test_comments_and_directives(self):
        text = "# grid 1 2\n1 2\n\n3 4\n"
        np.testing.assert_array_equal(tensor.parse_tensor(text), [[3.0, 4.0]])
        assert tensor.tensor_directives(text) == {"grid": ["1", "2"]}

    def test_row_count_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.parse_tensor("3 2\n1 2\n3 4\n")

    def test_col_count_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.parse_tensor("2 2\n1 2\n3 4 5\n")

    def test_bad_header(self):
        with pytest.raises(ValueError):
            tensor.parse_tensor("two rows\n1 2\n")

    def test_file_round_trip(self, tmp_path, rng):
        m = rng.normal(size=(3, 4))
        tensor.write_tensor(tmp_path / "m.txt", m)
        np.testing.assert_array_equal(tensor.read_tensor(tmp_path / "m.txt"), m)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            tensor.format_tensor(np.array([[np.nan]]))
