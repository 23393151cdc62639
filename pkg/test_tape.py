import numpy as np
import pytest

import tape
from tape import TapeError


class TestArithmetic:

    def test_product_rule(self):
        a = tape.parameter([2.0, 3.0])
        b = tape.parameter([5.0, 7.0])
        store = tape.backward((a * b).sum())
        np.testing.assert_array_equal(store.of(a), [5.0, 7.0])
        np.testing.assert_array_equal(store.of(b), [2.0, 3.0])

    def test_broadcast_gradient_is_summed_back(self):
        a = tape.parameter(np.ones((3, 4)))
        bias = tape.parameter(np.zeros(4))
        store = tape.backward((a + bias).sum())
        np.testing.assert_array_equal(store.of(bias), np.full(4, 3.0))
        np.testing.assert_array_equal(store.of(a), np.ones((3, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(TapeError, match=r"\(2,\).*\(3,\)"):
            tape.parameter([1.0, 2.0]) + tape.parameter([1.0, 2.0, 3.0])

    def test_division_gradient(self):
        a = tape.parameter(3.0)
        b = tape.parameter(2.0)
        store = tape.backward(a / b)
        assert store.of(a) == pytest.approx(0.5)
        assert store.of(b) == pytest.approx(-0.75)

    def test_division_by_zero_is_clamped(self):
        out = tape.constant(1.0) / tape.constant(0.0)
        assert np.isfinite(out.data)
        assert out.data == pytest.approx(1e12)

    def test_matmul_gradients(self):
        x = tape.parameter(np.arange(6.0).reshape(2, 3))
        w = tape.parameter(np.ones((3, 2)))
        store = tape.backward((x @ w).sum())
        np.testing.assert_array_equal(store.of(x), np.full((2, 3), 2.0))
        np.testing.assert_array_equal(store.of(w), np.tile(x.data.sum(axis=0)[:, None], (1, 2)))

    def test_matmul_rejects_bad_dims(self):
        with pytest.raises(TapeError):
            tape.parameter(np.ones((2, 3))) @ tape.parameter(np.ones((2, 3)))


class TestClampedOps:

    def test_log_of_zero_is_finite_with_zero_gradient(self):
        x = tape.parameter([0.0, 1.0])
        y = tape.log(x)
        assert np.all(np.isfinite(y.data))
        store = tape.backward(y.sum())
        np.testing.assert_array_equal(store.of(x), [0.0, 1.0])

    def test_sqrt_of_zero_has_zero_gradient(self):
        x = tape.parameter([0.0, 4.0])
        store = tape.backward(tape.sqrt(x).sum())
        np.testing.assert_array_equal(store.of(x), [0.0, 0.25])

    def test_sigmoid_is_stable_far_out(self):
        y = tape.sigmoid(tape.constant([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])

    def test_non_finite_output_raises(self):
        with pytest.raises(TapeError, match="exp"):
            tape.exp(tape.constant([0.0, 1000.0]))


class TestTieRules:

    def test_minimum_ties_go_to_first_operand(self):
        a = tape.parameter(1.0)
        b = tape.parameter(1.0)
        store = tape.backward(tape.minimum(a, b))
        assert store.of(a) == 1.0
        assert store.of(b) == 0.0

    def test_maximum_ties_go_to_first_operand(self):
        a = tape.parameter(2.0)
        b = tape.parameter(2.0)
        store = tape.backward(tape.maximum(a, b))
        assert store.of(a) == 1.0
        assert store.of(b) == 0.0

    def test_reduce_max_routes_to_first_argmax(self):
        x = tape.parameter([1.0, 5.0, 5.0, 2.0])
        store = tape.backward(x.max())
        np.testing.assert_array_equal(store.of(x), [0.0, 1.0, 0.0, 0.0])

    def test_reduce_min_along_axis(self):
        x = tape.parameter([[3.0, 1.0, 1.0], [0.0, 2.0, 4.0]])
        store = tape.backward(x.min(axis=1).sum())
        np.testing.assert_array_equal(store.of(x), [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_empty_reduction_raises(self):
        with pytest.raises(TapeError, match="Empty"):
            tape.reduce("sum", tape.constant(np.zeros(0)))


class TestGraph:

    def test_detach_blocks_gradient(self):
        x = tape.parameter(3.0)
        y = x * tape.detach(x)
        store = tape.backward(y)
        assert store.of(x) == pytest.approx(3.0)

    def test_backward_needs_scalar(self):
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(tape.parameter([1.0, 2.0]) * 2.0)

    def test_constant_loss_gives_empty_store(self):
        store = tape.backward(tape.constant(1.0) * 3.0)
        assert len(store) == 0

    def test_unreachable_parameter_gets_zeros(self):
        used = tape.parameter(1.0)
        unused = tape.parameter([1.0, 2.0])
        store = tape.backward(used * 2.0)
        assert unused not in store
        np.testing.assert_array_equal(store.of(unused), [0.0, 0.0])

    def test_repeated_index_accumulates(self):
        x = tape.parameter([1.0, 2.0, 3.0])
        store = tape.backward(x[np.array([0, 0, 2])].sum())
        np.testing.assert_array_equal(store.of(x), [2.0, 0.0, 1.0])

    def test_basic_index_gradient(self):
        x = tape.parameter(np.arange(6.0).reshape(3, 2))
        store = tape.backward(x[..., 1].sum())
        np.testing.assert_array_equal(store.of(x), [[0, 1], [0, 1], [0, 1]])

    def test_concat_and_stack_split_gradients(self):
        a = tape.parameter([1.0, 2.0])
        b = tape.parameter([3.0])
        c = tape.concat([a, b], axis=0)
        store = tape.backward((c * tape.constant([1.0, 2.0, 3.0])).sum())
        np.testing.assert_array_equal(store.of(a), [1.0, 2.0])
        np.testing.assert_array_equal(store.of(b), [3.0])

        p = tape.parameter([1.0, 2.0])
        q = tape.parameter([3.0, 4.0])
        s = tape.stack([p, q], axis=-1)
        assert s.shape == (2, 2)
        store = tape.backward(s[:, 1].sum())
        np.testing.assert_array_equal(store.of(p), [0.0, 0.0])
        np.testing.assert_array_equal(store.of(q), [1.0, 1.0])

    def test_shared_subexpression_accumulates(self):
        x = tape.parameter(2.0)
        y = x * x + x
        store = tape.backward(y)
        assert store.of(x) == pytest.approx(5.0)

    def test_backward_is_bitwise_repeatable(self):
        rng = np.random.default_rng(0)
        w = tape.parameter(rng.normal(size=(4, 3)))
        x = tape.constant(rng.normal(size=(5, 4)))

        def loss():
            return tape.sigmoid(x @ w).mean() + tape.square(w).sum() * 0.01

        first = tape.backward(loss()).of(w)
        second = tape.backward(loss()).of(w)
        assert np.array_equal(first, second)

    def test_contributions_sum_in_ascending_consumer_order(self):
        x = tape.parameter(1.0)
        small = x * 1.0
        big = x * 1e17
        cancel = x * -1e17
        store = tape.backward(small + big + cancel)
        # (1 + 1e17) - 1e17 is 0 in float64; the reverse order would give 1
        assert store.of(x) == 0.0

    def test_row_gather_scatters_into_rows(self):
        x = tape.parameter(np.arange(8.0).reshape(4, 2))
        rows = np.array([3, 1, 3, -4])
        picked = x[rows]
        np.testing.assert_array_equal(picked.data, [[6, 7], [2, 3], [6, 7], [0, 1]])
        store = tape.backward((picked * tape.constant([[1.0, 2.0]])).sum())
        np.testing.assert_array_equal(store.of(x), [[1, 2], [1, 2], [0, 0], [2, 4]])

    def test_clip_passes_gradient_on_the_closed_interval(self):
        x = tape.parameter([-2.0, -1.0, 0.5, 1.0, 3.0])
        y = tape.clip(x, -1.0, 1.0)
        np.testing.assert_array_equal(y.data, [-1.0, -1.0, 0.5, 1.0, 1.0])
        store = tape.backward(y.sum())
        np.testing.assert_array_equal(store.of(x), [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_clip_with_per_column_bounds(self):
        x = tape.parameter([[-5.0, 5.0], [0.5, 0.5]])
        y = tape.clip(x, np.array([0.0, 0.0]), np.array([1.0, 4.0]))
        np.testing.assert_array_equal(y.data, [[0.0, 4.0], [0.5, 0.5]])
        store = tape.backward(y.sum())
        np.testing.assert_array_equal(store.of(x), [[0.0, 0.0], [1.0, 1.0]])

    def test_global_norm(self):
        a = tape.parameter([3.0])
        b = tape.parameter([4.0])
        store = tape.backward((a * 3.0 + b * 4.0).sum())
        assert store.global_norm([a, b]) == pytest.approx(5.0)


class TestGradCheck:

    def test_smooth_function_agrees(self):
        rng = np.random.default_rng(1)
        w = tape.parameter(rng.normal(size=(3, 2)))
        x = tape.constant(rng.normal(size=(4, 3)))
        error = tape.grad_check(lambda: tape.log(tape.sigmoid(x @ w) + 1.0).sum(), [w])
        assert error < 1e-6

    def test_parameters_restored_after_check(self):
        w = tape.parameter([0.3, -0.2])
        before = w.data.copy()
        tape.grad_check(lambda: tape.square(w).sum(), [w])
        assert np.array_equal(w.data, before)

    def test_wrong_gradient_is_detected(self):
        x = tape.parameter([0.7])
        # detach hides half the dependence from backward
        error = tape.grad_check(lambda: (x * tape.detach(x)).sum(), [x])
        assert error > 0.1

    def test_default_counts_every_difference(self):
        x = tape.parameter([0.5])

        def objective():
            # backward sees 1e-9 * x, the objective is 2e-9 * x: a relative error of 0.5
            return (x * 1e-9 + tape.detach(x) * 1e-9).sum()

        assert tape.grad_check(objective, [x]) == pytest.approx(0.5, rel=1e-3)
        assert tape.grad_check(objective, [x], abs_tol=1e-7) == 0.0

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            tape.grad_check(lambda: tape.parameter(1.0) * 1.0, [], h=0.0)
