import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pcfnat import tensor as tn
from pcfnat.errors import ContractError, DimensionError
from pcfnat.gradcheck import finite_difference, run_check
from pcfnat.tensor import Tape, Tensor

from oracles import matmul_loops


def grad_of(fn, *inputs):
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    return [x.grad for x in inputs]


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])

    def test_basis_selection(self):
        out = tn.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        out = tn.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - matmul_loops(a, b)).max() < 1e-6

    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31 - 1))
    def test_shapes_up_to_64(self, M, K, N, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, (M, K)).astype(np.float32)
        b = rng.uniform(-1, 1, (K, N)).astype(np.float32)
        out = tn.matmul(Tensor(a), Tensor(b)).data
        assert out.dtype == np.float32
        ref = a.astype(np.float64) @ b.astype(np.float64)
        assert np.abs(out - ref).max() < 1e-5

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            tn.matmul(tn.zeros((2, 3)), tn.zeros((4, 5)))

    def test_batched(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)


class TestElementwise:
    def test_tanh_zero(self):
        assert tn.tanh(Tensor([0.0])).item() == 0.0

    def test_relu(self):
        np.testing.assert_array_equal(tn.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_sigmoid_slope_at_zero(self):
        with tn.precision(np.float64):
            x = Tensor([0.0], requires_grad=True)
            (g,) = grad_of(lambda x: tn.sum_(tn.sigmoid(x)), x)
            fd = finite_difference(lambda: tn.sum_(tn.sigmoid(x)), x, [(0,)], eps=1e-5)
        assert fd[0] == pytest.approx(0.25, abs=1e-9)
        assert g[0] == pytest.approx(0.25, abs=1e-12)

    def test_broadcast_error(self):
        with pytest.raises(DimensionError):
            tn.add(tn.zeros((2, 3)), tn.zeros((4,)))

    def test_scale_and_power(self):
        x = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_allclose(tn.scale(x, 2.0).data, [2, 4, 6])
        np.testing.assert_allclose((x ** 2).data, [1, 4, 9])

    def test_log_sqrt_values(self):
        x = Tensor([1.0, 4.0])
        np.testing.assert_allclose(tn.log(x).data, [0.0, np.log(4.0)], rtol=1e-6)
        np.testing.assert_allclose(tn.sqrt(x).data, [1.0, 2.0])

    def test_gelu_matches_tanh_approximation(self):
        x = np.linspace(-4, 4, 33)
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        with tn.precision(np.float64):
            np.testing.assert_allclose(tn.gelu(Tensor(x)).data, ref, atol=1e-12)

    def test_rsub_rdiv(self):
        x = Tensor([2.0])
        assert (1.0 - x).item() == -1.0
        assert (1.0 / x).item() == 0.5


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_no_overflow(self):
        out = tn.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0])

    def test_log_softmax_consistent(self):
        x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        np.testing.assert_allclose(np.exp(tn.log_softmax(x, 1).data), tn.softmax(x, 1).data, rtol=1e-5)

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-1e4, 1e4)),
           st.integers(0, 2))
    def test_rows_sum_to_one(self, arr, axis):
        axis = axis % arr.ndim
        with tn.precision(np.float64):
            out = tn.softmax(Tensor(arr), axis).data
        assert np.all(np.abs(out.sum(axis=axis) - 1) < 1e-6)


class TestReductionsAndShape:
    def test_pad_end(self):
        out = tn.pad_end(Tensor([1.0, 2.0, 3.0]), 1, 1, 0.0)
        np.testing.assert_array_equal(out.data, [0, 1, 2, 3, 0])

    def test_concat(self):
        out = tn.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
        np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])

    def test_variance_of_constant(self):
        assert tn.variance_along(Tensor([5.0] * 7), 0).item() == 0.0

    def test_variance_is_population(self):
        assert tn.variance_along(Tensor([1.0, 3.0]), 0).item() == pytest.approx(1.0)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            tn.sum_(tn.zeros((2, 3)), axis=2)
        with pytest.raises(DimensionError):
            tn.variance_along(tn.zeros((2, 3)), -3)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            tn.concat([tn.zeros((2, 3)), tn.zeros((3, 3))], axis=1)

    def test_slice_gradient_scatter(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = grad_of(lambda x: tn.sum_(x[:, 1:]), x)
        np.testing.assert_array_equal(g, [[0, 1, 1], [0, 1, 1]])

    def test_max_along_first_argmax(self):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        (g,) = grad_of(lambda x: tn.sum_(tn.max_along(x, 1)), x)
        np.testing.assert_array_equal(g, [[0, 1, 0]])

    def test_reshape_error(self):
        with pytest.raises(DimensionError):
            tn.reshape(tn.zeros((2, 3)), (4, 2))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        (g,) = grad_of(tn.sum_, x)
        np.testing.assert_array_equal(g, [1, 1, 1, 1])

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (g,) = grad_of(lambda x: tn.sum_(x * x), x)
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_second_backward_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tn.sum_(x * x)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)
        with pytest.raises(ContractError):
            with tape:
                pass

    def test_leaf_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = tn.sum_(x * 3.0)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad

    def test_unreached_parameter_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([5.0, 5.0], requires_grad=True)
        with Tape() as tape:
            loss = tn.sum_(x) + tn.sum_(y * 0.0)
        tape.backward(loss)
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_shared_input_sums_paths(self):
        x = Tensor([3.0], requires_grad=True)
        (g,) = grad_of(lambda x: tn.sum_(x * x + x), x)
        assert g[0] == 7.0

    def test_broadcast_gradient_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        ga, gb = grad_of(lambda a, b: tn.sum_(a * b), a, b)
        assert ga.shape == (2, 3) and gb.shape == (3,)
        np.testing.assert_array_equal(gb, [2, 2, 2])


class TestPrecision:
    def test_default_is_float32(self):
        assert Tensor([1.0]).dtype == np.float32
        assert tn.zeros((2,)).dtype == np.float32

    def test_precision_context(self):
        with tn.precision(np.float64):
            assert tn.default_dtype() == np.float64
            assert tn.ones((1,)).dtype == np.float64
        assert tn.default_dtype() == np.float32

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_debug_mode_flags_nan(self):
        tn.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                tn.log(Tensor([-1.0]))
        finally:
            tn.set_debug(False)


ELEMENTWISE = ["matmul", "add/sub/mul/div broadcast", "tanh", "sigmoid", "relu", "gelu", "exp",
               "log", "sqrt", "power", "softmax/log_softmax", "reductions/concat/slice/pad"]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", ELEMENTWISE)
def test_op_gradients_over_seeds(name, seed):
    result = run_check(name, seed)
    assert result.passed, result.line()
