import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magelab import autodiff as ad
from magelab import testing

finite = st.floats(min_value=-3, max_value=3, allow_nan=False, allow_infinity=False)


def scalar_leaf(g, x, rg=True):
    return g.make_input((1,), [x], requires_grad=rg)


class TestInputs:
    def test_make_input_holds_data(self):
        g = ad.Graph()
        assert np.array_equal(g.make_input((2,), [1, 2]).data, [1.0, 2.0])

    def test_eval_zero_leaf(self):
        g = ad.Graph()
        assert np.array_equal(g.eval(g.make_input((1,), [0])), [0.0])

    def test_identity_matrix(self):
        g = ad.Graph()
        eye = g.make_input((2, 2), [1, 0, 0, 1])
        assert np.array_equal(eye.data, np.eye(2))

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.Graph().make_input((3,), [1, 2])

    def test_uninitialized_leaf(self):
        g = ad.Graph()
        x = g.make_input((2,))
        y = ad.square(x)
        with pytest.raises(ad.UninitializedLeafError):
            g.eval(y)
        g.set_input(x, [1, 3])
        assert np.array_equal(g.eval(y), [1.0, 9.0])

    def test_memoized_reevaluation(self):
        g = ad.Graph()
        x = g.make_input((1,), [2.0])
        y = ad.mul(x, x)
        g.set_input(x, [5.0])
        assert g.eval(y)[0] == 25.0

    def test_ids_dense_and_increasing(self):
        g = ad.Graph()
        x = g.make_input((2,), [1, 2])
        ad.sum(ad.tanh(ad.add(x, x)))
        assert [v.id for v in g.nodes] == list(range(len(g.nodes)))
        for v in g.nodes:
            assert all(p.id < v.id for p in v.parents)


class TestPrimitives:
    def test_swish_zero(self):
        g = ad.Graph()
        assert ad.swish(g.constant([0.0])).data[0] == 0.0

    def test_huber_pieces(self):
        g = ad.Graph()
        assert ad.huber(g.constant([2.0])).data[0] == 1.5
        assert ad.huber(g.constant([0.5])).data[0] == 0.125

    def test_l2_norm(self):
        g = ad.Graph()
        assert abs(ad.l2_norm_smoothed(g.constant([3.0, 4.0])).data - 5.0) < 1e-9

    def test_product(self):
        g = ad.Graph()
        assert g.eval(ad.mul(g.constant([2.0]), g.constant([3.0])))[0] == 6.0

    def test_sum_of_identity_product(self):
        g = ad.Graph()
        eye = g.make_input((2, 2), [1, 0, 0, 1])
        assert g.eval(ad.sum(ad.matmul(eye, g.constant([1.0, 2.0])))) == 3.0

    def test_reparam_unit_scale(self):
        g = ad.Graph()
        eps = np.array([0.3, -1.2])
        out = ad.gaussian_reparam(g.constant([0.0, 0.0]), g.constant([0.0, 0.0]), g.constant(eps))
        assert np.array_equal(out.data, eps)

    def test_log_of_negative_raises(self):
        g = ad.Graph()
        with pytest.raises(ad.EvaluationError):
            ad.log(g.constant([-1.0]))

    def test_sqrt_of_negative_raises(self):
        g = ad.Graph()
        with pytest.raises(ad.EvaluationError):
            ad.sqrt(g.constant([-0.5]))

    def test_shape_mismatch(self):
        g = ad.Graph()
        with pytest.raises(ad.ShapeError):
            ad.add(g.constant([1.0, 2.0]), g.constant([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        g = ad.Graph()
        out = ad.mul(g.constant([2.0]), g.constant([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [2.0, 4.0, 6.0])

    def test_mixing_graphs_rejected(self):
        with pytest.raises(ValueError):
            ad.add(ad.Graph().constant([1.0]), ad.Graph().constant([1.0]))


class TestGrad:
    def test_square(self):
        g = ad.Graph()
        x = scalar_leaf(g, 3.0)
        assert ad.grad_arrays(ad.sum(ad.square(x)), [x])[0][0] == 6.0

    def test_second_derivative_of_cube(self):
        g = ad.Graph()
        x = scalar_leaf(g, 2.0)
        first = ad.grad(ad.sum(ad.mul(ad.mul(x, x), x)), [x], create_graph=True)[0]
        assert not first.is_leaf
        assert abs(ad.grad_arrays(ad.sum(first), [x])[0][0] - 12.0) < 1e-12

    def test_swish_slope_at_zero(self):
        g = ad.Graph()
        x = scalar_leaf(g, 0.0)
        assert ad.grad_arrays(ad.sum(ad.swish(x)), [x])[0][0] == 0.5

    def test_smoothed_norm_at_origin(self):
        g = ad.Graph()
        x = g.make_input((2,), [0.0, 0.0], requires_grad=True)
        assert np.array_equal(ad.grad_arrays(ad.l2_norm_smoothed(x), [x])[0], [0.0, 0.0])

    def test_non_scalar_output_rejected(self):
        g = ad.Graph()
        x = g.make_input((2,), [1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.grad(ad.square(x), [x])

    def test_unreachable_input_is_zero(self):
        g = ad.Graph()
        x = g.make_input((2,), [1.0, 2.0], requires_grad=True)
        y = g.make_input((3,), [1.0, 2.0, 3.0], requires_grad=True)
        gy = ad.grad(ad.sum(ad.square(x)), [x, y])[1]
        assert np.array_equal(gy.data, np.zeros(3))

    def test_first_order_results_are_constants(self):
        g = ad.Graph()
        x = scalar_leaf(g, 1.5)
        gx = ad.grad(ad.sum(ad.tanh(x)), [x])[0]
        assert gx.is_leaf and not gx.requires_grad

    def test_grad_wrt_intermediate(self):
        g = ad.Graph()
        x = scalar_leaf(g, 0.4)
        h = ad.tanh(x)
        gh, gx = ad.grad_arrays(ad.sum(ad.square(h)), [h, x])
        assert gh[0] == pytest.approx(2 * np.tanh(0.4))
        assert gx[0] == pytest.approx(2 * np.tanh(0.4) * (1 - np.tanh(0.4) ** 2))

    @given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
           st.floats(-2, 2), st.floats(-2, 2))
    def test_linearity(self, x0, w, a, b):
        g = ad.Graph()
        x = g.make_input((4,), x0, requires_grad=True)
        f = ad.sum(ad.mul(ad.tanh(x), g.constant(w)))
        h = ad.sum(ad.swish(x))
        combo = ad.add(ad.scalar_mul(f, a), ad.scalar_mul(h, b))
        lhs = ad.grad_arrays(combo, [x])[0]
        rhs = a * ad.grad_arrays(f, [x])[0] + b * ad.grad_arrays(h, [x])[0]
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    @given(arrays(float, 3, elements=finite))
    @settings(max_examples=30)
    def test_hessian_symmetric(self, x0):
        g = ad.Graph()
        x = g.make_input((3,), x0, requires_grad=True)
        f = ad.add(ad.sum(ad.swish(ad.mul(x, ad.slice_last(ad.concat([x, x]), 1, 4)))),
                   ad.l2_norm_smoothed(ad.tanh(x)))
        gx = ad.grad(f, [x], create_graph=True)[0]
        hess = np.stack([ad.grad_arrays(ad.sum(ad.slice_last(gx, i, i + 1)), [x])[0] for i in range(3)])
        assert np.max(np.abs(hess - hess.T)) <= 1e-8

    def test_deterministic_reevaluation(self):
        def build(seed):
            g = ad.Graph(seed)
            x = g.make_input((5,), np.linspace(-1, 1, 5))
            return ad.gaussian_reparam(x, ad.tanh(x), g.normal((5,))).data

        assert np.array_equal(build(3), build(3))


class TestFiniteDifferences:
    def test_square(self):
        err = ad.finite_difference_check(lambda g, v: ad.sum(ad.square(v[0])), [np.array([3.0])], eps=1e-5)
        assert err < 1e-6

    def test_tanh(self):
        err = ad.finite_difference_check(lambda g, v: ad.sum(ad.tanh(v[0])), [np.array([0.7])])
        assert err < 1e-6

    def test_second_order_quartic(self):
        g = ad.Graph()
        x = scalar_leaf(g, 1.5)
        x4 = ad.square(ad.square(x))
        first = ad.grad(ad.sum(x4), [x], create_graph=True)[0]
        assert abs(ad.grad_arrays(ad.sum(first), [x])[0][0] - 27.0) / 27.0 < 1e-4
        fd = ad.numeric_gradient(lambda g, v: ad.sum(ad.grad(ad.sum(ad.square(ad.square(v[0]))), v,
                                                             create_graph=True)[0]), [np.array([1.5])], 1e-5)
        assert abs(fd[0][0] - 27.0) / 27.0 < 1e-4

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda g, v: ad.sum(v[0]), [np.array([1.0])], eps=0.1)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_graphs(self, seed):
        rng = np.random.default_rng(1000 + seed)
        rg = testing.random_graph(rng)
        check = ad.check_first_and_second_order(rg.builder, rg.point, rng, eps=1e-5)
        assert check.first_order < 1e-4
        assert check.second_order < 1e-4

    @pytest.mark.parametrize("kind", ["atan2", "div", "sin", "cos", "exp", "log", "sqrt", "relu", "sigmoid",
                                      "expand", "transpose", "reshape", "mean_axis", "l1_axis", "l2_axis"])
    def test_individual_kinds(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        x0 = rng.uniform(0.3, 1.5, size=(2, 3))
        y0 = rng.uniform(0.3, 1.5, size=(2, 3))

        def build(g, v):
            x, y = v
            out = {
                "atan2": lambda: ad.atan2(x, y),
                "div": lambda: ad.div(x, y),
                "sin": lambda: ad.sin(x),
                "cos": lambda: ad.cos(x),
                "exp": lambda: ad.exp(x),
                "log": lambda: ad.log(x),
                "sqrt": lambda: ad.sqrt(x),
                "relu": lambda: ad.relu(ad.sub(x, y)),
                "sigmoid": lambda: ad.sigmoid(x),
                "expand": lambda: ad.mul(ad.expand(ad.sum(x, axis=0), (2, 3), axis=0), y),
                "transpose": lambda: ad.matmul(ad.transpose(x), y),
                "reshape": lambda: ad.mul(ad.reshape(x, (3, 2)), ad.reshape(y, (3, 2))),
                "mean_axis": lambda: ad.mul(ad.mean(x, axis=1), ad.mean(y, axis=1)),
                "l1_axis": lambda: ad.l1_norm(ad.sub(x, ad.scalar_mul(y, 2.0)), axis=1),
                "l2_axis": lambda: ad.l2_norm_smoothed(ad.mul(x, y), axis=1),
            }[kind]()
            return ad.sum(ad.square(out))

        check = ad.check_first_and_second_order(build, [x0, y0], rng, eps=1e-5)
        assert check.first_order < 1e-5
        assert check.second_order < 1e-4
