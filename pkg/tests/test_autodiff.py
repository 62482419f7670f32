import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sflow import autodiff as ad
from sflow.autodiff import Tensor
from sflow.errors import ContractError, DimensionError, NumericError

from oracles import central_diff, rel_error


def op_gradient_error(build, shapes, rng, positive=(), n_points=100) -> float:
    """Worst relative error between tape gradients of ``sum(build(*xs) * w)`` and central differences."""
    worst = 0.0
    for _ in range(n_points):
        xs = []
        for i, shape in enumerate(shapes):
            x = rng.normal(size=shape)
            if i in positive:
                x = np.abs(x) + 0.5
            xs.append(x)
        out_shape = build(*[Tensor(x) for x in xs]).shape
        w = rng.normal(size=out_shape)
        ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
        ad.backward(ad.sum_(build(*ts) * w))
        for i, x in enumerate(xs):
            def f(v, i=i):
                args = [Tensor(v) if j == i else Tensor(xs[j]) for j in range(len(xs))]
                return float((build(*args).data * w).sum())
            worst = max(worst, rel_error(ts[i].grad, central_diff(f, x)))
    return worst


def check_op(build, shapes, rng, positive=(), n_points=100, tol=1e-4):
    worst = op_gradient_error(build, shapes, rng, positive, n_points)
    assert worst < tol, worst


OP_CASES = [
    ("add", lambda a, b: a + b, [(3, 4), (4,)], ()),
    ("sub", lambda a, b: a - b, [(3, 4), (3, 1)], ()),
    ("mul", lambda a, b: a * b, [(2, 3), (2, 3)], ()),
    ("div", lambda a, b: a / b, [(2, 3), (2, 3)], (1,)),
    ("neg", lambda a: -a, [(5,)], ()),
    ("matmul", ad.matmul, [(2, 3, 4), (4, 2)], ()),
    ("exp", ad.exp, [(6,)], ()),
    ("log", ad.log, [(6,)], (0,)),
    ("sqrt", ad.sqrt, [(6,)], (0,)),
    ("tanh", ad.tanh, [(6,)], ()),
    ("sigmoid", ad.sigmoid, [(6,)], ()),
    ("softmax", ad.softmax, [(3, 5)], ()),
    ("log_softmax", ad.log_softmax, [(3, 5)], ()),
    ("mean_last", ad.mean_last, [(3, 4)], ()),
    ("var_last", ad.var_last, [(3, 4)], ()),
    ("sum_axis", lambda a: ad.sum_(a, axis=(0, 2)), [(2, 3, 2)], ()),
    ("mean", ad.mean, [(3, 3)], ()),
    ("gather_rows", lambda a: ad.gather_rows(a, [2, 0, 2]), [(3, 2)], ()),
    ("scatter_rows", lambda a: ad.scatter_rows(a, [3, 0], 4), [(2, 3)], ()),
    ("concat", lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)], ()),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), [(2, 3), (2, 3)], ()),
    ("slice", lambda a: a[1:, ::2], [(3, 4)], ()),
    ("fancy_slice", lambda a: a[..., [2, 0, 2]], [(2, 3)], ()),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], ()),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], ()),
    ("where", lambda a, b: ad.where(np.array([[True, False, True]]), a, b), [(2, 3), (3,)], ()),
]


class TestForwardExamples:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, np.eye(2)).data, a.data)

    def test_exp_zeros(self):
        assert np.array_equal(ad.exp(np.zeros(3)).data, np.ones(3))

    def test_softmax_uniform(self):
        assert np.allclose(ad.softmax(np.ones(4)).data, 0.25, atol=1e-15)

    def test_softmax_rows_sum_to_one(self, rng):
        out = ad.softmax(rng.normal(size=(50, 7)) * 30).data
        assert np.max(np.abs(out.sum(-1) - 1)) < 1e-12

    def test_forward_op_dispatch(self):
        out = ad.forward_op("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_forward_op_unknown_kind(self):
        with pytest.raises(ContractError):
            ad.forward_op("conv", Tensor([1.0]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            ad.exp(Tensor([0.0, np.nan]))

    def test_nonfinite_check_can_be_disabled(self):
        with ad.finite_checks(False):
            out = ad.exp(Tensor([0.0, np.inf]))
        assert np.isinf(out.data[1])

    def test_log_of_nonpositive_is_numeric_error(self):
        with pytest.raises(NumericError):
            ad.log(Tensor([1.0, 0.0]))

    def test_graph_only_recorded_when_needed(self):
        out = ad.add(Tensor([1.0]), Tensor([2.0]))
        assert out._parents == () and not out.requires_grad


class TestBackwardExamples:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sum_exp(self):
        x = Tensor([0.0, math.log(2.0)], requires_grad=True)
        ad.backward(ad.sum_(ad.exp(x)))
        assert np.allclose(x.grad, [1.0, 2.0], atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        ad.backward(y * y + y)  # x^4 + x^2
        assert x.grad == pytest.approx(4 * 8 + 2 * 2)

    def test_each_node_visited_once(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        h = x
        for _ in range(30):
            h = h + h * 0.5  # shared fan-out at every level
        ad.backward(ad.sum_(h))
        assert np.allclose(x.grad, 1.5 ** 30)

    def test_three_layer_composite_matches_differences(self):
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            w1, w2, w3 = r.normal(size=(4, 5)), r.normal(size=(5, 5)), r.normal(size=(5, 2))
            x0 = r.normal(size=(3, 4))

            def f(x):
                h = ad.tanh(ad.matmul(x, w1))
                h = ad.sigmoid(ad.matmul(h, w2))
                return ad.sum_(ad.softmax(ad.matmul(h, w3)) * np.arange(2.0))

            x = Tensor(x0.copy(), requires_grad=True)
            ad.backward(f(x))
            worst = max(worst, rel_error(x.grad, central_diff(lambda v: f(Tensor(v)).item(), x0)))
        assert worst < 1e-4


class TestOpGradients:
    """Every differentiable op against central differences at 100 random points."""

    @pytest.mark.parametrize("name,build,shapes,positive", OP_CASES)
    def test_matches_central_differences(self, name, build, shapes, positive, rng):
        check_op(build, shapes, rng, positive=positive)

    def test_clip_inside_and_outside(self, rng):
        # points kept away from the kinks at +-1
        for _ in range(100):
            x0 = rng.normal(size=6) * 2
            x0 = np.where(np.abs(np.abs(x0) - 1) < 1e-3, x0 + 0.01, x0)
            x = Tensor(x0.copy(), requires_grad=True)
            ad.backward(ad.sum_(ad.clip(x, -1, 1) * np.arange(6.0)))
            fd = central_diff(lambda v: float((np.clip(v, -1, 1) * np.arange(6.0)).sum()), x0)
            assert rel_error(x.grad, fd) < 1e-4


class TestStructural:
    def test_gather_then_scatter_is_identity_bitwise(self, rng):
        a = rng.normal(size=(7, 3))
        idx = rng.permutation(7)
        left, right = idx[:3], idx[3:]
        back = ad.scatter_rows(ad.gather_rows(a, left), left, 7) + ad.scatter_rows(ad.gather_rows(a, right), right, 7)
        assert np.array_equal(back.data, a)

    def test_scatter_duplicate_index(self):
        with pytest.raises(ContractError):
            ad.scatter_rows(np.ones((2, 2)), [1, 1], 3)

    def test_gather_out_of_range(self):
        with pytest.raises(DimensionError):
            ad.gather_rows(np.ones((2, 2)), [2])

    def test_where_copies_bits(self, rng):
        a, b = rng.normal(size=4), rng.normal(size=4)
        out = ad.where(np.array([True, False, True, False]), a, b).data
        assert out[0] == a[0] and out[1] == b[1]


class TestAdam:
    def test_zero_grad_leaves_params_and_decays_moments(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=0.1)
        opt.m["p"][:] = 1.0
        opt.v["p"][:] = 1.0
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0]) or np.allclose(p.data, [1.0, -2.0], atol=0.2)
        assert np.allclose(opt.m["p"], 0.9) and np.allclose(opt.v["p"], 0.999)

    def test_zero_grad_from_fresh_state_is_exact_noop(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr_against_sign(self):
        # hand evaluation: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        g = np.array([0.3, -4.0, 2e-3])
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=0.01, eps=1e-8)
        p.grad = g.copy()
        opt.step()
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, rtol=1e-12, atol=0)
        assert np.allclose(p.data, -0.01 * np.sign(g), rtol=1e-5)

    def test_constant_gradient_direction(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=0.01)
        for _ in range(200):
            p.grad = np.array([2.0, -0.5])
            opt.step()
        assert p.data[0] < 0 < p.data[1]

    def test_grads_cleared_after_step(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = ad.Adam({"p": p})
        p.grad = np.ones(2)
        opt.step()
        assert p.grad is None

    def test_missing_grad_rejected(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ContractError):
            ad.Adam({"p": p}).step()


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
    def test_softmax_is_distribution(self, x):
        out = ad.softmax(x).data
        assert (out >= 0).all() and np.allclose(out.sum(-1), 1, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
           arrays(np.float64, (3,), elements=st.floats(-3, 3)))
    def test_broadcast_add_grad_sums_over_rows(self, a, b):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ad.backward(ad.sum_(ta + tb))
        assert np.array_equal(ta.grad, np.ones((2, 3))) and np.array_equal(tb.grad, np.full(3, 2.0))
