import math

import numpy as np
import pytest

from sflow import autodiff as ad
from sflow.autodiff import Tensor
from sflow.errors import ContractError, NumericError
from sflow.flow import (CouplingLayer, ElementwiseAffine, FlowChain, chain_forward, chain_inverse,
                        coupling_forward, coupling_inverse, log_density, parity_mask,
                        transform_density)
from sflow.scorer import Scorer

from oracles import central_diff, gaussian_logpdf, jacobian, rel_error


def fixed_layer(log_s, t):
    """Token-split layer whose block emits the constant (log_s, t) on every row."""
    dim = len(t)
    layer = CouplingLayer(dim, "attention", model_dim=4, heads=2, rng=np.random.default_rng(0))
    layer.block.w_out.data[:] = 0.0
    layer.block.b_out.data = np.concatenate([log_s, t]).astype(float)
    return layer


def random_chain(rng, dim=16, length=8, split_mode="attention", head_scale=1.0, **kw):
    return FlowChain(dim, length, split_mode, model_dim=16, heads=4, ffn_dim=16, rng=rng,
                     head_scale=head_scale, **kw)


class TestCouplingExamples:
    def test_zero_block_is_identity(self, rng):
        layer = CouplingLayer(6, model_dim=8, heads=2, rng=rng)
        x = rng.normal(size=(1, 4, 6))
        style = np.array([[False, True, False, True]])
        y, ld = coupling_forward(x, layer, style)
        assert np.array_equal(y.data, x) and ld.item() == 0.0

    def test_fixed_scale_and_shift(self):
        layer = fixed_layer([math.log(2)] * 2, [1.0, 1.0])
        x = np.array([[[0.5, -0.5], [1.0, 2.0]]])
        style = np.array([[False, True]])
        y, ld = coupling_forward(x, layer, style)
        assert np.allclose(y.data[0, 1], [3.0, 5.0], atol=1e-14)
        assert np.array_equal(y.data[0, 0], x[0, 0])
        assert ld.item() == pytest.approx(2 * math.log(2), abs=1e-14)

    def test_fixed_scale_logdet_matches_jacobian(self):
        layer = fixed_layer([math.log(2)] * 2, [1.0, 1.0])
        x0 = np.array([[0.5, -0.5], [1.0, 2.0]])
        style = np.array([[False, True]])
        f = lambda v: coupling_forward(v.reshape(1, 2, 2), layer, style)[0].data.ravel()
        J = jacobian(f, x0.ravel())
        assert abs(np.linalg.slogdet(J)[1] - 2 * math.log(2)) < 1e-8

    def test_fixed_inverse(self):
        layer = fixed_layer([math.log(2)] * 2, [1.0, 1.0])
        y = np.array([[[0.5, -0.5], [3.0, 5.0]]])
        x, ld = coupling_inverse(y, layer, np.array([[False, True]]))
        assert np.allclose(x.data[0, 1], [1.0, 2.0], atol=1e-14)
        assert ld.item() == pytest.approx(-2 * math.log(2), abs=1e-14)

    def test_round_trip_1000_draws(self, rng):
        layer = CouplingLayer(8, model_dim=8, heads=2, rng=rng, head_scale=1.0)
        worst = 0.0
        for _ in range(1000):
            L = int(rng.integers(2, 9))
            x = rng.normal(size=(1, L, 8)) * rng.uniform(0.1, 5)
            style = np.zeros((1, L), bool)
            style[0, rng.choice(L, size=int(rng.integers(1, L)), replace=False)] = True
            y, _ = coupling_forward(x, layer, style)
            back, _ = coupling_inverse(y, layer, style)
            worst = max(worst, np.abs(back.data - x).max())
        assert worst < 1e-9

    def test_content_rows_bitwise_unchanged(self, rng):
        layer = CouplingLayer(8, model_dim=8, heads=2, rng=rng, head_scale=2.0)
        x = rng.normal(size=(2, 5, 8))
        style = np.array([[1, 0, 0, 1, 0], [0, 0, 1, 0, 0]], bool)
        y, _ = coupling_forward(x, layer, style)
        assert np.array_equal(y.data[~style], x[~style])
        assert not np.allclose(y.data[style], x[style])

    def test_style_rows_do_not_influence_scale(self, rng):
        layer = CouplingLayer(4, model_dim=8, heads=2, rng=rng, head_scale=1.0)
        x = rng.normal(size=(1, 4, 4))
        style = np.array([[False, True, False, False]])
        x2 = x.copy()
        x2[0, 1] += 3.0
        a = layer.scale_shift(Tensor(x), style, np.ones((1, 4), bool))
        b = layer.scale_shift(Tensor(x2), style, np.ones((1, 4), bool))
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_scale_bounded(self, rng):
        layer = CouplingLayer(4, model_dim=8, heads=2, rng=rng, head_scale=500.0)
        log_s, _ = layer.scale_shift(Tensor(rng.normal(size=(1, 3, 4))), np.array([[0, 1, 0]], bool),
                                     np.ones((1, 3), bool))
        assert np.abs(log_s.data).max() <= 5.0

    def test_empty_side_rejected(self, rng):
        layer = CouplingLayer(4, model_dim=8, heads=2, rng=rng)
        with pytest.raises(ContractError):
            coupling_forward(rng.normal(size=(1, 3, 4)), layer, np.zeros((1, 3), bool))
        with pytest.raises(ContractError):
            coupling_forward(rng.normal(size=(1, 3, 4)), layer, np.ones((1, 3), bool))

    def test_tiny_scale_inverse_fails_loudly(self, monkeypatch):
        layer = fixed_layer([0.0, 0.0], [0.0, 0.0])
        monkeypatch.setattr(layer, "scale_shift",
                            lambda *a: (Tensor(np.full((1, 2, 2), -40.0)), Tensor(np.zeros((1, 2, 2)))))
        with pytest.raises(NumericError):
            coupling_inverse(np.ones((1, 2, 2)), layer, np.array([[False, True]]))


class TestChain:
    def test_zero_chain_is_identity(self, rng):
        chain = random_chain(rng, dim=8, head_scale=0.0)
        x = rng.normal(size=(1, 6, 8))
        z = chain_forward(x, chain)
        assert np.array_equal(z.values.data, x) and z.logdet.item() == 0.0

    def test_logdet_is_sum_of_layers(self, rng):
        chain = random_chain(rng, dim=8)
        z = chain_forward(rng.normal(size=(3, 6, 8)), chain)
        total = sum(ld.data for ld in z.layer_logdets)
        assert np.array_equal(z.logdet.data, total) or np.allclose(z.logdet.data, total, rtol=0, atol=1e-15)

    def test_inverse_logdet_is_negated(self, rng):
        for _ in range(100):
            chain = random_chain(rng, dim=4, length=3)
            z = chain_forward(rng.normal(size=(1, 5, 4)), chain)
            _, ld = chain_inverse(z, chain, with_logdet=True)
            assert abs(ld.item() + z.logdet.item()) < 1e-10

    def test_logdet_matches_jacobian_two_tokens_three_channels(self, rng):
        chain = FlowChain(3, 8, model_dim=4, heads=2, rng=rng, head_scale=1.0)
        x0 = rng.normal(size=(1, 2, 3))
        z = chain_forward(x0, chain)
        f = lambda v: chain_forward(v.reshape(1, 2, 3), chain, partitions=z.partitions).values.data.ravel()
        expected = np.linalg.slogdet(jacobian(f, x0.ravel()))[1]
        assert rel_error(z.logdet.item(), expected) < 1e-4

    def test_round_trip_with_scorer(self, rng):
        scorer = Scorer.random(20, 16, rng=rng)
        chain = random_chain(rng, partition_source="layer")
        x = rng.normal(size=(4, 9, 16))
        nonpad = np.arange(9)[None, :] < np.array([[9], [5], [2], [7]])
        z = chain_forward(x, chain, scorer, nonpad)
        back = chain_inverse(z, chain)
        assert np.abs(back.data - x)[nonpad].max() < 1e-9

    def test_layer_partitions_differ_from_input_partitions(self, rng):
        scorer = Scorer.random(20, 16, rng=rng, scale=3.0)
        x = rng.normal(size=(1, 12, 16))
        seen = set()
        for source in ("layer", "input"):
            chain = random_chain(np.random.default_rng(3), partition_source=source, head_scale=2.0)
            z = chain_forward(x, chain, scorer)
            seen.add(tuple(p.tobytes() for p in z.partitions))
        assert len(seen) == 2

    def test_uniform_scorer_alternates_parity(self, rng):
        chain = random_chain(rng, dim=8)
        z = chain_forward(rng.normal(size=(1, 8, 8)), chain)
        assert np.flatnonzero(z.partitions[0][0]).tolist() == [0, 2]
        assert np.flatnonzero(z.partitions[1][0]).tolist() == [1, 3]

    def test_parity_mode_mask(self):
        nonpad = np.array([[1, 1, 1, 1, 1, 0]], bool)
        assert parity_mask(nonpad, 0)[0].tolist() == [1, 0, 1, 0, 1, 0]
        assert parity_mask(nonpad, 1)[0].tolist() == [0, 1, 0, 1, 0, 0]

    def test_short_sequence_rejected(self, rng):
        with pytest.raises(ContractError):
            chain_forward(rng.normal(size=(1, 1, 8)), random_chain(rng, dim=8))

    def test_partition_arity_checked(self, rng):
        chain = random_chain(rng, dim=8)
        z = chain_forward(rng.normal(size=(1, 4, 8)), chain)
        with pytest.raises(ContractError):
            chain_inverse(z.values, chain, z.partitions[:-1], z.nonpad)

    def test_logdet_param_gradients(self, rng):
        chain = FlowChain(3, 2, model_dim=4, heads=2, rng=rng, head_scale=1.0)
        x = rng.normal(size=(1, 3, 3))
        parts = chain_forward(x, chain).partitions
        params = chain.parameters()
        for name in ("layers.0.block.w_out", "layers.1.block.wq", "layers.0.block.ln1_g"):
            p = params[name]
            p.grad = None
            ad.backward(chain_forward(x, chain, partitions=parts).logdet.sum())
            analytic = p.grad.copy()
            p.grad = None
            base = p.data.copy()

            def f(v):
                p.data = v
                out = chain_forward(x, chain, partitions=parts).logdet.item()
                p.data = base
                return out

            assert rel_error(analytic, central_diff(f, base.copy())) < 1e-4, name
        for p in params.values():
            p.grad = None


class TestDensity:
    def test_identity_at_origin(self):
        z = transform_density(np.zeros((1, 1, 5)), [ElementwiseAffine(5)])
        assert log_density(z).item() == pytest.approx(-2.5 * math.log(2 * math.pi), abs=1e-14)

    def test_scaling_flow_integrates_to_one(self):
        grid = np.arange(-10, 10 + 1e-9, 1e-3)
        layer = ElementwiseAffine(1, log_scale=np.array([math.log(2)]))
        dens = np.exp(log_density(transform_density(grid.reshape(-1, 1, 1), [layer])).data)
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-2

    def test_affine_flow_matches_determinant(self, rng):
        # two channel-split couplings make a dense Jacobian; the oracle is the explicit 2x2 det
        chain = FlowChain(2, 2, "channel", model_dim=4, heads=2, rng=rng, head_scale=1.0)
        for _ in range(20):
            x0 = rng.normal(size=2)
            J = np.zeros((2, 2))
            for i in range(2):
                x = Tensor(x0.reshape(1, 1, 2).copy(), requires_grad=True)
                ad.backward(transform_density(x, chain.layers).values[0, 0, i])
                J[i] = x.grad.ravel()
            det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
            y = transform_density(x0.reshape(1, 1, 2), chain.layers).values.data.ravel()
            expected = gaussian_logpdf(y) + math.log(abs(det))
            got = log_density(transform_density(x0.reshape(1, 1, 2), chain.layers)).item()
            assert rel_error(got, expected) < 1e-10

    @staticmethod
    def _grid_mass(chain, step=0.02):
        g = np.arange(-10, 10 + 1e-9, step)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], -1).reshape(-1, 1, 2)
        with ad.no_grad():
            dens = np.concatenate([np.exp(log_density(transform_density(pts[i:i + 50000], chain.layers)).data)
                                   for i in range(0, len(pts), 50000)])
        return np.trapezoid(np.trapezoid(dens.reshape(len(g), len(g)), g, axis=1), g)

    @staticmethod
    def _mass_outside(chain, n=200000):
        h = Tensor(np.random.default_rng(1).normal(size=(n, 1, 2)))
        with ad.no_grad():
            for layer in reversed(chain.layers):
                h, _ = layer.inverse(h, None, np.ones((n, 1), bool))
        return (np.abs(h.data.reshape(-1, 2)) > 10).any(1).mean()

    def test_channel_flow_2d_integrates_to_one(self, rng):
        chain = FlowChain(2, 4, "channel", model_dim=4, heads=2, rng=rng, head_scale=0.2)
        assert abs(self._grid_mass(chain) - 1.0) < 1e-2

    def test_grid_shortfall_is_tail_mass(self, rng):
        # a wider flow leaks mass past the grid edge; sampling accounts for the gap
        chain = FlowChain(2, 4, "channel", model_dim=4, heads=2, rng=rng, head_scale=0.5)
        assert abs(self._grid_mass(chain) + self._mass_outside(chain) - 1.0) < 3e-3
