import numpy as np
import pytest

from lstta import tensor as tt
from lstta.params import ParamStore
from lstta.tensor import ShapeError, Tensor
from lstta.units import AdapterUnit, CmaUnit, ProjectionUnit, adapter, cma, cma_projected, mcma


def gate(value):
    store = ParamStore()
    unit = CmaUnit.create(store, "g_test")
    unit.g.data = np.array(value)
    return unit


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def oracle_cma(x, y, g, s=None):
    """Per-timestamp loop transcription of the gated attention update."""
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        logits = x[t] @ y[t].T
        if s is not None:
            logits = logits * s[t]
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[t] = x[t] + np.tanh(g) * (w @ y[t])
    return out


class TestCma:
    def test_closed_gate_is_identity(self):
        rng = np.random.default_rng(0)
        x, y = rand(rng, 3, 4, 5), rand(rng, 3, 6, 5)
        np.testing.assert_array_equal(cma(gate(0.0), x, y).data, x.data)

    def test_single_source_token(self):
        rng = np.random.default_rng(1)
        x, y = rand(rng, 2, 4, 3), rand(rng, 2, 1, 3)
        out = cma(gate(0.7), x, y).data
        np.testing.assert_allclose(out, x.data + np.tanh(0.7) * y.data, atol=1e-14)

    def test_duplicate_source_tokens(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 2, 4, 3)
        tok = rng.normal(size=(2, 1, 3))
        y = Tensor(np.concatenate([tok, tok], axis=1))
        out = cma(gate(-0.4), x, y).data
        np.testing.assert_allclose(out, x.data + np.tanh(-0.4) * tok, atol=1e-14)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, y = rand(rng, 4, 5, 6), rand(rng, 4, 7, 6)
        np.testing.assert_allclose(cma(gate(0.3), x, y).data, oracle_cma(x.data, y.data, 0.3), atol=1e-12)

    def test_update_lies_in_source_span(self):
        rng = np.random.default_rng(4)
        x, y = rand(rng, 3, 5, 8), rand(rng, 3, 3, 8)
        delta = cma(gate(0.9), x, y).data - x.data
        for t in range(3):
            coef, *_ = np.linalg.lstsq(y.data[t].T, delta[t].T, rcond=None)
            assert np.abs(y.data[t].T @ coef - delta[t].T).max() < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cma(gate(0.1), Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 3, 5))))
        with pytest.raises(ShapeError):
            cma(gate(0.1), Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 3, 4))))

    def test_projection_bridges_widths(self):
        rng = np.random.default_rng(5)
        store = ParamStore()
        proj = ProjectionUnit.create(store, "proj", 6, 4, rng)
        x, y = rand(rng, 2, 3, 4), rand(rng, 2, 5, 6)
        out = cma_projected(gate(0.5), proj, x, y)
        assert out.shape == x.shape
        y_proj = y.data @ proj.w.data + proj.b.data
        np.testing.assert_allclose(out.data, oracle_cma(x.data, y_proj, 0.5), atol=1e-12)
        with pytest.raises(ShapeError):
            cma_projected(gate(0.5), None, x, y)


class TestAdapter:
    def make(self, d=6, d_h=3, seed=0):
        store = ParamStore()
        return AdapterUnit.create(store, "adapter", d, d_h, np.random.default_rng(seed)), store

    def test_identity_at_init_for_any_down_weights(self):
        rng = np.random.default_rng(6)
        unit, _ = self.make()
        unit.b_down.data = rng.normal(size=unit.b_down.shape)
        x = rand(rng, 2, 4, 6)
        np.testing.assert_array_equal(adapter(unit, x).data, x.data)

    def test_hand_value(self):
        store = ParamStore()
        unit = AdapterUnit.create(store, "a", 2, 1, np.random.default_rng(0))
        # one-feature case embedded in a D=2 unit: second feature stays inert
        unit.w_down.data = np.array([[2.0], [0.0]])
        unit.w_up.data = np.array([[3.0, 0.0]])
        out = adapter(unit, Tensor([1.0, 0.0])).data
        np.testing.assert_array_equal(out, [7.0, 0.0])

    def test_zero_input_zero_biases(self):
        unit, _ = self.make()
        unit.w_up.data = np.random.default_rng(7).normal(size=unit.w_up.shape)
        np.testing.assert_array_equal(adapter(unit, Tensor(np.zeros((3, 6)))).data, 0.0)

    def test_init_ranges(self):
        unit, store = self.make(d=16, d_h=4)
        assert np.abs(unit.w_down.data).max() <= 1 / 4
        assert not np.any(unit.w_up.data) and not np.any(unit.b_up.data) and not np.any(unit.b_down.data)
        assert store.count_trainable() == 2 * 16 * 4 + 4 + 16

    def test_bottleneck_required(self):
        with pytest.raises(ValueError):
            AdapterUnit.create(ParamStore(), "a", 4, 4, np.random.default_rng(0))

    def test_width_checked(self):
        unit, _ = self.make()
        with pytest.raises(ShapeError):
            adapter(unit, Tensor(np.zeros((2, 5))))


class TestMcma:
    def test_unit_mask_is_bitwise_cma(self):
        rng = np.random.default_rng(8)
        x, y = rand(rng, 4, 5, 6), rand(rng, 4, 3, 6)
        g = gate(0.8)
        a = mcma(g, x, y, Tensor(np.ones(4))).data
        assert a.tobytes() == cma(g, x, y).data.tobytes()

    def test_zero_mask_gives_mean_of_sources(self):
        rng = np.random.default_rng(9)
        x, y = rand(rng, 3, 4, 5), rand(rng, 3, 6, 5)
        s = np.array([1.0, 0.0, 0.5])
        out = mcma(gate(0.6), x, y, Tensor(s)).data
        np.testing.assert_allclose(out[1], x.data[1] + np.tanh(0.6) * y.data[1].mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(out, oracle_cma(x.data, y.data, 0.6, s), atol=1e-12)

    def test_closed_gate(self):
        rng = np.random.default_rng(10)
        x, y = rand(rng, 3, 4, 5), rand(rng, 3, 2, 5)
        np.testing.assert_array_equal(mcma(gate(0.0), x, y, Tensor(np.full(3, 0.3))).data, x.data)

    def test_rejects_negative_or_misshaped_mask(self):
        x, y = Tensor(np.zeros((3, 2, 4))), Tensor(np.zeros((3, 2, 4)))
        with pytest.raises(ValueError):
            mcma(gate(0.1), x, y, Tensor([1.0, -0.1, 0.0]))
        with pytest.raises(ShapeError):
            mcma(gate(0.1), x, y, Tensor(np.ones(4)))

    def test_gradients_reach_gate_and_mask(self):
        rng = np.random.default_rng(11)
        x, y = rand(rng, 3, 4, 5), rand(rng, 3, 2, 5)
        g = gate(0.4)
        s = Tensor(rng.uniform(0.1, 1.0, size=3), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 4, 5)))
        err = tt.grad_check(lambda: tt.sum_all(tt.broadcast_mul(probe, mcma(g, x, y, s))), [g.g, s])
        assert err < 1e-6
        assert np.all(s.grad != 0) and g.g.grad != 0
