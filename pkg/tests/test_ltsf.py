import numpy as np
import pytest

from lstta import tensor as tt
from lstta.ltsf import LtsfParams, ltsf_forward, uniform_mask
from lstta.params import ParamStore
from lstta.tensor import ShapeError, Tensor

T, NV, NA, NL, D, DH = 6, 5, 4, 3, 8, 4


def make(seed=0, open_gates=True):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    p = LtsfParams.create(store, "ltsf", D, DH, rng)
    if open_gates:
        p.cma_lv.g.data = np.array(0.7)
        p.cma_la.g.data = np.array(-0.4)
        p.adapter.w_up.data = rng.normal(scale=0.3, size=p.adapter.w_up.shape)
        p.adapter.b_up.data = rng.normal(scale=0.1, size=D)
        p.score_head.b.data = np.array([0.2])
    return p, store


def inputs(seed, t=T):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(t, NV, D))), Tensor(rng.normal(size=(t, NA, D))),
            Tensor(rng.normal(size=(t, NL, D))))


def oracle_mask(p, z_v, z_a, z_l):
    """Straight-line re-evaluation: anchor attention, token concat, pool, adapter, score, softmax."""
    def attend(x, y, g):
        out = np.empty_like(x)
        for t in range(x.shape[0]):
            a = x[t] @ y[t].T
            a = np.exp(a - a.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            out[t] = x[t] + np.tanh(g) * a @ y[t]
        return out
    z_lv = attend(z_l, z_v, float(p.cma_lv.g.data))
    z_la = attend(z_l, z_a, float(p.cma_la.g.data))
    pooled = np.concatenate([z_lv, z_la], axis=1).mean(axis=1)
    ad = p.adapter
    h = np.maximum(pooled @ ad.w_down.data + ad.b_down.data, 0.0)
    refined = pooled + h @ ad.w_up.data + ad.b_up.data
    scores = (refined @ p.score_head.w.data + p.score_head.b.data)[:, 0]
    e = np.exp(scores - scores.max())
    return e / e.sum()


def test_mask_matches_oracle():
    for seed in range(3):
        p, _ = make(seed)
        z = inputs(seed + 10)
        np.testing.assert_allclose(ltsf_forward(p, *z).data, oracle_mask(p, *(x.data for x in z)), atol=1e-12)


def test_normalised_and_positive():
    p, _ = make(1)
    s = ltsf_forward(p, *inputs(2)).data
    assert s.shape == (T,)
    assert abs(s.sum() - 1.0) < 1e-9
    assert np.all((s > 0) & (s < 1))


def test_constant_over_time_gives_uniform():
    p, _ = make(3)
    rng = np.random.default_rng(4)
    z = [Tensor(np.repeat(rng.normal(size=(1, n, D)), T, axis=0)) for n in (NV, NA, NL)]
    np.testing.assert_allclose(ltsf_forward(p, *z).data, np.full(T, 1 / T), atol=1e-15)


def test_single_timestamp():
    p, _ = make(5)
    np.testing.assert_array_equal(ltsf_forward(p, *inputs(6, t=1)).data, [1.0])


def test_closed_gates_only_language_matters():
    p, _ = make(7, open_gates=False)
    p.cma_lv.g.data = np.array(0.0)
    p.cma_la.g.data = np.array(0.0)
    z_v, z_a, z_l = inputs(8)
    rng = np.random.default_rng(9)
    s1 = ltsf_forward(p, z_v, z_a, z_l).data
    s2 = ltsf_forward(p, Tensor(rng.normal(size=z_v.shape)), Tensor(rng.normal(size=z_a.shape)), z_l).data
    np.testing.assert_array_equal(s1, s2)
    # language repeated over time, as the model feeds it: exactly uniform
    z_rep = Tensor(np.repeat(z_l.data[:1], T, axis=0))
    np.testing.assert_array_equal(ltsf_forward(p, z_v, z_a, z_rep).data, uniform_mask((T,)).data)


def test_timestamp_equivariance():
    p, _ = make(10)
    z = inputs(11)
    perm = np.random.default_rng(12).permutation(T)
    s = ltsf_forward(p, *z).data
    s_perm = ltsf_forward(p, *(Tensor(x.data[perm]) for x in z)).data
    np.testing.assert_allclose(s_perm, s[perm], atol=1e-12)


def test_aligned_timestamp_scores_highest():
    p, _ = make(13, open_gates=False)
    p.cma_lv.g.data = np.array(1.0)
    p.cma_la.g.data = np.array(1.0)
    rng = np.random.default_rng(14)
    lang = rng.normal(size=(NL, D))
    z_l = np.repeat(lang[None], T, axis=0)
    z_v = rng.normal(size=(T, NV, D))
    z_a = rng.normal(size=(T, NA, D))
    hot = 4
    z_v[hot, :NL] = 3.0 * lang
    z_a[hot, :NL] = 3.0 * lang
    direction = lang.mean(axis=0)
    p.score_head.w.data = (direction / np.linalg.norm(direction))[:, None]
    s = ltsf_forward(p, Tensor(z_v), Tensor(z_a), Tensor(z_l)).data
    assert int(np.argmax(s)) == hot
    np.testing.assert_allclose(s, oracle_mask(p, z_v, z_a, z_l), atol=1e-12)


def test_batched_leading_axes():
    p, _ = make(15)
    rng = np.random.default_rng(16)
    z = [rng.normal(size=(2, T, n, D)) for n in (NV, NA, NL)]
    s = ltsf_forward(p, *(Tensor(x) for x in z)).data
    assert s.shape == (2, T)
    for b in range(2):
        np.testing.assert_allclose(s[b], ltsf_forward(p, *(Tensor(x[b]) for x in z)).data, atol=1e-14)


def test_mismatched_inputs():
    p, _ = make(17)
    z_v, z_a, z_l = inputs(18)
    with pytest.raises(ShapeError):
        ltsf_forward(p, Tensor(z_v.data[:-1]), z_a, z_l)
    with pytest.raises(ShapeError):
        ltsf_forward(p, z_v, Tensor(z_a.data[..., :-1]), z_l)


def test_parameter_layout():
    _, store = make(19, open_gates=False)
    assert store.names() == ["ltsf.g_lv", "ltsf.g_la", "ltsf.adapter.w_down", "ltsf.adapter.b_down",
                             "ltsf.adapter.w_up", "ltsf.adapter.b_up", "ltsf.proj.w", "ltsf.proj.b"]
    assert store.count_trainable() == 2 + (2 * D * DH + DH + D) + (D + 1)


def test_grad_check():
    p, store = make(20)
    z = [Tensor(x.data, requires_grad=True) for x in inputs(21)]
    w = Tensor(np.random.default_rng(22).normal(size=T))
    params = [t for _, t in store.trainable()] + z
    err = tt.grad_check(lambda: tt.sum_all(tt.broadcast_mul(w, ltsf_forward(p, *z))), params, kink_tol=1e-2)
    assert err < 1e-4
