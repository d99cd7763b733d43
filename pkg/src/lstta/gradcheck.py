"""Central-difference gradient checks for every fusion unit and the full loss.

Each case builds its unit at desk shapes from ``seed`` with all gates and
up-projections moved away from their identity initialisation, so every path
carries gradient, and contracts the output with a fixed random probe.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import stsi as stsi_mod
from . import tensor as tt
from .ltsf import LtsfParams, ltsf_forward
from .model import ModelConfig, TrimodalModel
from .params import ParamStore
from .stsi import StsiParams
from .tensor import Tensor
from .units import AdapterUnit, CmaUnit, adapter, cma, mcma

TOLERANCE = 1e-4
# relative gap between one-sided slopes that marks a ReLU corner inside the
# perturbation interval; smooth curvature gives gaps of order eps
KINK_TOL = 1e-2
MODEL_ENTRIES = 4
DEFAULT_SEEDS = tuple(range(10))
# desk shapes
T, NV, NA, NL, D, D_H, K = 8, 16, 16, 12, 32, 16, 8
INPUT_SCALE = 0.3


def _input(rng, *shape) -> Tensor:
    return Tensor(INPUT_SCALE * rng.normal(size=shape), requires_grad=True)


def _activate(store: ParamStore, rng) -> None:
    """Open every gate and give the zero-initialised tensors small random values."""
    for name, t, trainable in store.items():
        if not trainable:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("g_"):
            t.data = np.array(rng.uniform(0.3, 1.0))
        elif not np.any(t.data):
            t.data = np.array(0.1 * rng.normal(size=t.shape))


def _probe_sum(out: Tensor, probe: Tensor) -> Tensor:
    return tt.sum_all(tt.broadcast_mul(probe, out))


def _check(build: Callable[[np.random.Generator], tuple], seed: int, max_entries: int | None,
           stats: dict | None) -> float:
    rng = np.random.default_rng([seed, 31])
    fn, params = build(rng)
    probe = Tensor(rng.normal(size=fn().shape))
    return tt.grad_check(lambda: _probe_sum(fn(), probe), params, max_entries=max_entries, rng=rng,
                         kink_tol=KINK_TOL, stats=stats)


def _cma(rng):
    store = ParamStore()
    unit = CmaUnit.create(store, "g_unit")
    _activate(store, rng)
    x, y = _input(rng, T, NL, D), _input(rng, T, NV, D)
    return (lambda: cma(unit, x, y)), [unit.g, x, y]


def _adapter(rng):
    store = ParamStore()
    unit = AdapterUnit.create(store, "adapter", D, D_H, rng)
    _activate(store, rng)
    x = _input(rng, T, NV, D)
    return (lambda: adapter(unit, x)), [x, *(t for _, t in store.trainable())]


def _mcma(rng):
    store = ParamStore()
    unit = CmaUnit.create(store, "g_unit")
    _activate(store, rng)
    x, y = _input(rng, T, NA, D), _input(rng, T, K, D)
    s = Tensor(rng.dirichlet(np.ones(T)), requires_grad=True)
    return (lambda: mcma(unit, x, y, s)), [unit.g, x, y, s]


def _ltsf(rng):
    store = ParamStore()
    p = LtsfParams.create(store, "ltsf", D, D_H, rng)
    _activate(store, rng)
    z_v, z_a, z_l = _input(rng, T, NV, D), _input(rng, T, NA, D), _input(rng, T, NL, D)
    return (lambda: ltsf_forward(p, z_v, z_a, z_l)), [z_v, z_a, z_l, *(t for _, t in store.trainable())]


def _stsi(latent: bool):
    def build(rng):
        store = ParamStore()
        p = StsiParams.create(store, "stsi", "audio", D, D_H, K if latent else None, rng)
        _activate(store, rng)
        z_a, z_v, z_l = _input(rng, T, NA, D), _input(rng, T, NV, D), _input(rng, T, NL, D)
        s = Tensor(rng.dirichlet(np.ones(T)), requires_grad=True)
        fn = stsi_mod.stsi_forward if latent else stsi_mod.stsi_forward_dense
        return (lambda: fn(p, z_a, z_v, z_l, s)), [z_a, z_v, z_l, s, *(t for _, t in store.trainable())]
    return build


def _model_loss(rng):
    m = TrimodalModel(ModelConfig(init_seed=int(rng.integers(1 << 16))))
    _activate(m.store, rng)
    cfg = m.cfg
    v = rng.integers(0, cfg.vocab, size=(2, cfg.t, cfg.nv))
    a = rng.integers(0, cfg.vocab, size=(2, cfg.t, cfg.na))
    lang = rng.integers(0, cfg.vocab, size=(2, cfg.nl))
    labels = rng.integers(0, cfg.num_classes, size=2)

    def loss():
        logits, _ = m.forward(v, a, lang)
        return tt.cross_entropy(logits, labels)
    return loss, [t for _, t in m.store.trainable()]


CASES: dict[str, Callable] = {
    "cma": _cma,
    "adapter": _adapter,
    "mcma": _mcma,
    "ltsf_forward": _ltsf,
    "stsi_latent": _stsi(True),
    "stsi_dense": _stsi(False),
    "model_loss": _model_loss,
}


def check_case(name: str, seed: int, max_entries: int | None = 24, stats: dict | None = None) -> float:
    """Worst relative error of one case; the full model samples fewer entries per tensor."""
    build = CASES[name]
    if name == "model_loss":
        rng = np.random.default_rng([seed, 31])
        fn, params = build(rng)
        n = MODEL_ENTRIES if max_entries is None else min(max_entries, MODEL_ENTRIES)
        return tt.grad_check(fn, params, max_entries=n, rng=rng, kink_tol=KINK_TOL, stats=stats)
    return _check(build, seed, max_entries, stats)


def run_gradcheck(seeds=DEFAULT_SEEDS, names=None, max_entries: int | None = 24) -> dict[str, dict]:
    """Per case: worst relative error over ``seeds`` and coordinate counts."""
    out = {}
    for name in names or CASES:
        stats: dict = {}
        worst = max(check_case(name, s, max_entries, stats) for s in seeds)
        out[name] = {"max_rel_error": worst, **stats}
    return out
