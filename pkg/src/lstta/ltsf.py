"""Long-term semantic filtering: a soft importance mask over timestamps.

The language features act as the anchor and attend separately to the visual
and audio streams. The two attended sequences are joined along the token
axis, averaged over tokens, refined by an adapter and reduced to one logit
per timestamp; a softmax over time turns those logits into the mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .params import ParamStore
from .tensor import ShapeError, Tensor
from .units import INNER_GATE_INIT, AdapterUnit, CmaUnit, ProjectionUnit, adapter, cma, project


@dataclass
class LtsfParams:
    cma_lv: CmaUnit
    cma_la: CmaUnit
    adapter: AdapterUnit
    score_head: ProjectionUnit

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, d_h: int,
               rng: np.random.Generator) -> "LtsfParams":
        return cls(
            cma_lv=CmaUnit.create(store, f"{prefix}.g_lv", init=INNER_GATE_INIT),
            cma_la=CmaUnit.create(store, f"{prefix}.g_la", init=INNER_GATE_INIT),
            adapter=AdapterUnit.create(store, f"{prefix}.adapter", d, d_h, rng),
            score_head=ProjectionUnit.create(store, f"{prefix}.proj", d, 1, rng),
        )


def _check(z_v: Tensor, z_a: Tensor, z_l: Tensor) -> None:
    lead = z_l.shape[:-2]
    d = z_l.shape[-1]
    for name, z in (("visual", z_v), ("audio", z_a)):
        if z.shape[:-2] != lead or z.shape[-1] != d:
            raise ShapeError(f"ltsf: {name} features {z.shape} incompatible with language {z_l.shape}")


def ltsf_logits(p: LtsfParams, z_v: Tensor, z_a: Tensor, z_l: Tensor) -> Tensor:
    """Per-timestamp importance logits, shape ``z_l.shape[:-2]``."""
    _check(z_v, z_a, z_l)
    z_lv = cma(p.cma_lv, z_l, z_v)
    z_la = cma(p.cma_la, z_l, z_a)
    z_lva = tt.concat(z_lv, z_la, axis=-2)
    pooled = tt.mean_axis(z_lva, axis=-2)
    scores = project(p.score_head, adapter(p.adapter, pooled))
    return tt.mean_axis(scores, axis=-1)  # drop the singleton output axis


def ltsf_forward(p: LtsfParams, z_v: Tensor, z_a: Tensor, z_l: Tensor) -> Tensor:
    """Importance mask ``S`` over the time axis; sums to one per sample."""
    return tt.softmax_last(ltsf_logits(p, z_v, z_a, z_l))


def uniform_mask(lead_shape: tuple[int, ...], dtype=np.float64) -> Tensor:
    t = lead_shape[-1]
    return Tensor(np.full(lead_shape, 1.0 / t, dtype=dtype))
