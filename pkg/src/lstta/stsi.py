"""Short-term semantic interaction.

K learnable latent tokens gather, per timestamp, the content of the two
non-target modalities. The target modality then attends to those latents with
the logits scaled by the temporal mask, and an adapter refines the result.
``VL2A`` targets audio (sources visual, language); ``AL2V`` targets visual
(sources audio, language).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .params import ParamStore
from .tensor import ShapeError, Tensor
from .units import INNER_GATE_INIT, LATENT_INIT_STD, AdapterUnit, CmaUnit, adapter, cma, mcma

DIRECTIONS = {"vl2a": "audio", "al2v": "visual"}


@dataclass
class StsiParams:
    target: str
    q: Tensor | None
    cma_q: CmaUnit | None
    mcma: CmaUnit
    adapter: AdapterUnit

    @property
    def latent(self) -> bool:
        return self.q is not None

    @classmethod
    def create(cls, store: ParamStore, prefix: str, target: str, d: int, d_h: int, k: int | None,
               rng: np.random.Generator) -> "StsiParams":
        """Register one STSI module; ``k=None`` builds the dense (latent-free) variant."""
        if target not in ("audio", "visual"):
            raise ValueError(f"unknown STSI target {target!r}")
        q = cma_q = None
        if k is not None:
            if k < 1:
                raise ValueError("need at least one latent token")
            q = store.add(f"{prefix}.q", Tensor(rng.normal(0.0, LATENT_INIT_STD, (k, d))), True)
            cma_q = CmaUnit.create(store, f"{prefix}.g_q", init=INNER_GATE_INIT)
        return cls(
            target=target,
            q=q,
            cma_q=cma_q,
            mcma=CmaUnit.create(store, f"{prefix}.g_mcma"),
            adapter=AdapterUnit.create(store, f"{prefix}.adapter", d, d_h, rng),
        )


def _check(z_target: Tensor, z_src1: Tensor, z_src2: Tensor, s: Tensor) -> None:
    lead, d = z_target.shape[:-2], z_target.shape[-1]
    for z in (z_src1, z_src2):
        if z.shape[:-2] != lead or z.shape[-1] != d:
            raise ShapeError(f"stsi: source {z.shape} incompatible with target {z_target.shape}")
    if s.shape != lead:
        raise ShapeError(f"stsi: mask shape {s.shape} != leading shape {lead}")


def stsi_forward(p: StsiParams, z_target: Tensor, z_src1: Tensor, z_src2: Tensor, s: Tensor) -> Tensor:
    if not p.latent:
        raise ValueError("stsi_forward needs latent tokens; use stsi_forward_dense")
    _check(z_target, z_src1, z_src2, s)
    sources = tt.concat(z_src1, z_src2, axis=-2)
    q_b = tt.expand_prefix(p.q, z_target.shape[:-2])
    q_hat = cma(p.cma_q, q_b, sources)
    return adapter(p.adapter, mcma(p.mcma, z_target, q_hat, s))


def stsi_forward_dense(p: StsiParams, z_target: Tensor, z_src1: Tensor, z_src2: Tensor,
                       s: Tensor) -> Tensor:
    """Latent-free variant: the target attends to all source tokens directly."""
    _check(z_target, z_src1, z_src2, s)
    sources = tt.concat(z_src1, z_src2, axis=-2)
    return adapter(p.adapter, mcma(p.mcma, z_target, sources, s))


def apply(p: StsiParams, z_target: Tensor, z_src1: Tensor, z_src2: Tensor, s: Tensor) -> Tensor:
    fn = stsi_forward if p.latent else stsi_forward_dense
    return fn(p, z_target, z_src1, z_src2, s)


def injection_logit_count(n_target: int, n_sources: int, k: int | None) -> int:
    """Entries of the masked attention matrix per timestamp (target x keys)."""
    return n_target * (n_sources if k is None else k)


def total_logit_count(n_target: int, n_sources: int, k: int | None) -> int:
    """All attention logits per timestamp, including latent aggregation."""
    if k is None:
        return n_target * n_sources
    return k * n_sources + n_target * k
