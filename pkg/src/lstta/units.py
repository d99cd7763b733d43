"""Reusable fusion units: gated cross-modal attention, bottleneck adapter,
masked cross-modal attention and the linear projection used when two
operands disagree in feature width."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .params import ParamStore
from .tensor import ShapeError, Tensor

# Gates that feed an internal sequence (latent aggregation, language anchors)
# start open; gates that write into a modality stream start closed. With the
# output gates and adapter up-projections at zero every block is still the
# identity at init, but the first gradient step already reaches both factors
# of each two-gate path instead of sitting on a second-order saddle.
INNER_GATE_INIT = 1.0
LATENT_INIT_STD = 0.02


@dataclass
class CmaUnit:
    g: Tensor

    @classmethod
    def create(cls, store: ParamStore, name: str, init: float = 0.0) -> "CmaUnit":
        return cls(store.add(name, Tensor(np.array(init)), trainable=True))


@dataclass
class AdapterUnit:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, d_h: int,
               rng: np.random.Generator) -> "AdapterUnit":
        if not 0 < d_h < d:
            raise ValueError(f"adapter bottleneck must satisfy 0 < D_h < D, got D_h={d_h}, D={d}")
        bound = 1.0 / np.sqrt(d)
        return cls(
            store.add(f"{prefix}.w_down", Tensor(rng.uniform(-bound, bound, (d, d_h))), True),
            store.add(f"{prefix}.b_down", Tensor(np.zeros(d_h)), True),
            store.add(f"{prefix}.w_up", Tensor(np.zeros((d_h, d))), True),
            store.add(f"{prefix}.b_up", Tensor(np.zeros(d)), True),
        )

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]


@dataclass
class ProjectionUnit:
    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d_in: int, d_out: int,
               rng: np.random.Generator) -> "ProjectionUnit":
        bound = 1.0 / np.sqrt(d_in)
        return cls(
            store.add(f"{prefix}.w", Tensor(rng.uniform(-bound, bound, (d_in, d_out))), True),
            store.add(f"{prefix}.b", Tensor(np.zeros(d_out)), True),
        )


def project(unit: ProjectionUnit, x: Tensor) -> Tensor:
    return tt.linear(x, unit.w, unit.b)


def _attend(unit: CmaUnit, x: Tensor, y: Tensor, s: Tensor | None) -> Tensor:
    if x.ndim < 2 or x.shape[:-2] != y.shape[:-2] or x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"cross-modal attention: anchor {x.shape} and source {y.shape} disagree")
    logits = tt.matmul_bt(x, y)
    if s is not None:
        logits = tt.broadcast_mul(s, logits)
    attn = tt.softmax_last(logits)
    attended = tt.matmul(attn, y)
    return tt.add(x, tt.scale(attended, tt.tanh(unit.g)))


def cma(unit: CmaUnit, x: Tensor, y: Tensor) -> Tensor:
    """``x + tanh(g) * softmax(x y^T) y`` per leading index; ``x`` is the anchor."""
    return _attend(unit, x, y, None)


def cma_projected(unit: CmaUnit, proj: ProjectionUnit | None, x: Tensor, y: Tensor) -> Tensor:
    """CMA that first maps ``y`` to the anchor width when the widths differ."""
    if y.shape[-1] != x.shape[-1]:
        if proj is None:
            raise ShapeError(f"width mismatch {y.shape[-1]} vs {x.shape[-1]} needs a projection")
        y = project(proj, y)
    return cma(unit, x, y)


def mcma(unit: CmaUnit, x: Tensor, y: Tensor, s: Tensor) -> Tensor:
    """Masked CMA: the logits at timestamp t are multiplied by ``s[t]`` before the softmax.

    ``s`` has the leading shape of ``x`` without its token and feature axes.
    """
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.shape != x.shape[:-2]:
        raise ShapeError(f"mask shape {s.shape} does not match leading shape {x.shape[:-2]}")
    if np.any(s.data < 0):
        raise ValueError("mask entries must be nonnegative")
    return _attend(unit, x, y, s)


def adapter(unit: AdapterUnit, x: Tensor) -> Tensor:
    if x.shape[-1] != unit.dim:
        raise ShapeError(f"adapter expects trailing dim {unit.dim}, got {x.shape}")
    h = tt.relu(tt.linear(x, unit.w_down, unit.b_down))
    return tt.add(x, tt.linear(h, unit.w_up, unit.b_up))
