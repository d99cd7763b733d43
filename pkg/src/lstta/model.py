"""Frozen encoder stubs, adapter blocks and the full trimodal model.

Encoder weights are reproducible from a documented rule so that any
implementation can regenerate them: entry ``i`` of the table for
``(modality, layer)`` is ``amplitude * (2u - 1)`` with

    h = splitmix64(base_seed)
    h = splitmix64(h ^ modality_id)      # visual=0, audio=1, language=2
    h = splitmix64(h ^ layer)            # 0 = embedding table, 1..L = blocks
    h = splitmix64(h ^ i)
    u = (h >> 11) / 2**53

All three modalities read one shared embedding table, generated with
``modality_id = 3`` and ``layer = 0``; it stands in for pretrained encoders
whose vocabularies are already aligned, so a class token means the same
thing to every stream. Per-layer tables use the modality's own id.

Embedding entries are indexed row-major over ``[vocab, D]``. For block ``j``
the weight matrix occupies indices ``0 .. D*D-1`` (row-major ``[D, D]``) and
the bias follows at ``D*D .. D*D+D-1``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import stsi as stsi_mod
from . import tensor as tt
from .ltsf import LtsfParams, ltsf_forward, uniform_mask
from .params import ParamStore
from .stsi import StsiParams
from .tensor import ShapeError, Tensor
from .units import ProjectionUnit, project

MODALITIES = ("visual", "audio", "language")
MODALITY_ID = {m: i for i, m in enumerate(MODALITIES)}

EMBED_AMPLITUDE = 2.0
WEIGHT_GAIN = 1.0  # weight amplitude is WEIGHT_GAIN / sqrt(D)
BIAS_AMPLITUDE = 0.1
SHARED_EMBED_ID = 3  # modality id of the shared embedding table

_MASK64 = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def seeded_uniform(base_seed: int, modality_id: int, layer: int, start: int, count: int) -> np.ndarray:
    """Uniform [0, 1) values for indices ``start .. start+count-1`` of one table."""
    h = splitmix64(np.array([base_seed & _MASK64], dtype=np.uint64))
    h = splitmix64(h ^ np.uint64(modality_id))
    h = splitmix64(h ^ np.uint64(layer))
    idx = np.arange(start, start + count, dtype=np.uint64)
    h = splitmix64(h ^ idx)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def seeded_table(base_seed: int, modality_id: int, layer: int, start: int, shape: Sequence[int],
                 amplitude: float) -> np.ndarray:
    n = int(np.prod(shape))
    u = seeded_uniform(base_seed, modality_id, layer, start, n)
    return (amplitude * (2.0 * u - 1.0)).reshape(shape)


@dataclass(frozen=True)
class Ablation:
    ltsf: bool = True
    al2v: bool = True
    vl2a: bool = True
    latent_tokens: bool = True

    @property
    def any_block(self) -> bool:
        return self.ltsf or self.al2v or self.vl2a

    def label(self) -> str:
        on = [k for k, v in asdict(self).items() if v]
        return "+".join(on) if on else "baseline"


# toggle matrix of the ablation table: (LTSF, AL2V, VL2A, latent tokens)
ABLATION_ROWS: dict[int, Ablation] = {
    1: Ablation(False, False, False, False),
    2: Ablation(False, True, False, False),
    3: Ablation(False, False, True, False),
    4: Ablation(False, True, True, False),
    5: Ablation(True, True, True, False),
    6: Ablation(True, True, True, True),
}


def ablation_config(ltsf: bool = True, al2v: bool = True, vl2a: bool = True,
                    latent_tokens: bool = True) -> Ablation:
    return Ablation(ltsf, al2v, vl2a, latent_tokens)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_h: int = 16
    k: int = 8
    layers: int = 4
    t: int = 8
    nv: int = 16
    na: int = 16
    nl: int = 12
    num_classes: int = 4
    vocab: int = 64
    encoder_seed: int = 0
    init_seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> None:
        for name in ("d", "d_h", "k", "layers", "t", "nv", "na", "nl", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if self.d_h >= self.d:
            raise ValueError("model.d_h must be smaller than model.d")
        if self.num_classes < 2:
            raise ValueError("model.num_classes must be at least 2")

    def with_ablation(self, ablation: Ablation) -> "ModelConfig":
        return replace(self, ablation=ablation)


class _MetaRng:
    """Stand-in generator for shape-only builds; returns zero-stride zeros."""

    def uniform(self, low, high, size):
        return np.broadcast_to(np.float64(0.0), size)

    def normal(self, loc, scale, size):
        return np.broadcast_to(np.float64(0.0), size)


class FrozenEncoder:
    def __init__(self, store: ParamStore, modality: str, cfg: ModelConfig, meta: bool = False):
        self.modality = modality
        self.layers = cfg.layers
        mid = MODALITY_ID[modality]
        d = cfg.d
        prefix = f"enc.{modality}"

        def table(layer, start, shape, amp):
            if meta:
                return np.broadcast_to(np.float64(0.0), shape)
            return seeded_table(cfg.encoder_seed, mid, layer, start, shape, amp)

        if meta:
            emb = np.broadcast_to(np.float64(0.0), (cfg.vocab, d))
        else:
            emb = seeded_table(cfg.encoder_seed, SHARED_EMBED_ID, 0, 0, (cfg.vocab, d), EMBED_AMPLITUDE)
        self.embed = store.add(f"{prefix}.embed", Tensor(emb), False)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for j in range(1, cfg.layers + 1):
            w = table(j, 0, (d, d), WEIGHT_GAIN / np.sqrt(d))
            b = table(j, d * d, (d,), BIAS_AMPLITUDE)
            self.weights.append(store.add(f"{prefix}.layer{j}.w", Tensor(w), False))
            self.biases.append(store.add(f"{prefix}.layer{j}.b", Tensor(b), False))

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.embed.shape[0]):
            raise ShapeError(f"{self.modality} ids outside vocabulary [0, {self.embed.shape[0]})")
        return Tensor(self.embed.data[ids])


def encoder_block_forward(enc: FrozenEncoder, j: int, f: Tensor) -> Tensor:
    """Frozen residual nonlinearity ``f + tanh(f W_j + b_j)`` for layer ``j`` in 1..L."""
    if not 1 <= j <= enc.layers:
        raise IndexError(f"layer {j} outside 1..{enc.layers}")
    return tt.add(f, tt.tanh(tt.linear(f, enc.weights[j - 1], enc.biases[j - 1])))


@dataclass
class LsttaBlockParams:
    ltsf: LtsfParams | None
    vl2a: StsiParams | None
    al2v: StsiParams | None

    @classmethod
    def create(cls, store: ParamStore, j: int, cfg: ModelConfig, rng) -> "LsttaBlockParams":
        ab = cfg.ablation
        k = cfg.k if ab.latent_tokens else None
        p = f"block{j}"
        return cls(
            ltsf=LtsfParams.create(store, f"{p}.ltsf", cfg.d, cfg.d_h, rng) if ab.ltsf else None,
            vl2a=StsiParams.create(store, f"{p}.stsi_vl2a", "audio", cfg.d, cfg.d_h, k, rng) if ab.vl2a else None,
            al2v=StsiParams.create(store, f"{p}.stsi_al2v", "visual", cfg.d, cfg.d_h, k, rng) if ab.al2v else None,
        )


def block_forward(p: LsttaBlockParams, z_v: Tensor, z_a: Tensor, z_l: Tensor):
    """One adapter block; returns ``(f_v, f_a, f_l, S)``."""
    s = ltsf_forward(p.ltsf, z_v, z_a, z_l) if p.ltsf is not None else uniform_mask(z_v.shape[:-2], z_v.data.dtype)
    f_a = stsi_mod.apply(p.vl2a, z_a, z_v, z_l, s) if p.vl2a is not None else z_a
    f_v = stsi_mod.apply(p.al2v, z_v, z_a, z_l, s) if p.al2v is not None else z_v
    return f_v, f_a, z_l, s


class TrimodalModel:
    """Three frozen encoder stacks with ``L-1`` adapter blocks and a linear head."""

    def __init__(self, cfg: ModelConfig, meta: bool = False, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore()
        self.encoders = {m: FrozenEncoder(self.store, m, cfg, meta) for m in MODALITIES}
        self.blocks: list[LsttaBlockParams] = []
        if cfg.ablation.any_block:
            for j in range(1, cfg.layers):
                rng = _MetaRng() if meta else np.random.default_rng([cfg.init_seed, j])
                self.blocks.append(LsttaBlockParams.create(self.store, j, cfg, rng))
        head_rng = _MetaRng() if meta else np.random.default_rng([cfg.init_seed, 0])
        self.head = ProjectionUnit.create(self.store, "head", 3 * cfg.d, cfg.num_classes, head_rng)
        if not meta and np.dtype(dtype) != np.float64:
            for _, t, _ in self.store.items():
                t.data = t.data.astype(dtype)
        self.block_calls = 0

    def embed(self, visual_ids, audio_ids, lang_ids):
        cfg = self.cfg
        v = np.asarray(visual_ids)
        a = np.asarray(audio_ids)
        lang = np.asarray(lang_ids)
        if v.ndim != a.ndim or v.ndim not in (2, 3) or lang.ndim != v.ndim - 1:
            raise ShapeError(f"id arrays have inconsistent ranks {v.shape}, {a.shape}, {lang.shape}")
        lead = v.shape[:-1]
        if a.shape[:-1] != lead or lang.shape[:-1] != lead[:-1]:
            raise ShapeError(f"id arrays disagree on batch/time: {v.shape}, {a.shape}, {lang.shape}")
        f_v = self.encoders["visual"].embed_ids(v)
        f_a = self.encoders["audio"].embed_ids(a)
        f_l0 = self.encoders["language"].embed_ids(lang)
        t = lead[-1]
        # language features repeated over time: [..., Nl, D] -> [..., T, Nl, D]
        f_l = Tensor(np.repeat(np.expand_dims(f_l0.data, -3), t, axis=-3))
        if f_v.shape[-1] != cfg.d:
            raise ShapeError("embedding width mismatch")
        return f_v, f_a, f_l

    def features(self, visual_ids, audio_ids, lang_ids):
        """Final-layer features of the three streams and the per-block masks."""
        f_v, f_a, f_l = self.embed(visual_ids, audio_ids, lang_ids)
        enc = self.encoders
        masks: list[Tensor] = []
        for j in range(1, self.cfg.layers + 1):
            z_v = encoder_block_forward(enc["visual"], j, f_v)
            z_a = encoder_block_forward(enc["audio"], j, f_a)
            z_l = encoder_block_forward(enc["language"], j, f_l)
            if j <= len(self.blocks):
                f_v, f_a, f_l, s = block_forward(self.blocks[j - 1], z_v, z_a, z_l)
                masks.append(s)
                self.block_calls += 1
            else:
                f_v, f_a, f_l = z_v, z_a, z_l
        return (f_v, f_a, f_l), masks

    def forward(self, visual_ids, audio_ids, lang_ids):
        """Returns ``(logits, masks)``; unbatched ids give ``logits`` of shape [C]."""
        (f_v, f_a, f_l), masks = self.features(visual_ids, audio_ids, lang_ids)
        pooled = [tt.mean_axis(tt.mean_axis(f, axis=-2), axis=-2) for f in (f_v, f_a, f_l)]
        joint = tt.concat(tt.concat(pooled[0], pooled[1], axis=-1), pooled[2], axis=-1)
        return project(self.head, joint), masks

    __call__ = forward


def model_forward(m: TrimodalModel, visual_ids, audio_ids, lang_ids):
    return m.forward(visual_ids, audio_ids, lang_ids)


def adapter_param_count(d: int, d_h: int) -> int:
    return 2 * d * d_h + d_h + d


def block_param_formula(d: int, d_h: int, k: int) -> int:
    """Closed-form size of one full block: LTSF plus two latent STSI modules."""
    ad = adapter_param_count(d, d_h)
    return (2 + ad + (d + 1)) + 2 * (k * d + 2 + ad)


def count_params(m: TrimodalModel) -> dict:
    store = m.store
    per_block = [store.count_prefix(f"block{j}.") for j in range(1, len(m.blocks) + 1)]
    return {
        "trainable": store.count_trainable(),
        "frozen": store.count_frozen(),
        "total": store.count_total(),
        "blocks": sum(per_block),
        "per_block": per_block,
        "head": store.count_prefix("head."),
        "encoders": {mod: store.count_prefix(f"enc.{mod}.") for mod in MODALITIES},
    }
