"""Training of the trainable partition: AdamW, cosine decay, metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from . import tensor as tt
from .model import TrimodalModel
from .params import ParamStore
from .tensor import NumericError, Tensor


@dataclass
class Schedule:
    lr0: float = 8e-5
    total_steps: int = 3000
    warmup_steps: int = 0

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr0 * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.lr0
    return s.lr0 * 0.5 * (1.0 + math.cos(math.pi * (step - s.warmup_steps) / span))


def decays(name: str) -> bool:
    """Weight decay applies to matrices and latent tokens, not to gates or biases."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("g_") or leaf.startswith("b"))


@dataclass
class OptimState:
    params: list[tuple[str, Tensor]]
    lr0: float = 8e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float | None = 1.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for _, p in self.params]
            self.v = [np.zeros_like(p.data) for _, p in self.params]

    @classmethod
    def for_store(cls, store: ParamStore, **hyper) -> "OptimState":
        return cls(params=store.trainable(), **hyper)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def adamw_update(o: OptimState, lr: float) -> float:
    """Apply one AdamW step from the current ``.grad`` buffers; returns the pre-clip norm."""
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for _, p in o.params]
    for (name, _), g in zip(o.params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    norm = global_norm(grads)
    factor = 1.0
    if o.clip is not None and norm > o.clip:
        factor = o.clip / (norm + 1e-12)
    o.step += 1
    b1, b2 = o.betas
    bc1 = 1.0 - b1 ** o.step
    bc2 = 1.0 - b2 ** o.step
    for i, ((name, p), g) in enumerate(zip(o.params, grads)):
        if factor != 1.0:
            g = g * factor
        o.m[i] = b1 * o.m[i] + (1.0 - b1) * g
        o.v[i] = b2 * o.v[i] + (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        if o.weight_decay and decays(name):
            p.data -= lr * o.weight_decay * p.data
        p.data -= lr * (o.m[i] / bc1) / (np.sqrt(o.v[i] / bc2) + o.eps)
    return norm


def _first_nonfinite(store: ParamStore) -> str | None:
    for name, t, _ in store.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def step(m: TrimodalModel, o: OptimState, batch: dict[str, np.ndarray], lr: float) -> dict[str, float]:
    """Forward, cross-entropy, backward and one optimizer update on ``batch``."""
    m.store.zero_grad()
    try:
        logits, _ = m.forward(batch["visual"], batch["audio"], batch["lang"])
    except NumericError as exc:
        raise NumericError(f"{exc}; first non-finite tensor: {_first_nonfinite(m.store) or 'activations'}") from None
    if not np.all(np.isfinite(logits.data)):
        bad = _first_nonfinite(m.store) or "logits"
        raise NumericError(f"non-finite logits; first non-finite tensor: {bad}")
    loss = tt.cross_entropy(logits, batch["label"])
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite loss; first non-finite tensor: {_first_nonfinite(m.store) or 'logits'}")
    loss.backward()
    norm = adamw_update(o, lr)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == batch["label"]))
    return {"loss": loss.item(), "grad_norm": norm, "train_acc": acc}


def predict(m: TrimodalModel, data: dict[str, np.ndarray], batch_size: int = 250) -> np.ndarray:
    preds = []
    with tt.no_grad():
        for i in range(0, len(data["label"]), batch_size):
            sl = slice(i, i + batch_size)
            logits, _ = m.forward(data["visual"][sl], data["audio"][sl], data["lang"][sl])
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(m: TrimodalModel, data: dict[str, np.ndarray]) -> float:
    if len(data["label"]) == 0:
        return float("nan")
    return float(np.mean(predict(m, data) == data["label"]))


@dataclass
class TrainConfig:
    lr0: float = 3e-3
    steps: int = 3000
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    clip: float | None = 1.0
    warmup: int = 0
    log_every: int = 250


def _subset(data: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in data.items()}


def train(m: TrimodalModel, train_data: dict[str, np.ndarray], eval_data: dict[str, np.ndarray] | None,
          cfg: TrainConfig, sink: Callable[[dict], None] | None = None) -> list[dict]:
    """Run ``cfg.steps`` updates; returns the metric records (also passed to ``sink``)."""
    o = OptimState.for_store(m.store, lr0=cfg.lr0, weight_decay=cfg.weight_decay, clip=cfg.clip)
    sched = Schedule(lr0=cfg.lr0, total_steps=cfg.steps, warmup_steps=cfg.warmup)
    rng = np.random.default_rng([cfg.seed, 7919])
    n = len(train_data["label"])
    records = []
    order = rng.permutation(n)
    cursor = 0
    for s in range(cfg.steps):
        if cursor + cfg.batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        lr = lr_at(sched, s)
        out = step(m, o, _subset(train_data, idx), lr)
        last = s + 1 == cfg.steps
        if cfg.log_every and ((s + 1) % cfg.log_every == 0 or last):
            rec = {"step": s + 1, "lr": lr, "loss": out["loss"], "train_acc": out["train_acc"],
                   "eval_acc": accuracy(m, eval_data) if eval_data is not None else None}
            records.append(rec)
            if sink is not None:
                sink(rec)
    return records


def jsonl_sink(*streams: TextIO) -> Callable[[dict], None]:
    def emit(rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        for fh in streams:
            fh.write(line + "\n")
            fh.flush()
    return emit
