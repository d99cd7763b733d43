"""Run-level workflows shared by the command line and the acceptance suite."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import toydata
from .config import RunConfig, config_from_dict
from .model import ABLATION_ROWS, Ablation, TrimodalModel
from .params import load_checkpoint, read_checkpoint, save_checkpoint
from .train import accuracy, train


def dataset(cfg: RunConfig, split: str) -> list[toydata.ToySample]:
    """Samples of ``split`` from the configured JSONL file, or generated on the fly."""
    path = cfg.paths.data if split == "train" else cfg.paths.eval_data
    if path:
        return toydata.load(path, num_classes=cfg.model.num_classes)
    return list(toydata.generate(cfg.dataset_spec(split)))


def arrays(cfg: RunConfig, split: str) -> dict[str, np.ndarray]:
    samples = dataset(cfg, split)
    if not samples:
        raise toydata.DataError(f"{split} split is empty")
    out = toydata.to_arrays(samples)
    m = cfg.model
    want = {"visual": (m.T, m.Nv), "audio": (m.T, m.Na), "lang": (m.Nl,)}
    for key, shape in want.items():
        if out[key].shape[1:] != shape:
            raise toydata.DataError(f"{split} {key} ids have shape {out[key].shape[1:]}, config expects {shape}")
    return out


def build_model(cfg: RunConfig) -> TrimodalModel:
    return TrimodalModel(cfg.model_config(), dtype=np.dtype(cfg.train.precision))


@dataclass
class RunResult:
    model: TrimodalModel
    records: list[dict]
    eval_acc: float


def run(cfg: RunConfig, sink: Callable[[dict], None] | None = None,
        data: tuple[dict, dict] | None = None) -> RunResult:
    """Train one model from ``cfg`` and evaluate it on the eval split."""
    train_data, eval_data = data if data is not None else (arrays(cfg, "train"), arrays(cfg, "eval"))
    m = build_model(cfg)
    records = train(m, train_data, eval_data, cfg.train_config(), sink)
    return RunResult(m, records, accuracy(m, eval_data))


def save_run(result: RunResult, cfg: RunConfig, directory: str | Path) -> Path:
    return save_checkpoint(result.model.store, directory, config=cfg.to_dict())


def restore(directory: str | Path) -> tuple[RunConfig, TrimodalModel]:
    """Rebuild the model recorded in a checkpoint, config included."""
    manifest, _ = read_checkpoint(directory)
    cfg = config_from_dict(manifest.get("config") or {}, origin=f"{directory}/manifest.json")
    m = build_model(cfg)
    load_checkpoint(m.store, directory)
    return cfg, m


def metrics_header(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict()}


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass
class GridCell:
    label: str
    ablation: Ablation
    k: int
    accs: list[float]

    @property
    def mean(self) -> float:
        return mean_sd(self.accs)[0]

    @property
    def sd(self) -> float:
        return mean_sd(self.accs)[1]


def _seeded_data(cfg: RunConfig, seeds: Sequence[int]) -> dict[int, tuple[dict, dict]]:
    return {s: (arrays(cfg.with_seed(s), "train"), arrays(cfg.with_seed(s), "eval")) for s in seeds}


def grid(cfg: RunConfig, variants: Sequence[tuple[str, Ablation, int]], seeds: Sequence[int],
         progress: Callable[[str, int, float], None] | None = None) -> list[GridCell]:
    """Train every ``(label, ablation, K)`` variant once per seed; seed ``s`` fixes data and init."""
    data = _seeded_data(cfg, seeds)
    cells = []
    for label, ab, k in variants:
        accs = []
        for s in seeds:
            c = cfg.with_seed(s).with_ablation(ab)
            c.model.K = k
            acc = run(c, data=data[s]).eval_acc
            accs.append(acc)
            if progress is not None:
                progress(label, s, acc)
        cells.append(GridCell(label, ab, k, accs))
    return cells


def ablation_variants(cfg: RunConfig, rows: Sequence[int] = tuple(ABLATION_ROWS)):
    return [(f"#{r} {ABLATION_ROWS[r].label()}", ABLATION_ROWS[r], cfg.model.K) for r in rows]


def sweep_variants(cfg: RunConfig, ks: Sequence[int]):
    ab = cfg.ablation_flags()
    return [(f"K={k}", ab, k) for k in ks]


def dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)
