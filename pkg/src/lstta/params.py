"""Named parameter registry and the manifest + blob checkpoint format."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
_BLOB_DTYPE = np.dtype("<f4")


class ParamStore:
    """Ordered map ``name -> (tensor, trainable)``.

    Insertion order is the checkpoint order, so two models built the same way
    serialise to identical bytes.
    """

    def __init__(self) -> None:
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = trainable
        self._entries[name] = (tensor, trainable)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, bool]]:
        for name, (t, tr) in self._entries.items():
            yield name, t, tr

    def names(self) -> list[str]:
        return list(self._entries)

    def is_trainable(self, name: str) -> bool:
        return self._entries[name][1]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, tr in self.items() if tr]

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, tr in self.items() if not tr]

    def count_trainable(self) -> int:
        return sum(t.data.size for _, t in self.trainable())

    def count_frozen(self) -> int:
        return sum(t.data.size for _, t in self.frozen())

    def count_total(self) -> int:
        return sum(t.data.size for _, t, _ in self.items())

    def count_prefix(self, prefix: str) -> int:
        return sum(t.data.size for n, t, _ in self.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for _, t, _ in self.items():
            t.grad = None

    def digest(self, trainable: bool | None = None) -> str:
        """SHA-256 over names, shapes and raw values of the selected partition."""
        h = hashlib.sha256()
        for name, t, tr in self.items():
            if trainable is not None and tr != trainable:
                continue
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def save_checkpoint(store: ParamStore, directory: str | Path, config: dict[str, Any] | None = None) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` (little-endian float32, row-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t, tr in store.items():
        raw = np.ascontiguousarray(t.data, dtype=_BLOB_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "trainable": tr, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "lstta-checkpoint/1", "dtype": "float32-le", "config": config or {},
                "total_bytes": offset, "tensors": entries}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    return directory


def read_checkpoint(directory: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    blob = (directory / BLOB_NAME).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_BLOB_DTYPE, count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return manifest, arrays


def load_checkpoint(store: ParamStore, directory: str | Path, strict: bool = True) -> dict[str, Any]:
    """Copy checkpoint values into ``store`` in place; returns the manifest."""
    manifest, arrays = read_checkpoint(directory)
    flags = {e["name"]: e["trainable"] for e in manifest["tensors"]}
    for name, t, tr in store.items():
        if name not in arrays:
            if strict:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            continue
        if arrays[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
        if flags[name] != tr:
            raise ValueError(f"{name}: trainable flag mismatch")
        t.data[...] = arrays[name]
    if strict:
        extra = set(arrays) - set(store.names())
        if extra:
            raise KeyError(f"checkpoint has unknown parameters {sorted(extra)}")
    return manifest
