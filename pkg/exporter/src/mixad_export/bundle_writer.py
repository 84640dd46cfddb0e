"""Writer for the mixad feature-bundle interchange format.

Independent implementation of the on-disk contract (the engine package is
not imported):

    magic   b"AMOE"
    version u16 little-endian = 1
    hlen    u32 little-endian
    header  UTF-8 JSON: {sample_id, class_id, grid_h, grid_w, dim,
            n_layers, label, has_mask}
    payload float32-LE: patch embeddings (row-major), cls embedding,
            extra layers, then the mask as a u8 grid if present

The manifest is a JSON file mapping classes to relative bundle paths per
split, with an optional per-entry tag.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMOE"
VERSION = 1


class WriteError(Exception):
    pass


def write_bundle(
    path: str | Path,
    sample_id: str,
    class_id: str,
    grid_h: int,
    grid_w: int,
    patches: np.ndarray,
    cls: np.ndarray,
    label: str,
    layers: list[np.ndarray] | None = None,
    mask: np.ndarray | None = None,
) -> None:
    n = grid_h * grid_w
    patches = np.ascontiguousarray(patches, dtype="<f4")
    cls = np.ascontiguousarray(cls, dtype="<f4")
    layers = [np.ascontiguousarray(l, dtype="<f4") for l in (layers or [])]
    dim = patches.shape[1]
    if patches.shape != (n, dim):
        raise WriteError(f"patches shape {patches.shape} != ({n}, {dim})")
    if cls.shape != (dim,):
        raise WriteError(f"cls shape {cls.shape} != ({dim},)")
    for i, layer in enumerate(layers):
        if layer.shape != (n, dim):
            raise WriteError(f"layer {i} shape {layer.shape} != ({n}, {dim})")
    if label not in ("normal", "anomalous"):
        raise WriteError(f"label must be normal|anomalous, got {label!r}")
    if mask is not None and mask.shape != (grid_h, grid_w):
        raise WriteError(f"mask shape {mask.shape} != ({grid_h}, {grid_w})")
    if not np.isfinite(patches).all() or not np.isfinite(cls).all():
        raise WriteError("non-finite embedding values")

    header = {
        "sample_id": sample_id,
        "class_id": class_id,
        "grid_h": grid_h,
        "grid_w": grid_w,
        "dim": int(dim),
        "n_layers": len(layers),
        "label": label,
        "has_mask": mask is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(patches.tobytes())
        fh.write(cls.tobytes())
        for layer in layers:
            fh.write(layer.tobytes())
        if mask is not None:
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


class ManifestBuilder:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.classes: dict[str, dict[str, list[dict]]] = {}

    def add(self, class_id: str, split: str, rel_path: str, tag: str | None = None) -> None:
        self.classes.setdefault(class_id, {"train": [], "test": []})
        entry = {"path": rel_path}
        if tag:
            entry["tag"] = tag
        self.classes[class_id][split].append(entry)

    def save(self, path: str | Path) -> None:
        obj = {"version": 1, "seed": self.seed, "classes": self.classes}
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
