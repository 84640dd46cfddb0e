"""Feature-bundle data model, binary on-disk format, and dataset manifests.

A bundle holds one sample's patch-embedding grid plus its whole-sample
embedding as produced by a frozen encoder (or the synthetic generator).
The file format is fixed so other tools can emit compatible bundles:

    magic   b"AMOE"
    version u16 little-endian, currently 1
    hlen    u32 little-endian
    header  UTF-8 JSON of length hlen:
            {sample_id, class_id, grid_h, grid_w, dim, n_layers, label, has_mask}
    payload float32 little-endian arrays, in order:
            patch_embeddings (N*D, row-major), cls_embedding (D),
            each extra layer (N*D), then the mask as a u8 grid if present
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AMOE"
VERSION = 1

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


class BundleError(Exception):
    """Base class for bundle validation and IO failures."""


class BadMagicError(BundleError):
    pass


class VersionMismatchError(BundleError):
    pass


class TruncatedError(BundleError):
    pass


class DimMismatchError(BundleError):
    pass


@dataclass
class FeatureBundle:
    sample_id: str
    class_id: str
    grid_h: int
    grid_w: int
    dim: int
    patch_embeddings: np.ndarray  # (N, D) float32
    cls_embedding: np.ndarray  # (D,) float32
    layer_stack: list[np.ndarray] | None = None  # each (N, D) float32
    label: str = LABEL_NORMAL
    pixel_mask: np.ndarray | None = None  # (grid_h, grid_w) uint8

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if self.grid_h <= 0 or self.grid_w <= 0 or self.dim <= 0:
            raise DimMismatchError("grid dims and feature dim must be positive")
        n = self.n_patches
        if self.patch_embeddings.shape != (n, self.dim):
            raise DimMismatchError(
                f"patch_embeddings shape {self.patch_embeddings.shape} != ({n}, {self.dim})"
            )
        if self.cls_embedding.shape != (self.dim,):
            raise DimMismatchError(
                f"cls_embedding shape {self.cls_embedding.shape} != ({self.dim},)"
            )
        if not np.isfinite(self.patch_embeddings).all():
            raise BundleError("non-finite patch embeddings")
        if not np.isfinite(self.cls_embedding).all():
            raise BundleError("non-finite cls embedding")
        for i, layer in enumerate(self.layer_stack or []):
            if layer.shape != (n, self.dim):
                raise DimMismatchError(f"layer {i} shape {layer.shape} != ({n}, {self.dim})")
            if not np.isfinite(layer).all():
                raise BundleError(f"non-finite values in layer {i}")
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise BundleError(f"unknown label {self.label!r}")
        if self.pixel_mask is not None:
            if self.pixel_mask.shape != (self.grid_h, self.grid_w):
                raise DimMismatchError(
                    f"mask shape {self.pixel_mask.shape} != ({self.grid_h}, {self.grid_w})"
                )
            if self.label == LABEL_NORMAL and self.pixel_mask.any():
                raise BundleError("normal sample carries a nonzero anomaly mask")


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def write_bundle(bundle: FeatureBundle, path: str | Path) -> None:
    bundle.validate()
    header = {
        "sample_id": bundle.sample_id,
        "class_id": bundle.class_id,
        "grid_h": bundle.grid_h,
        "grid_w": bundle.grid_w,
        "dim": bundle.dim,
        "n_layers": len(bundle.layer_stack or []),
        "label": bundle.label,
        "has_mask": bundle.pixel_mask is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(_f32(bundle.patch_embeddings).tobytes())
        fh.write(_f32(bundle.cls_embedding).tobytes())
        for layer in bundle.layer_stack or []:
            fh.write(_f32(layer).tobytes())
        if bundle.pixel_mask is not None:
            fh.write(np.ascontiguousarray(bundle.pixel_mask, dtype=np.uint8).tobytes())


def read_bundle(path: str | Path) -> FeatureBundle:
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise TruncatedError(f"{path}: file shorter than the fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    off = 10
    if len(data) < off + hlen:
        raise TruncatedError(f"{path}: truncated JSON header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: unparsable header: {exc}") from exc
    off += hlen

    gh, gw, dim = header["grid_h"], header["grid_w"], header["dim"]
    n = gh * gw
    n_layers = header["n_layers"]

    def take_f32(count: int, what: str) -> np.ndarray:
        nonlocal off
        nbytes = count * 4
        if len(data) < off + nbytes:
            raise TruncatedError(f"{path}: payload ends inside {what}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).copy()
        off += nbytes
        return arr

    patches = take_f32(n * dim, "patch_embeddings").reshape(n, dim)
    cls = take_f32(dim, "cls_embedding")
    layers = [take_f32(n * dim, f"layer {i}").reshape(n, dim) for i in range(n_layers)]
    mask = None
    if header["has_mask"]:
        if len(data) < off + n:
            raise TruncatedError(f"{path}: payload ends inside mask")
        mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).copy().reshape(gh, gw)
        off += n
    bundle = FeatureBundle(
        sample_id=header["sample_id"],
        class_id=header["class_id"],
        grid_h=gh,
        grid_w=gw,
        dim=dim,
        patch_embeddings=patches,
        cls_embedding=cls,
        layer_stack=layers or None,
        label=header["label"],
        pixel_mask=mask,
    )
    bundle.validate()
    return bundle


def fuse_target(bundle: FeatureBundle, layer_select: list[int] | None = None) -> np.ndarray:
    """Elementwise mean of the selected feature levels.

    Index 0 selects patch_embeddings, 1..L the entries of layer_stack.
    Default: all available levels. The result is the reconstruction
    target consumed by every expert.
    """
    stack = [bundle.patch_embeddings] + list(bundle.layer_stack or [])
    if layer_select is None:
        layer_select = list(range(len(stack)))
    if not layer_select:
        raise BundleError("empty layer selection")
    for i in layer_select:
        if not 0 <= i < len(stack):
            raise BundleError(f"layer index {i} out of range (have {len(stack)} levels)")
    picked = [stack[i].astype(np.float64) for i in layer_select]
    return (sum(picked) / len(picked)).astype(np.float32)


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest's directory
    tag: str | None = None  # e.g. anomaly type for test entries


@dataclass
class DatasetManifest:
    seed: int
    classes: dict[str, dict[str, list[ManifestEntry]]] = field(default_factory=dict)
    # classes[class_id] = {"train": [...], "test": [...]}

    def add(self, class_id: str, split: str, path: str, tag: str | None = None) -> None:
        self.classes.setdefault(class_id, {"train": [], "test": []})
        self.classes[class_id][split].append(ManifestEntry(path=path, tag=tag))

    def to_json(self) -> str:
        obj = {
            "version": 1,
            "seed": self.seed,
            "classes": {
                c: {
                    split: [
                        {"path": e.path, **({"tag": e.tag} if e.tag else {})}
                        for e in entries
                    ]
                    for split, entries in splits.items()
                }
                for c, splits in self.classes.items()
            },
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        obj = json.loads(Path(path).read_text())
        man = cls(seed=obj["seed"])
        for class_id, splits in obj["classes"].items():
            for split, entries in splits.items():
                for e in entries:
                    man.add(class_id, split, e["path"], e.get("tag"))
        return man

    def bundle_paths(self, root: str | Path, class_id: str, split: str) -> list[Path]:
        root = Path(root)
        return [root / e.path for e in self.classes[class_id][split]]

    def validate_normal_training(self, root: str | Path) -> None:
        """Training splits must be normal-only; raises on violation."""
        for class_id in self.classes:
            for p in self.bundle_paths(root, class_id, "train"):
                b = read_bundle(p)
                if b.label != LABEL_NORMAL:
                    raise BundleError(f"{p}: anomalous sample in a training split")
