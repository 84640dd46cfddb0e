"""Deterministic synthetic feature generator with three anomaly levels.

Normal features of a class live in a rank-`manifold_rank` affine subspace:
each patch is mean_c + U_c @ (region_offset + shared_latent + jitter) + noise,
where U_c is a class-specific orthonormal basis and region offsets follow a
fixed 2x2 spatial partition of the grid. Anomalies:

  local      a random contiguous patch block is replaced with full-dimension
             Gaussian noise (off-manifold), mask = the block
  component  one region's generator is swapped for another class's region
             (locally valid features, wrong identity), mask = the region
  global     region identities are permuted in place (every patch stays
             locally valid, the arrangement is wrong), mask = moved regions
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundles import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    DatasetManifest,
    FeatureBundle,
    write_bundle,
)

ANOMALY_KINDS = ("local", "component", "global")

REGION_SPLIT = 2  # fixed 2x2 spatial partition; regions carry component identity
REGION_OFFSET_SCALE = 5.0
LATENT_JITTER = 0.1
FEATURE_NOISE = 0.05
LOCAL_NOISE_SCALE = 2.5
CLASS_MEAN_SCALE = 2.0


@dataclass
class SyntheticSpec:
    n_classes: int = 3
    samples_per_class: int = 200  # training normals
    test_per_class: int = 60  # half normal, half anomalous
    grid_h: int = 14
    grid_w: int = 14
    dim: int = 32
    manifold_rank: int = 4
    anomaly_mix: dict[str, float] = field(
        default_factory=lambda: {"local": 1 / 3, "component": 1 / 3, "global": 1 / 3}
    )
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if self.manifold_rank >= self.dim:
            raise ValueError("manifold_rank must be smaller than dim")
        if min(self.grid_h, self.grid_w) < 2:
            raise ValueError("grid must be at least 2x2")
        if set(self.anomaly_mix) - set(ANOMALY_KINDS):
            raise ValueError(f"anomaly_mix keys must be among {ANOMALY_KINDS}")
        total = sum(self.anomaly_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"anomaly_mix fractions sum to {total}, expected 1")
        if self.n_classes < 2 and self.anomaly_mix.get("component", 0) > 0:
            raise ValueError("component anomalies need a donor class (n_classes >= 2)")


class _ClassModel:
    """Per-class generator parameters."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        d, r = spec.dim, spec.manifold_rank
        self.mean = rng.normal(0.0, CLASS_MEAN_SCALE, size=d)
        self.cls_offset = rng.normal(0.0, CLASS_MEAN_SCALE, size=d)
        basis, _ = np.linalg.qr(rng.normal(size=(d, r)))
        self.basis = basis  # (d, r) orthonormal columns
        self.region_map = _region_map(spec.grid_h, spec.grid_w)
        self.n_regions = REGION_SPLIT * REGION_SPLIT
        self.region_offsets = rng.normal(0.0, REGION_OFFSET_SCALE, size=(self.n_regions, r))

    def patch_latents(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """(N, r) latents for one sample: region identity + shared latent + jitter."""
        regions = self.region_map.ravel()
        lat = self.region_offsets[regions] + z[None, :]
        lat = lat + rng.normal(0.0, LATENT_JITTER, size=lat.shape)
        return lat

    def features_from_latents(self, lat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        feats = self.mean[None, :] + lat @ self.basis.T
        return feats + rng.normal(0.0, FEATURE_NOISE, size=feats.shape)


def _region_map(grid_h: int, grid_w: int) -> np.ndarray:
    """(grid_h, grid_w) int map splitting the grid into a 2x2 partition."""
    rows = (np.arange(grid_h) * REGION_SPLIT) // grid_h
    cols = (np.arange(grid_w) * REGION_SPLIT) // grid_w
    return rows[:, None] * REGION_SPLIT + cols[None, :]


def _finish_bundle(
    spec: SyntheticSpec,
    model: _ClassModel,
    feats: np.ndarray,
    sample_id: str,
    class_id: str,
    label: str,
    mask: np.ndarray | None,
) -> FeatureBundle:
    cls = feats.mean(axis=0) + model.cls_offset
    return FeatureBundle(
        sample_id=sample_id,
        class_id=class_id,
        grid_h=spec.grid_h,
        grid_w=spec.grid_w,
        dim=spec.dim,
        patch_embeddings=feats.astype(np.float32),
        cls_embedding=cls.astype(np.float32),
        label=label,
        pixel_mask=mask,
    )


def _normal_sample(spec, model, rng):
    z = rng.normal(size=spec.manifold_rank)
    lat = model.patch_latents(z, rng)
    return model.features_from_latents(lat, rng)


def _local_anomaly(spec, model, rng):
    feats = _normal_sample(spec, model, rng)
    bh = int(rng.integers(3, max(4, spec.grid_h // 3) + 1))
    bw = int(rng.integers(3, max(4, spec.grid_w // 3) + 1))
    bh, bw = min(bh, spec.grid_h), min(bw, spec.grid_w)
    top = int(rng.integers(0, spec.grid_h - bh + 1))
    left = int(rng.integers(0, spec.grid_w - bw + 1))
    mask = np.zeros((spec.grid_h, spec.grid_w), dtype=np.uint8)
    mask[top : top + bh, left : left + bw] = 1
    idx = mask.ravel().astype(bool)
    feats[idx] = model.mean[None, :] + rng.normal(
        0.0, LOCAL_NOISE_SCALE, size=(idx.sum(), spec.dim)
    )
    return feats, mask


def _component_anomaly(spec, model, models, class_index, rng):
    z = rng.normal(size=spec.manifold_rank)
    lat = model.patch_latents(z, rng)
    feats = model.features_from_latents(lat, rng)

    region = int(rng.integers(model.n_regions))
    donor_idx = int(rng.choice([i for i in range(len(models)) if i != class_index]))
    donor = models[donor_idx]
    donor_region = int(rng.integers(donor.n_regions))

    sel = model.region_map.ravel() == region
    donor_z = rng.normal(size=spec.manifold_rank)
    donor_lat = donor.region_offsets[donor_region][None, :] + donor_z[None, :]
    donor_lat = donor_lat + rng.normal(0.0, LATENT_JITTER, size=(sel.sum(), spec.manifold_rank))
    feats[sel] = donor.features_from_latents(donor_lat, rng)
    mask = sel.reshape(spec.grid_h, spec.grid_w).astype(np.uint8)
    return feats, mask


def _global_anomaly(spec, model, rng):
    z = rng.normal(size=spec.manifold_rank)
    perm = np.arange(model.n_regions)
    while (perm == np.arange(model.n_regions)).all():
        perm = rng.permutation(model.n_regions)
    regions = model.region_map.ravel()
    lat = model.region_offsets[perm[regions]] + z[None, :]
    lat = lat + rng.normal(0.0, LATENT_JITTER, size=lat.shape)
    feats = model.features_from_latents(lat, rng)
    moved = perm[regions] != regions
    mask = moved.reshape(spec.grid_h, spec.grid_w).astype(np.uint8)
    return feats, mask


def _anomaly_schedule(spec: SyntheticSpec, n_anomalous: int) -> list[str]:
    """Deterministic per-class list of anomaly kinds honoring the mix fractions."""
    counts = {k: int(np.floor(spec.anomaly_mix.get(k, 0.0) * n_anomalous)) for k in ANOMALY_KINDS}
    rem = n_anomalous - sum(counts.values())
    order = sorted(
        ANOMALY_KINDS, key=lambda k: spec.anomaly_mix.get(k, 0.0) * n_anomalous - counts[k], reverse=True
    )
    for k in order[:rem]:
        counts[k] += 1
    out: list[str] = []
    for k in ANOMALY_KINDS:
        out.extend([k] * counts[k])
    return out


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Generate bundles + manifest under out_dir. Deterministic under spec.seed."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    models = [_ClassModel(spec, rng) for _ in range(spec.n_classes)]
    manifest = DatasetManifest(seed=spec.seed)

    n_test_normal = spec.test_per_class // 2
    n_test_anom = spec.test_per_class - n_test_normal

    for ci in range(spec.n_classes):
        class_id = f"cls{ci}"
        model = models[ci]
        cdir = out_dir / class_id
        cdir.mkdir(exist_ok=True)

        for si in range(spec.samples_per_class):
            feats = _normal_sample(spec, model, rng)
            b = _finish_bundle(spec, model, feats, f"{class_id}_train_{si:04d}", class_id,
                               LABEL_NORMAL, None)
            rel = f"{class_id}/train_{si:04d}.amoe"
            write_bundle(b, out_dir / rel)
            manifest.add(class_id, "train", rel)

        for si in range(n_test_normal):
            feats = _normal_sample(spec, model, rng)
            b = _finish_bundle(spec, model, feats, f"{class_id}_test_norm_{si:04d}", class_id,
                               LABEL_NORMAL, None)
            rel = f"{class_id}/test_norm_{si:04d}.amoe"
            write_bundle(b, out_dir / rel)
            manifest.add(class_id, "test", rel, tag="normal")

        for si, kind in enumerate(_anomaly_schedule(spec, n_test_anom)):
            if kind == "local":
                feats, mask = _local_anomaly(spec, model, rng)
            elif kind == "component":
                feats, mask = _component_anomaly(spec, model, models, ci, rng)
            else:
                feats, mask = _global_anomaly(spec, model, rng)
            b = _finish_bundle(spec, model, feats, f"{class_id}_test_{kind}_{si:04d}", class_id,
                               LABEL_ANOMALOUS, mask)
            rel = f"{class_id}/test_{kind}_{si:04d}.amoe"
            write_bundle(b, out_dir / rel)
            manifest.add(class_id, "test", rel, tag=kind)

    manifest.save(out_dir / "manifest.json")
    return manifest
