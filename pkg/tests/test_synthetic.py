import hashlib

import numpy as np
import pytest

from mixad.bundles import read_bundle
from mixad.synthetic import SyntheticSpec, gen_synthetic


def small_spec(**kw):
    defaults = dict(
        n_classes=2,
        samples_per_class=30,
        test_per_class=12,
        grid_h=8,
        grid_w=8,
        dim=16,
        manifold_rank=4,
        seed=42,
    )
    defaults.update(kw)
    return SyntheticSpec(**defaults)


def dataset_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.amoe")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_determinism_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    gen_synthetic(small_spec(), a)
    gen_synthetic(small_spec(), b)
    assert dataset_digest(a) == dataset_digest(b)


def test_different_seed_differs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    gen_synthetic(small_spec(), a)
    gen_synthetic(small_spec(seed=43), b)
    assert dataset_digest(a) != dataset_digest(b)


def test_local_only_mix_yields_contiguous_blocks(tmp_path):
    man = gen_synthetic(
        small_spec(anomaly_mix={"local": 1.0, "component": 0.0, "global": 0.0}), tmp_path
    )
    n_anomalous = 0
    for class_id, splits in man.classes.items():
        for entry in splits["test"]:
            b = read_bundle(tmp_path / entry.path)
            if b.label != "anomalous":
                continue
            n_anomalous += 1
            assert entry.tag == "local"
            mask = b.pixel_mask
            assert mask is not None and mask.any()
            rows = np.where(mask.any(axis=1))[0]
            cols = np.where(mask.any(axis=0))[0]
            block = np.zeros_like(mask)
            block[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = 1
            np.testing.assert_array_equal(mask, block)
    assert n_anomalous > 0


def test_train_split_all_normal(tmp_path):
    man = gen_synthetic(small_spec(), tmp_path)
    man.validate_normal_training(tmp_path)


def test_rank_structure_pca_oracle(tmp_path):
    """Normals live in a rank-r subspace; local anomalies do not.

    Oracle: center pooled patches per class, project onto the top-r
    principal components, compare mean squared residuals.
    """
    spec = small_spec(dim=32, manifold_rank=4, samples_per_class=40)
    man = gen_synthetic(spec, tmp_path)
    for class_id in man.classes:
        normal = np.concatenate(
            [
                read_bundle(tmp_path / e.path).patch_embeddings
                for e in man.classes[class_id]["train"]
            ]
        ).astype(np.float64)
        mean = normal.mean(axis=0)
        centered = normal - mean
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        basis = vt[:4]

        def residual(x):
            c = x - mean
            proj = c @ basis.T @ basis
            return float(((c - proj) ** 2).sum(axis=1).mean())

        explained = (s[:4] ** 2).sum() / (s**2).sum()
        assert explained > 0.95

        local_patches = []
        for e in man.classes[class_id]["test"]:
            if e.tag != "local":
                continue
            b = read_bundle(tmp_path / e.path)
            sel = b.pixel_mask.ravel().astype(bool)
            local_patches.append(b.patch_embeddings[sel])
        anomalous = np.concatenate(local_patches).astype(np.float64)
        assert residual(normal) < 0.10 * residual(anomalous)


def test_global_anomaly_patches_stay_on_manifold(tmp_path):
    spec = small_spec(dim=32, manifold_rank=4, samples_per_class=40,
                      anomaly_mix={"local": 0.0, "component": 0.0, "global": 1.0})
    man = gen_synthetic(spec, tmp_path)
    for class_id in man.classes:
        normal = np.concatenate(
            [read_bundle(tmp_path / e.path).patch_embeddings
             for e in man.classes[class_id]["train"]]
        ).astype(np.float64)
        mean = normal.mean(axis=0)
        _, s, vt = np.linalg.svd(normal - mean, full_matrices=False)
        basis = vt[:4]
        for e in man.classes[class_id]["test"]:
            if e.tag != "global":
                continue
            b = read_bundle(tmp_path / e.path)
            assert b.pixel_mask.any()
            c = b.patch_embeddings.astype(np.float64) - mean
            resid = ((c - c @ basis.T @ basis) ** 2).sum(axis=1).mean()
            within = ((normal - mean) - (normal - mean) @ basis.T @ basis) ** 2
            assert resid < 5 * within.sum(axis=1).mean()


def test_component_anomaly_uses_donor_class(tmp_path):
    spec = small_spec(anomaly_mix={"local": 0.0, "component": 1.0, "global": 0.0})
    man = gen_synthetic(spec, tmp_path)
    saw = 0
    for class_id in man.classes:
        for e in man.classes[class_id]["test"]:
            if e.tag == "component":
                b = read_bundle(tmp_path / e.path)
                assert b.pixel_mask.any()
                saw += 1
    assert saw > 0


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        small_spec(manifold_rank=16).validate()  # rank == dim
    with pytest.raises(ValueError):
        small_spec(anomaly_mix={"local": 0.5, "component": 0.2, "global": 0.2}).validate()
    with pytest.raises(ValueError):
        small_spec(n_classes=1).validate()  # component anomalies need a donor
