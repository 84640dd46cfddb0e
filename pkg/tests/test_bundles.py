import numpy as np
import pytest

from mixad.bundles import (
    BadMagicError,
    BundleError,
    DatasetManifest,
    DimMismatchError,
    FeatureBundle,
    TruncatedError,
    VersionMismatchError,
    fuse_target,
    read_bundle,
    write_bundle,
)


def make_bundle(seed=0, grid=(3, 4), dim=5, layers=2, mask=False, label="normal"):
    rng = np.random.default_rng(seed)
    gh, gw = grid
    n = gh * gw
    pm = None
    if mask:
        pm = np.zeros((gh, gw), dtype=np.uint8)
        pm[0, 0] = 1
        label = "anomalous"
    return FeatureBundle(
        sample_id=f"s{seed}",
        class_id="widget",
        grid_h=gh,
        grid_w=gw,
        dim=dim,
        patch_embeddings=rng.normal(size=(n, dim)).astype(np.float32),
        cls_embedding=rng.normal(size=dim).astype(np.float32),
        layer_stack=[rng.normal(size=(n, dim)).astype(np.float32) for _ in range(layers)],
        label=label,
        pixel_mask=pm,
    )


class TestRoundTrip:
    def test_identity(self, tmp_path):
        b = make_bundle(mask=True)
        p = tmp_path / "b.amoe"
        write_bundle(b, p)
        r = read_bundle(p)
        assert r.sample_id == b.sample_id
        assert r.class_id == b.class_id
        assert (r.grid_h, r.grid_w, r.dim) == (b.grid_h, b.grid_w, b.dim)
        np.testing.assert_array_equal(r.patch_embeddings, b.patch_embeddings)
        np.testing.assert_array_equal(r.cls_embedding, b.cls_embedding)
        assert len(r.layer_stack) == 2
        for a, c in zip(r.layer_stack, b.layer_stack):
            np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(r.pixel_mask, b.pixel_mask)
        assert r.label == b.label

    def test_rewrite_is_byte_identical(self, tmp_path):
        b = make_bundle(seed=3)
        p1, p2 = tmp_path / "a.amoe", tmp_path / "b.amoe"
        write_bundle(b, p1)
        write_bundle(read_bundle(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_no_layers_no_mask(self, tmp_path):
        b = make_bundle(layers=0)
        p = tmp_path / "b.amoe"
        write_bundle(b, p)
        r = read_bundle(p)
        assert r.layer_stack is None
        assert r.pixel_mask is None


class TestFormatErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "b.amoe"
        write_bundle(make_bundle(), p)
        data = bytearray(p.read_bytes())
        data[:4] = b"NOPE"
        p.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            read_bundle(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "b.amoe"
        write_bundle(make_bundle(), p)
        data = bytearray(p.read_bytes())
        data[4] = 9
        p.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            read_bundle(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "b.amoe"
        write_bundle(make_bundle(), p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 40])
        with pytest.raises(TruncatedError):
            read_bundle(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "b.amoe"
        write_bundle(make_bundle(), p)
        p.write_bytes(p.read_bytes()[:12])
        with pytest.raises(TruncatedError):
            read_bundle(p)

    def test_dim_mismatch_rejected(self):
        b = make_bundle()
        b.patch_embeddings = b.patch_embeddings[:-1]
        with pytest.raises(DimMismatchError):
            b.validate()

    def test_normal_with_nonzero_mask_rejected(self):
        b = make_bundle()
        b.pixel_mask = np.ones((b.grid_h, b.grid_w), dtype=np.uint8)
        with pytest.raises(BundleError):
            b.validate()


class TestFuseTarget:
    def test_single_layer_is_identity(self):
        b = make_bundle(layers=0)
        np.testing.assert_array_equal(fuse_target(b, [0]), b.patch_embeddings)

    def test_mean_of_identical_layers_idempotent(self):
        b = make_bundle(layers=0)
        b.layer_stack = [b.patch_embeddings.copy()]
        np.testing.assert_allclose(fuse_target(b, [0, 1]), b.patch_embeddings, rtol=0, atol=0)

    def test_arithmetic_mean(self):
        b = make_bundle(layers=0)
        n = b.n_patches
        b.patch_embeddings = np.ones((n, b.dim), dtype=np.float32)
        b.layer_stack = [np.full((n, b.dim), 3.0, dtype=np.float32)]
        np.testing.assert_array_equal(fuse_target(b, [0, 1]), np.full((n, b.dim), 2.0))

    def test_permutation_invariant(self):
        b = make_bundle(layers=3)
        np.testing.assert_array_equal(fuse_target(b, [0, 2, 3]), fuse_target(b, [3, 0, 2]))

    def test_empty_selection_rejected(self):
        with pytest.raises(BundleError):
            fuse_target(make_bundle(), [])

    def test_out_of_range_rejected(self):
        with pytest.raises(BundleError):
            fuse_target(make_bundle(layers=1), [0, 5])


class TestManifest:
    def test_round_trip(self, tmp_path):
        man = DatasetManifest(seed=5)
        man.add("a", "train", "a/t0.amoe")
        man.add("a", "test", "a/x0.amoe", tag="local")
        p = tmp_path / "manifest.json"
        man.save(p)
        back = DatasetManifest.load(p)
        assert back.seed == 5
        assert back.classes["a"]["test"][0].tag == "local"
        assert back.to_json() == man.to_json()

    def test_normal_only_training_enforced(self, tmp_path):
        b = make_bundle(mask=True)
        write_bundle(b, tmp_path / "bad.amoe")
        man = DatasetManifest(seed=0)
        man.add("widget", "train", "bad.amoe")
        with pytest.raises(BundleError):
            man.validate_normal_training(tmp_path)
