"""Patch-embedding encoders behind one interface.

`proj<patch>-<dim>` is a deterministic random-projection encoder: each
patch is flattened, standardized, and projected with a fixed Gaussian
matrix seeded from the encoder id. It needs no weights or network and is
the default for tests and offline runs. `dinov2-vitb14` loads the
pretrained backbone through torch.hub when available.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np


class EncoderError(Exception):
    pass


class RandomProjectionEncoder:
    """Seeded Gaussian projection of standardized raw patches."""

    def __init__(self, patch_size: int, dim: int, encoder_id: str):
        self.patch_size = patch_size
        self.dim = dim
        self.encoder_id = encoder_id
        seed = int.from_bytes(hashlib.sha256(encoder_id.encode()).digest()[:4], "little")
        rng = np.random.default_rng(seed)
        n_in = patch_size * patch_size * 3
        self.proj = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, dim)).astype(np.float32)

    def encode(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """image: (H, W, 3) float32 in [0, 1] with H, W multiples of patch_size."""
        h, w, _ = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise EncoderError(f"image {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        patches = (
            image.reshape(gh, p, gw, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, p * p * 3)
        )
        mean = patches.mean(axis=1, keepdims=True)
        std = patches.std(axis=1, keepdims=True) + 1e-6
        emb = ((patches - mean) / std) @ self.proj
        # brightness carried separately so flat patches stay distinguishable
        emb[:, 0] += mean[:, 0]
        cls = emb.mean(axis=0)
        return emb.astype(np.float32), cls.astype(np.float32), []


class DinoV2Encoder:
    """Pretrained ViT backbone via torch.hub; needs torch and network/cache."""

    def __init__(self, encoder_id: str, layer_indices: list[int] | None = None):
        try:
            import torch  # noqa: F401
        except ImportError as exc:
            raise EncoderError("dinov2 encoders need torch installed") from exc
        import torch

        name = {"dinov2-vitb14": "dinov2_vitb14"}.get(encoder_id)
        if name is None:
            raise EncoderError(f"unknown dinov2 encoder {encoder_id!r}")
        try:
            self.model = torch.hub.load("facebookresearch/dinov2", name)
        except Exception as exc:
            raise EncoderError(
                f"could not load {encoder_id} via torch.hub (offline?): {exc}"
            ) from exc
        self.model.eval()
        self.patch_size = 14
        self.dim = self.model.embed_dim
        self.layer_indices = layer_indices or [-4, -3, -2, -1]

    def encode(self, image: np.ndarray):
        import torch

        x = torch.from_numpy(image.transpose(2, 0, 1)).unsqueeze(0)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        x = (x - mean) / std
        with torch.no_grad():
            layers = self.model.get_intermediate_layers(x, n=len(self.layer_indices))
            cls = self.model.forward_features(x)["x_norm_clstoken"][0]
        stack = [l[0].numpy().astype(np.float32) for l in layers]
        return stack[-1], cls.numpy().astype(np.float32), stack[:-1]


def build_encoder(encoder_id: str, layer_indices: list[int] | None = None):
    m = re.fullmatch(r"proj(\d+)-(\d+)", encoder_id)
    if m:
        return RandomProjectionEncoder(int(m.group(1)), int(m.group(2)), encoder_id)
    if encoder_id.startswith("dinov2"):
        return DinoV2Encoder(encoder_id, layer_indices)
    raise EncoderError(
        f"unknown encoder {encoder_id!r}; expected proj<patch>-<dim> or dinov2-vitb14"
    )
