"""The three heterogeneous expert families and their losses / score maps.

Patch experts are residual transformer decoders with linear attention; the
final output projection is zero-initialized so an untrained expert is the
exact identity on features. Component experts are MLP autoencoders over
pooled component embeddings. Global experts are convolutional autoencoders
over the feature grid compressed down to a 1x1 code, so the decoder has to
repaint the layout from a global summary instead of copying it through.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

ATTN_EPS = 1e-6
COSINE_EPS = 1e-8


# ---------------------------------------------------------------------------
# input corruption

@dataclass
class CorruptionConfig:
    noise_std: float = 0.1  # relative to the global feature std
    dropout_p: float = 0.2
    enabled_at_inference: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p={self.dropout_p} outside [0, 1]")
        if not (self.noise_std >= 0.0 and torch.isfinite(torch.tensor(self.noise_std))):
            raise ValueError(f"noise_std={self.noise_std} must be finite and >= 0")


def corrupt(
    features: torch.Tensor, cfg: CorruptionConfig, generator: torch.Generator
) -> torch.Tensor:
    """Additive Gaussian noise then inverted dropout, both elementwise.

    Noise std is cfg.noise_std times the global std of `features`, so the
    corruption level is scale-free across encoders. p=1 short-circuits to
    all zeros.
    """
    cfg.validate()
    out = features
    if cfg.noise_std > 0.0:
        scale = cfg.noise_std * features.detach().std()
        noise = torch.randn(features.shape, generator=generator, dtype=features.dtype)
        out = out + scale * noise
    p = cfg.dropout_p
    if p >= 1.0:
        return torch.zeros_like(out)
    if p > 0.0:
        keep = (torch.rand(out.shape, generator=generator, dtype=out.dtype) >= p)
        out = out * keep.to(out.dtype) / (1.0 - p)
    return out


# ---------------------------------------------------------------------------
# linear attention

def _feature_map(x: torch.Tensor) -> torch.Tensor:
    # elu(x) + 1: nonnegative, smooth; the contract is nonnegativity plus
    # row-normalization, not this particular kernel
    return torch.nn.functional.elu(x) + 1.0


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Kernelized attention via the factorized O(N*d^2) accumulation.

    Equals the explicit row-normalized form with weights
    phi(q_i).phi(k_j) / sum_j' phi(q_i).phi(k_j'); works on (N, d) or
    (..., N, d) inputs.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    fq, fk = _feature_map(q), _feature_map(k)
    kv = torch.einsum("...nd,...ne->...de", fk, v)
    num = torch.einsum("...nd,...de->...ne", fq, kv)
    den = torch.einsum("...nd,...d->...n", fq, fk.sum(dim=-2))
    return num / (den + ATTN_EPS).unsqueeze(-1)


def quadratic_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Explicit O(N^2) form of linear_attention; test oracle only."""
    fq, fk = _feature_map(q), _feature_map(k)
    w = torch.einsum("...nd,...md->...nm", fq, fk)
    w = w / (w.sum(dim=-1, keepdim=True) + ATTN_EPS)
    return torch.einsum("...nm,...me->...ne", w, v)


# ---------------------------------------------------------------------------
# patch experts

class _LinearAttentionBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.proj(linear_attention(self.q(h), self.k(h), self.v(h)))
        x = x + self.ff(self.norm_ff(x))
        return x


class PatchExpert(nn.Module):
    """Residual linear-attention decoder; identity map at initialization."""

    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(_LinearAttentionBlock(dim) for _ in range(depth))
        self.out_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"feature dim {x.shape[-1]} != {self.dim}")
        h = x
        for block in self.blocks:
            h = block(h)
        return x + self.out_proj(h)


def cosine_distance_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cosine per row pair, shape (..., N); eps-guarded norms."""
    return 1.0 - torch.nn.functional.cosine_similarity(a, b, dim=-1, eps=COSINE_EPS)


def patch_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean over patches (and any batch dims) of the cosine distance."""
    if target.shape != recon.shape:
        raise ValueError("target/reconstruction shape mismatch")
    return cosine_distance_rows(target, recon).mean()


def patch_score(target: torch.Tensor, recon: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Per-patch cosine distance reshaped to the grid."""
    d = cosine_distance_rows(target, recon)
    return d.reshape(*d.shape[:-1], grid_h, grid_w)


# ---------------------------------------------------------------------------
# component experts

class ComponentExpert(nn.Module):
    """MLP autoencoder over single component embeddings, bottleneck < dim."""

    def __init__(self, dim: int, bottleneck: int | None = None):
        super().__init__()
        if bottleneck is None:
            bottleneck = max(dim // 8, 1)
        if not 1 <= bottleneck < dim:
            raise ValueError(f"bottleneck {bottleneck} must be in [1, {dim})")
        hidden = max(dim // 2, bottleneck)
        self.dim = dim
        self.bottleneck = bottleneck
        self.encoder = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, bottleneck))
        self.decoder = nn.Sequential(nn.Linear(bottleneck, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def component_loss(embeddings: torch.Tensor, recons: torch.Tensor) -> torch.Tensor:
    """Mean cosine distance over a (K_c, D) component set."""
    if embeddings.numel() == 0:
        raise ValueError("empty component set")
    return cosine_distance_rows(embeddings, recons).mean()


def component_scores(embeddings: torch.Tensor, recons: torch.Tensor) -> torch.Tensor:
    """Per-component cosine distances, shape (K_c,)."""
    if embeddings.numel() == 0:
        raise ValueError("empty component set")
    return cosine_distance_rows(embeddings, recons)


# ---------------------------------------------------------------------------
# global experts

class GlobalExpert(nn.Module):
    """Convolutional autoencoder over the (D, H, W) feature grid.

    Two stride-2 convolutions downsample to a coarse grid with
    `bottleneck_channels` channels (default dim // 4); a fully connected
    bottleneck squeezes that into a single `code_dim` vector, so the
    decoder has to repaint the layout from a global summary instead of
    copying spatial content through. Two transposed convolutions refine
    the projected coarse grid back to the input size.
    """

    def __init__(self, dim: int, grid_h: int, grid_w: int,
                 bottleneck_channels: int | None = None, code_dim: int | None = None):
        super().__init__()
        if bottleneck_channels is None:
            bottleneck_channels = max(dim // 4, 1)
        if code_dim is None:
            code_dim = dim
        self.dim = dim
        self.grid_h, self.grid_w = grid_h, grid_w
        self.bottleneck_channels = bottleneck_channels
        self.code_dim = code_dim
        self.mid_hw = ((grid_h + 1) // 2, (grid_w + 1) // 2)
        self.coarse_hw = ((self.mid_hw[0] + 1) // 2, (self.mid_hw[1] + 1) // 2)
        if self.coarse_hw[0] * self.coarse_hw[1] >= grid_h * grid_w:
            raise ValueError("grid too small: bottleneck area must shrink")

        mid = max(dim // 2, bottleneck_channels)
        coarse_numel = bottleneck_channels * self.coarse_hw[0] * self.coarse_hw[1]
        self.encoder = nn.Sequential(
            nn.Conv2d(dim, mid, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(mid, bottleneck_channels, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.to_code = nn.Linear(coarse_numel, code_dim)
        self.from_code = nn.Linear(code_dim, coarse_numel)
        self.up_mid = nn.ConvTranspose2d(bottleneck_channels, mid, 3, stride=2, padding=1)
        self.up_out = nn.ConvTranspose2d(mid, dim, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (self.dim, self.grid_h, self.grid_w):
            raise ValueError(
                f"grid shape {tuple(x.shape[-3:])} != ({self.dim}, {self.grid_h}, {self.grid_w})"
            )
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        b = x.shape[0]
        code = self.to_code(self.encoder(x).flatten(1))
        h = self.from_code(code).reshape(b, self.bottleneck_channels, *self.coarse_hw)
        h = torch.relu(self.up_mid(h, output_size=(b, self.up_mid.out_channels, *self.mid_hw)))
        out = self.up_out(h, output_size=(b, self.up_out.out_channels, self.grid_h, self.grid_w))
        return out.squeeze(0) if squeeze else out


def global_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of the squared error (mean keeps grids comparable)."""
    if target.shape != recon.shape:
        raise ValueError("target/reconstruction shape mismatch")
    return ((target - recon) ** 2).mean()


def global_score(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Per-patch squared Euclidean distance over channels, (..., H, W)."""
    if target.shape != recon.shape:
        raise ValueError("target/reconstruction shape mismatch")
    return ((target - recon) ** 2).sum(dim=-3)
