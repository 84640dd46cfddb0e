"""Finite-difference verification of the total-objective gradients.

Builds a tiny engine in float64 (default: D=8, 2x2 grid, one expert per
group, K=3 so the selection is constant and the objective is smooth),
evaluates autograd gradients of the total loss, and compares every model
parameter tensor against 64-bit central differences.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .components import ComponentKB
from .repulsion import RepulsionBank
from .training import Batch, Engine, TrainConfig, attach_components, total_loss
from .training import Sample

DEFAULT_TOLERANCE = 1e-4


def tiny_config(n_patch: int = 1, n_component: int = 1, n_global: int = 1,
                top_k: int | None = None) -> TrainConfig:
    # K = n_experts keeps the selection constant, so the objective is smooth
    # at the evaluation point; gates must be differentiated (not frozen) for
    # autograd and finite differences to measure the same function
    n_exp = n_patch + n_component + n_global
    return TrainConfig(
        batch_size=4,
        n_patch_experts=n_patch,
        n_component_experts=n_component,
        n_global_experts=n_global,
        top_k=n_exp if top_k is None else top_k,
        group_constrained=False,
        freeze_gates=False,
        noise_std=0.0,
        dropout_p=0.0,
        kb_clusters=2,
        club_hidden=8,
        seed=7,
    )


def build_tiny_problem(cfg: TrainConfig, dim: int = 8, grid_h: int = 2, grid_w: int = 2,
                       dtype: torch.dtype = torch.float64):
    """Deterministic (model, bank, batch, patch_input, perm) tuple."""
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = grid_h * grid_w
    b = cfg.batch_size
    targets = torch.randn(b, n, dim, generator=gen, dtype=dtype)
    cls = torch.randn(b, dim, generator=gen, dtype=dtype)

    samples = [
        Sample(target=targets[i], cls=cls[i], class_id="c0", label="normal")
        for i in range(b)
    ]
    kb = ComponentKB(clusters_per_class=cfg.kb_clusters)
    kb.fit_class("c0", torch.cat([s.target for s in samples]).numpy(), seed=cfg.seed)
    attach_components(samples, kb, grid_h, grid_w)
    for s in samples:
        s.comp_embeddings = s.comp_embeddings.to(dtype)

    batch = Batch(
        targets=targets,
        cls=cls,
        class_ids=[s.class_id for s in samples],
        labels=[s.label for s in samples],
        comp_ids=[s.comp_ids for s in samples],
        comp_embeddings=[s.comp_embeddings for s in samples],
    )
    model = Engine(cfg, dim, grid_h, grid_w, dtype=dtype)
    # move off the init point: the zero-initialized patch projection sits at
    # a critical point of the cosine loss where both gradient estimates vanish
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=dtype) * 0.05)
    bank = RepulsionBank(
        {"patch": cfg.n_patch_experts, "component": cfg.n_component_experts,
         "global": cfg.n_global_experts},
        dim=dim, hidden=cfg.club_hidden, lr=cfg.club_lr, dtype=dtype, seed=cfg.seed,
    )
    perm = torch.randperm(b, generator=gen)
    patch_input = targets  # corruption disabled in the tiny config
    return model, bank, batch, patch_input, perm


def gradient_errors(cfg: TrainConfig | None = None, h: float = 1e-5) -> dict[str, float]:
    """Relative error per model parameter tensor, autograd vs central FD."""
    cfg = cfg or tiny_config()
    model, bank, batch, patch_input, perm = build_tiny_problem(cfg)

    def loss_value() -> torch.Tensor:
        return total_loss(model, bank, batch, patch_input, perm).total

    model.zero_grad()
    loss_value().backward()

    errors: dict[str, float] = {}
    for name, p in model.named_parameters():
        auto = (p.grad if p.grad is not None else torch.zeros_like(p)).detach().clone()
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        fd_flat = fd.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            with torch.no_grad():
                up = loss_value().item()
            flat[i] = orig - step
            with torch.no_grad():
                down = loss_value().item()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * step)
        denom = max(auto.norm().item(), fd.norm().item(), 1e-12)
        errors[name] = float((auto - fd).norm().item() / denom)
    return errors


def run_gradcheck(tolerance: float = DEFAULT_TOLERANCE, verbose: bool = True,
                  case: str = "all") -> bool:
    """Acceptance-shaped check: the tiny one-expert-per-group model plus a
    two-patch-expert variant that exercises the repulsion gradients."""
    ok = True
    cases = {
        "one-expert-per-group": tiny_config(),
        "paired-patch-experts": tiny_config(n_patch=2, top_k=4),
    }
    if case == "tiny":
        cases = {"one-expert-per-group": cases["one-expert-per-group"]}
    elif case == "paired":
        cases = {"paired-patch-experts": cases["paired-patch-experts"]}
    elif case != "all":
        raise ValueError(f"unknown gradcheck case {case!r}")
    for label, cfg in cases.items():
        errors = gradient_errors(cfg)
        worst = max(errors.values())
        for name, err in sorted(errors.items()):
            status = "ok" if err < tolerance else "FAIL"
            if verbose:
                print(f"[{label}] {status:4s} rel_err={err:.3e}  {name}")
        if verbose:
            print(f"[{label}] worst rel_err = {worst:.3e} (tolerance {tolerance:g})")
        ok = ok and worst < tolerance
    return ok
