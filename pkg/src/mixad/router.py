"""Sparse top-K expert routing and the selection-balancing auxiliary loss.

Routing maps the whole-sample embedding to logits over all experts,
keeps the K largest (ties broken toward the lowest index), and softmaxes
over the kept logits only. The balancing loss has three parts:

  importance  n_experts * sum_j P_j^2 over the batch-mean full-softmax
              probabilities (minimum 1, reached only at uniform P)
  load        sum_j max(count_j - capacity, 0)^2 over hard selection counts;
              the backward pass substitutes soft counts (summed full softmax)
              straight-through so the router still receives gradient
  z           mean over the batch of the summed squared raw logits
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_EXPERTS_PER_GROUP = 6
DEFAULT_TOP_K = 3
DEFAULT_CAPACITY_FACTOR = 1.25


@dataclass
class RouterParams:
    weight: torch.Tensor  # (n_experts, dim)
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if not torch.isfinite(self.weight).all():
            raise ValueError("non-finite gating weights")

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class RoutingDecision:
    logits: np.ndarray  # (n_experts,)
    topk_indices: np.ndarray  # (K,) ascending
    gates: np.ndarray  # (n_experts,), zero off the selected set


@dataclass
class BatchRoutingStats:
    importance: np.ndarray  # gate-based P_j, batch mean of gates
    counts: np.ndarray  # C_j, samples whose top-K set contains j
    batch_size: int
    capacity: int


def topk_stable(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries along the last dim, ties to lowest index."""
    order = torch.argsort(-logits, dim=-1, stable=True)
    return order[..., :k]


def gates_from_logits(logits: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(gates, topk_indices) for a (B, n_experts) logit batch.

    Softmax is restricted to the selected logits with the selected max
    subtracted first, so shifting every logit by the same exactly
    representable constant leaves the gates bit-identical.
    """
    idx = topk_stable(logits, k)
    picked = torch.gather(logits, -1, idx)
    picked = picked - picked.max(dim=-1, keepdim=True).values
    w = torch.softmax(picked, dim=-1)
    gates = torch.zeros_like(logits)
    gates = gates.scatter(-1, idx, w)
    return gates, idx


def group_constrained_gates(
    logits: torch.Tensor, group_slices: list[tuple[int, int]]
) -> tuple[torch.Tensor, torch.Tensor]:
    """One pick per nonempty group: argmax inside each group, softmax over picks."""
    picks = []
    for start, stop in group_slices:
        if stop > start:
            sub = logits[..., start:stop]
            picks.append(start + topk_stable(sub, 1)[..., 0])
    idx = torch.stack(picks, dim=-1)
    picked = torch.gather(logits, -1, idx)
    picked = picked - picked.max(dim=-1, keepdim=True).values
    w = torch.softmax(picked, dim=-1)
    gates = torch.zeros_like(logits)
    gates = gates.scatter(-1, idx, w)
    return gates, idx


def route(cls_embedding: np.ndarray, params: RouterParams) -> RoutingDecision:
    """Route a single sample. Pure; see gates_from_logits for the batch path."""
    cls_embedding = np.asarray(cls_embedding)
    if cls_embedding.shape != (params.dim,):
        raise ValueError(f"cls shape {cls_embedding.shape} != ({params.dim},)")
    with torch.no_grad():
        cls_t = torch.as_tensor(cls_embedding, dtype=params.weight.dtype)
        logits = (params.weight @ cls_t).unsqueeze(0)
        gates, idx = gates_from_logits(logits, params.top_k)
    return RoutingDecision(
        logits=logits[0].numpy(),
        topk_indices=np.sort(idx[0].numpy()),
        gates=gates[0].numpy(),
    )


def routing_stats(
    gates: torch.Tensor, topk_indices: torch.Tensor, n_experts: int, capacity: int
) -> BatchRoutingStats:
    b = gates.shape[0]
    counts = torch.zeros(n_experts, dtype=torch.long)
    counts.scatter_add_(
        0, topk_indices.reshape(-1).cpu(), torch.ones(topk_indices.numel(), dtype=torch.long)
    )
    return BatchRoutingStats(
        importance=gates.detach().mean(dim=0).cpu().numpy(),
        counts=counts.numpy(),
        batch_size=b,
        capacity=capacity,
    )


def default_capacity(
    batch_size: int, top_k: int, n_experts: int, factor: float = DEFAULT_CAPACITY_FACTOR
) -> int:
    """ceil(ceil(B*K / n_experts) * factor); monotone in every argument."""
    if min(batch_size, top_k, n_experts) <= 0 or factor <= 0:
        raise ValueError("capacity arguments must be positive")
    return math.ceil(math.ceil(batch_size * top_k / n_experts) * factor)


def importance_loss(probs: np.ndarray | torch.Tensor) -> float:
    """n * sum(p^2) for a probability vector p; >= 1, equality iff uniform."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    probs = np.asarray(probs, dtype=np.float64)
    return float(len(probs) * np.dot(probs, probs))


@dataclass
class BalanceLossParts:
    importance: torch.Tensor
    load: torch.Tensor
    z: torch.Tensor
    total: torch.Tensor


def balance_loss(
    logits: torch.Tensor,
    counts: torch.Tensor,
    capacity: int,
    w_importance: float = 1.0,
    w_load: float = 1.0,
    w_z: float = 1.0,
) -> BalanceLossParts:
    """Selection-balancing loss over the full (B, n_experts) logit batch.

    `counts` are the hard per-expert selection counts (long tensor). Their
    gradient path is a straight-through soft count so the loss value stays
    exactly the hard-count penalty.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, n_experts)")
    if counts.shape != (logits.shape[1],):
        raise ValueError("counts length must match n_experts")
    n_experts = logits.shape[1]
    probs = torch.softmax(logits, dim=-1)
    p_mean = probs.mean(dim=0)
    imp = n_experts * (p_mean * p_mean).sum()

    soft_counts = probs.sum(dim=0)
    hard = counts.to(logits.dtype)
    counts_st = hard + (soft_counts - soft_counts.detach())
    over = torch.relu(counts_st - capacity)
    load = (over * over).sum()

    z = (logits * logits).sum(dim=1).mean()

    total = w_importance * imp + w_load * load + w_z * z
    return BalanceLossParts(importance=imp, load=load, z=z, total=total)
