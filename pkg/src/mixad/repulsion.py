"""Mutual-information repulsion between same-group expert representations.

Each unordered expert pair (j, k), j < k, inside a group owns one small
variational network modeling q(z_k | z_j) as a diagonal Gaussian (one MLP
for the mean, one for the log-variance, clamped to [-10, 10]). The
CLUB-style upper bound on mutual information is estimated contrastively:
matched-pair log-likelihood minus permuted-pair log-likelihood. The nets
are trained by maximizing matched-pair log-likelihood on detached
representations; the repulsion loss is the sum of the (frozen-net)
estimates over all pairs of all groups.

ClubNet is the single-pair reference. RepulsionBank runs every pair of a
group as one stacked batched-matmul MLP; since Adam is elementwise, one
step on the stacked parameters equals one step of each pair's own
optimizer, so the batched path is the per-pair math, just faster.
"""

from __future__ import annotations

import math

import torch
from torch import nn

LOGVAR_CLAMP = 10.0
LOG_2PI = math.log(2.0 * math.pi)


class ClubNet(nn.Module):
    """Variational Gaussian conditional q(z_k | z_j) with its own optimizer.

    `logvar_bound` caps the predicted log-variance; the default +-10 is a
    pure numerical guard, while the engine's repulsion bank uses +-1 so a
    collapsing conditional variance cannot amplify the estimates (the
    reference batched estimator saturates its log-variance head the same
    way).
    """

    def __init__(self, dim: int, hidden: int = 64, lr: float = 1e-3,
                 dtype: torch.dtype = torch.float32, logvar_bound: float = LOGVAR_CLAMP):
        super().__init__()
        self.dim = dim
        self.logvar_bound = logvar_bound
        self.mu_net = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim)
        ).to(dtype)
        self.logvar_net = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim)
        ).to(dtype)
        self.opt = torch.optim.Adam(self.parameters(), lr=lr)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mu_net(z), self.logvar_net(z).clamp(-self.logvar_bound, self.logvar_bound)


def gaussian_loglik(z: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample diagonal-Gaussian log density over the last dim."""
    if not (z.shape == mu.shape == logvar.shape):
        raise ValueError("z, mu, logvar must share shape")
    return (-0.5 * logvar - (z - mu) ** 2 / (2.0 * logvar.exp()) - 0.5 * LOG_2PI).sum(dim=-1)


def club_estimate(
    z_j: torch.Tensor, z_k: torch.Tensor, net: ClubNet, perm: torch.Tensor
) -> torch.Tensor:
    """Contrastive MI upper-bound estimate for one ordered pair.

    Mean matched-pair log-likelihood minus mean permuted-pair
    log-likelihood; the net parameters are treated as frozen (gradients
    flow to the representations only).
    """
    if z_j.shape[0] < 2:
        raise ValueError("need a batch of at least 2")
    mu, logvar = net(z_j)
    positive = gaussian_loglik(z_k, mu, logvar).mean()
    negative = gaussian_loglik(z_k[perm], mu, logvar).mean()
    return positive - negative


def club_net_update(z_j: torch.Tensor, z_k: torch.Tensor, net: ClubNet) -> float:
    """One optimizer step maximizing matched-pair log-likelihood.

    Inputs are detached so no gradient reaches the main model; returns the
    mean log-likelihood before the step.
    """
    if z_j.shape[0] < 2:
        raise ValueError("need a batch of at least 2")
    z_j, z_k = z_j.detach(), z_k.detach()
    mu, logvar = net(z_j)
    loglik = gaussian_loglik(z_k, mu, logvar).mean()
    net.opt.zero_grad()
    (-loglik).backward()
    net.opt.step()
    return float(loglik.detach())


class _PairStack(nn.Module):
    """All C(n,2) pair nets of one group as stacked two-layer MLPs.

    Parameter layout per head (mu, logvar): w1 (P, D, H), b1 (P, 1, H),
    w2 (P, H, D), b2 (P, 1, D), initialized per pair exactly like the
    Linear layers of a ClubNet.
    """

    def __init__(self, n_experts: int, dim: int, hidden: int,
                 dtype: torch.dtype = torch.float32, logvar_bound: float = 1.0):
        super().__init__()
        self.pairs = [(j, k) for j in range(n_experts) for k in range(j + 1, n_experts)]
        self.dim, self.hidden = dim, hidden
        self.logvar_bound = logvar_bound
        p = len(self.pairs)

        def stack_linear(n_in: int, n_out: int) -> tuple[nn.Parameter, nn.Parameter]:
            ws, bs = [], []
            for _ in range(p):
                lin = nn.Linear(n_in, n_out)
                ws.append(lin.weight.detach().t().clone())
                bs.append(lin.bias.detach().clone())
            return (
                nn.Parameter(torch.stack(ws).to(dtype)),
                nn.Parameter(torch.stack(bs).unsqueeze(1).to(dtype)),
            )

        for head in ("mu", "logvar"):
            w1, b1 = stack_linear(dim, hidden)
            w2, b2 = stack_linear(hidden, dim)
            setattr(self, f"{head}_w1", w1)
            setattr(self, f"{head}_b1", b1)
            setattr(self, f"{head}_w2", w2)
            setattr(self, f"{head}_b2", b2)

    def _head(self, z: torch.Tensor, head: str) -> torch.Tensor:
        h = torch.baddbmm(getattr(self, f"{head}_b1"), z, getattr(self, f"{head}_w1")).relu()
        return torch.baddbmm(getattr(self, f"{head}_b2"), h, getattr(self, f"{head}_w2"))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z: (P, B, D) stacked inputs -> (mu, clamped logvar), each (P, B, D)."""
        lv = self._head(z, "logvar").clamp(-self.logvar_bound, self.logvar_bound)
        return self._head(z, "mu"), lv

    def gather_inputs(self, reps: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        z_in = torch.stack([reps[j] for j, _ in self.pairs])
        z_out = torch.stack([reps[k] for _, k in self.pairs])
        return z_in, z_out


def _stack_loglik(z: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """(P, B) log densities for stacked pair tensors."""
    return (-0.5 * logvar - (z - mu) ** 2 / (2.0 * logvar.exp()) - 0.5 * LOG_2PI).sum(dim=-1)


def standardize_rows(rep: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-row standardization over the feature dim (layer-norm style).

    Keeps the CLUB inputs at unit scale regardless of the experts' output
    magnitudes; without it the conditional variances collapse and both the
    estimates and their gradients blow up.
    """
    mean = rep.mean(dim=-1, keepdim=True)
    std = rep.std(dim=-1, unbiased=False, keepdim=True)
    return (rep - mean) / (std + eps)


class RepulsionBank(nn.Module):
    """One variational net per unordered same-group pair, batched per group."""

    def __init__(self, group_sizes: dict[str, int], dim: int, hidden: int = 64,
                 lr: float = 1e-3, dtype: torch.dtype = torch.float32, seed: int = 0,
                 logvar_bound: float = 1.0):
        super().__init__()
        self.dim, self.hidden = dim, hidden
        self.logvar_bound = logvar_bound
        self.group_sizes = dict(group_sizes)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.stacks = nn.ModuleDict(
                {
                    g: _PairStack(n, dim, hidden, dtype=dtype, logvar_bound=logvar_bound)
                    for g, n in group_sizes.items()
                    if n >= 2
                }
            )
        self.opt = torch.optim.Adam(self.parameters(), lr=lr) if len(self.stacks) else None

    def n_pairs(self) -> int:
        return sum(len(s.pairs) for s in self.stacks.values())

    def update_all(self, reps: dict[str, list[torch.Tensor]]) -> float:
        """One log-likelihood ascent step for every pair net; mean loglik returned."""
        if not self.stacks:
            return 0.0
        total, count = 0.0, 0
        self.opt.zero_grad()
        losses = []
        for g, stack in self.stacks.items():
            normed = [standardize_rows(r.detach()) for r in reps[g]]
            z_in, z_out = stack.gather_inputs(normed)
            mu, logvar = stack(z_in)
            ll = _stack_loglik(z_out, mu, logvar).mean(dim=1)  # (P,)
            losses.append(ll.sum())
            total += float(ll.detach().sum())
            count += ll.shape[0]
        (-sum(losses)).backward()
        self.opt.step()
        return total / count if count else 0.0

    def repulsion_loss(
        self, reps: dict[str, list[torch.Tensor]], perm: torch.Tensor
    ) -> torch.Tensor:
        """Sum of frozen-net contrastive estimates over all same-group pairs.

        Groups with fewer than two experts contribute nothing. One shared
        permutation supplies every pair's negatives for the step.
        """
        some = next((r[0] for r in reps.values() if r), None)
        total = torch.zeros((), dtype=some.dtype if some is not None else torch.float32)
        frozen = [p for p in self.parameters()]
        for p in frozen:
            p.requires_grad_(False)
        try:
            for g, stack in self.stacks.items():
                normed = [standardize_rows(r) for r in reps[g]]
                z_in, z_out = stack.gather_inputs(normed)
                mu, logvar = stack(z_in)
                pos = _stack_loglik(z_out, mu, logvar).mean(dim=1)
                neg = _stack_loglik(z_out[:, perm], mu, logvar).mean(dim=1)
                total = total + (pos - neg).sum()
        finally:
            for p in frozen:
                p.requires_grad_(True)
        return total

    def pairs(self) -> list[tuple[str, int, int]]:
        return [(g, j, k) for g, stack in self.stacks.items() for j, k in stack.pairs]

    def extract_net(self, group: str, j: int, k: int) -> ClubNet:
        """Standalone copy of one pair's net (for inspection and tests)."""
        stack = self.stacks[group]
        p = stack.pairs.index((j, k))
        net = ClubNet(self.dim, hidden=self.hidden, logvar_bound=self.logvar_bound)
        with torch.no_grad():
            for head, seq in (("mu", net.mu_net), ("logvar", net.logvar_net)):
                seq[0].weight.copy_(getattr(stack, f"{head}_w1")[p].t())
                seq[0].bias.copy_(getattr(stack, f"{head}_b1")[p, 0])
                seq[2].weight.copy_(getattr(stack, f"{head}_w2")[p].t())
                seq[2].bias.copy_(getattr(stack, f"{head}_b2")[p, 0])
        return net
