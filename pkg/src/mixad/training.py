"""Training: total objective, optimizer, train loop, checkpoints.

The engine holds one router over the concatenated expert list (patch
experts first, then component, then global) plus the three expert groups.
Per step: assemble a normal-only batch, corrupt the patch-expert input
once, run every expert (inactive ones too, for the auxiliary terms),
update the repulsion nets on detached representations, then take one
optimizer step on

    sum_selected gate_j * rec_loss_j
    + balance_weight * balance_loss(full logits)
    + repulsion_weight * repulsion_loss(all experts)

Checkpoint format: magic b"AMOC", u16 version, u32 meta length, JSON
metadata (config, iteration, rng stream state, centroids at full
precision, score statistics, tensor manifest), float32-LE tensor payload,
trailing CRC32 over everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .bundles import LABEL_NORMAL, DatasetManifest, FeatureBundle, fuse_target, read_bundle
from .components import ComponentKB, assign_masks, masked_avg_pool
from .experts import (
    ComponentExpert,
    CorruptionConfig,
    GlobalExpert,
    PatchExpert,
    component_scores,
    corrupt,
    cosine_distance_rows,
    global_score,
    patch_score,
)
from .repulsion import RepulsionBank
from .router import (
    BatchRoutingStats,
    balance_loss,
    default_capacity,
    gates_from_logits,
    group_constrained_gates,
    routing_stats,
)

GROUPS = ("patch", "component", "global")

CKPT_MAGIC = b"AMOC"
CKPT_VERSION = 1


class TrainingError(Exception):
    pass


class NonFiniteLossError(TrainingError):
    pass


class CheckpointError(Exception):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 50_000
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 1e-4
    balance_weight: float = 0.01
    repulsion_weight: float = 1e-4
    seed: int = 0
    optimizer: str = "stable-adamw"  # or "adamw"
    n_patch_experts: int = 6
    n_component_experts: int = 6
    n_global_experts: int = 6
    top_k: int = 3
    group_constrained: bool = True
    freeze_gates: bool = True
    patch_depth: int = 2
    component_bottleneck: int = 0  # 0 = dim // 8
    global_bottleneck_channels: int = 0  # 0 = dim // 4
    global_code_dim: int = 0  # 0 = dim
    noise_std: float = 0.1
    dropout_p: float = 0.2
    kb_clusters: int = 8
    capacity_factor: float = 1.25
    w_importance: float = 1.0
    w_load: float = 1.0
    w_z: float = 1.0
    club_hidden: int = 64
    club_lr: float = 1e-3

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive (use 0 iterations to freeze instead)")
        for name in ("balance_weight", "repulsion_weight", "w_importance", "w_load", "w_z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_experts < 1:
            raise ValueError("need at least one expert")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if self.group_constrained and self.top_k != len(self.nonempty_groups):
            raise ValueError("group-constrained routing needs top_k == number of nonempty groups")

    @property
    def n_experts(self) -> int:
        return self.n_patch_experts + self.n_component_experts + self.n_global_experts

    @property
    def nonempty_groups(self) -> list[str]:
        return [g for g, n in zip(GROUPS, (self.n_patch_experts, self.n_component_experts,
                                           self.n_global_experts)) if n > 0]

    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(noise_std=self.noise_std, dropout_p=self.dropout_p)


class StableAdamW(torch.optim.Optimizer):
    """AdamW with each tensor's update clipped to unit RMS.

    The raw Adam update u = m_hat / (sqrt(v_hat) + eps) is divided by
    max(1, rms(u)) before the learning rate is applied; weight decay is
    decoupled. Keeps early steps bounded without a warmup schedule.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            b1, b2 = group["betas"]
            params = [p for p in group["params"] if p.grad is not None]
            if not params:
                continue
            grads, ms, vs, steps = [], [], [], []
            for p in params:
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                grads.append(p.grad)
                ms.append(state["exp_avg"])
                vs.append(state["exp_avg_sq"])
                steps.append(state["step"])
            torch._foreach_mul_(ms, b1)
            torch._foreach_add_(ms, grads, alpha=1 - b1)
            torch._foreach_mul_(vs, b2)
            torch._foreach_addcmul_(vs, grads, grads, value=1 - b2)
            m_hat = torch._foreach_div(ms, [1 - b1**t for t in steps])
            denom = torch._foreach_div(vs, [1 - b2**t for t in steps])
            torch._foreach_sqrt_(denom)
            torch._foreach_add_(denom, group["eps"])
            updates = torch._foreach_div(m_hat, denom)
            norms = torch.stack(torch._foreach_norm(updates))
            numels = torch.tensor([float(u.numel()) for u in updates])
            scales = (norms / numels.sqrt()).clamp(min=1.0).tolist()
            torch._foreach_div_(updates, scales)
            if group["weight_decay"]:
                torch._foreach_mul_(params, 1 - group["lr"] * group["weight_decay"])
            torch._foreach_add_(params, updates, alpha=-group["lr"])
        return loss


def build_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "stable-adamw":
        return StableAdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# engine

class Engine(nn.Module):
    """Router plus the three expert groups over a fixed feature geometry."""

    def __init__(self, cfg: TrainConfig, dim: int, grid_h: int, grid_w: int,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dim, self.grid_h, self.grid_w = dim, grid_h, grid_w
        # experts keep torch's default inits, made reproducible by forking
        # the global RNG for the construction only
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.router_weight = nn.Parameter(torch.randn(cfg.n_experts, dim) * 0.02)
            self.patch_experts = nn.ModuleList(
                PatchExpert(dim, depth=cfg.patch_depth) for _ in range(cfg.n_patch_experts)
            )
            self.component_experts = nn.ModuleList(
                ComponentExpert(dim, bottleneck=cfg.component_bottleneck or None)
                for _ in range(cfg.n_component_experts)
            )
            self.global_experts = nn.ModuleList(
                GlobalExpert(
                    dim, grid_h, grid_w,
                    bottleneck_channels=cfg.global_bottleneck_channels or None,
                    code_dim=cfg.global_code_dim or None,
                )
                for _ in range(cfg.n_global_experts)
            )
        self.to(dtype)

    @property
    def group_slices(self) -> dict[str, tuple[int, int]]:
        np_, nc = self.cfg.n_patch_experts, self.cfg.n_component_experts
        ng = self.cfg.n_global_experts
        return {
            "patch": (0, np_),
            "component": (np_, np_ + nc),
            "global": (np_ + nc, np_ + nc + ng),
        }

    def logits(self, cls: torch.Tensor) -> torch.Tensor:
        return cls @ self.router_weight.t()

    def gates(self, cls: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.logits(cls)
        if self.cfg.group_constrained:
            slices = [self.group_slices[g] for g in GROUPS]
            gates, idx = group_constrained_gates(logits, slices)
        else:
            gates, idx = gates_from_logits(logits, self.cfg.top_k)
        return gates, idx

    def group_gate_mass(self, gates: torch.Tensor) -> dict[str, torch.Tensor]:
        return {
            g: gates[..., s:e].sum(dim=-1) for g, (s, e) in self.group_slices.items()
        }


@dataclass
class Batch:
    targets: torch.Tensor  # (B, N, D)
    cls: torch.Tensor  # (B, D)
    class_ids: list[str]
    labels: list[str]
    # per-sample pooled component data (precomputed from the KB)
    comp_ids: list[list[int]]
    comp_embeddings: list[torch.Tensor]  # (K_i, D) each

    @property
    def size(self) -> int:
        return self.targets.shape[0]


def _grid(targets: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    b, _, d = targets.shape
    return targets.reshape(b, grid_h, grid_w, d).permute(0, 3, 1, 2)


def forward_all_experts(
    model: Engine, batch: Batch, patch_input: torch.Tensor
) -> tuple[torch.Tensor, dict[str, list[torch.Tensor]]]:
    """Per-expert per-sample reconstruction losses plus repulsion reps.

    Returns (loss matrix (B, n_experts), reps), where reps[g][j] is the
    (B, D) pooled output representation of expert j in group g. Every
    expert runs so the auxiliary losses reach inactive ones too.
    """
    b = batch.size
    dtype = batch.targets.dtype
    cols: list[torch.Tensor] = []
    reps: dict[str, list[torch.Tensor]] = {g: [] for g in GROUPS}

    for expert in model.patch_experts:
        rec = expert(patch_input)
        cols.append(cosine_distance_rows(batch.targets, rec).mean(dim=-1))
        reps["patch"].append(rec.mean(dim=1))

    if model.component_experts:
        flat = torch.cat(batch.comp_embeddings, dim=0) if b else torch.zeros(0, model.dim)
        sizes = [e.shape[0] for e in batch.comp_embeddings]
        for expert in model.component_experts:
            rec = expert(flat)
            dist = cosine_distance_rows(flat, rec)
            per_sample, rep_rows, off = [], [], 0
            for n in sizes:
                per_sample.append(dist[off : off + n].mean())
                rep_rows.append(rec[off : off + n].mean(dim=0))
                off += n
            cols.append(torch.stack(per_sample))
            reps["component"].append(torch.stack(rep_rows))

    if model.global_experts:
        grid = _grid(batch.targets, model.grid_h, model.grid_w)
        for expert in model.global_experts:
            rec = expert(grid)
            cols.append(((grid - rec) ** 2).mean(dim=(1, 2, 3)))
            reps["global"].append(rec.mean(dim=(2, 3)))

    return torch.stack(cols, dim=1).to(dtype), reps


@dataclass
class LossBreakdown:
    total: torch.Tensor
    reconstruction: torch.Tensor
    balance_importance: torch.Tensor
    balance_load: torch.Tensor
    balance_z: torch.Tensor
    repulsion: torch.Tensor
    stats: BatchRoutingStats
    gates: torch.Tensor


def _compose_loss(
    model: Engine,
    bank: RepulsionBank,
    batch: Batch,
    losses: torch.Tensor,
    reps: dict[str, list[torch.Tensor]],
    logits: torch.Tensor,
    gates: torch.Tensor,
    idx: torch.Tensor,
    perm: torch.Tensor,
) -> LossBreakdown:
    cfg = model.cfg
    gate_term = gates.detach() if cfg.freeze_gates else gates
    reconstruction = (gate_term * losses).sum(dim=1).mean()

    capacity = default_capacity(batch.size, idx.shape[1], cfg.n_experts, cfg.capacity_factor)
    stats = routing_stats(gates, idx, cfg.n_experts, capacity)
    bal = balance_loss(
        logits,
        torch.as_tensor(stats.counts),
        capacity,
        w_importance=cfg.w_importance,
        w_load=cfg.w_load,
        w_z=cfg.w_z,
    )
    repulsion = bank.repulsion_loss(reps, perm)

    total = (
        reconstruction
        + cfg.balance_weight * bal.total
        + cfg.repulsion_weight * repulsion
    )
    return LossBreakdown(
        total=total,
        reconstruction=reconstruction,
        balance_importance=bal.importance,
        balance_load=bal.load,
        balance_z=bal.z,
        repulsion=repulsion,
        stats=stats,
        gates=gates,
    )


def total_loss(
    model: Engine,
    bank: RepulsionBank,
    batch: Batch,
    patch_input: torch.Tensor,
    perm: torch.Tensor,
) -> LossBreakdown:
    """Weighted reconstruction over the selected experts plus both auxiliaries.

    `patch_input` is the (already corrupted, where applicable) patch-expert
    input; `perm` supplies the step's repulsion negatives. Deterministic
    given those, so the same call is finite-difference checkable.
    """
    cfg = model.cfg
    for label in batch.labels:
        if label != LABEL_NORMAL:
            raise TrainingError("anomalous sample in a training batch")

    logits = model.logits(batch.cls)
    if cfg.group_constrained:
        gates, idx = group_constrained_gates(logits, [model.group_slices[g] for g in GROUPS])
    else:
        gates, idx = gates_from_logits(logits, cfg.top_k)

    losses, reps = forward_all_experts(model, batch, patch_input)
    return _compose_loss(model, bank, batch, losses, reps, logits, gates, idx, perm)


# ---------------------------------------------------------------------------
# data plumbing

@dataclass
class Sample:
    target: torch.Tensor  # (N, D)
    cls: torch.Tensor  # (D,)
    class_id: str
    label: str
    comp_ids: list[int] = field(default_factory=list)
    comp_embeddings: torch.Tensor | None = None  # (K_i, D)


def load_training_samples(root: str | Path, manifest: DatasetManifest) -> list[Sample]:
    samples = []
    for class_id in sorted(manifest.classes):
        for path in manifest.bundle_paths(root, class_id, "train"):
            b = read_bundle(path)
            if b.label != LABEL_NORMAL:
                raise TrainingError(f"{path}: anomalous sample in a training split")
            target = fuse_target(b)
            samples.append(
                Sample(
                    target=torch.from_numpy(target),
                    cls=torch.from_numpy(b.cls_embedding.copy()),
                    class_id=class_id,
                    label=b.label,
                )
            )
    if not samples:
        raise TrainingError("empty training manifest")
    return samples


def fit_component_kb(samples: list[Sample], clusters: int, seed: int) -> ComponentKB:
    kb = ComponentKB(clusters_per_class=clusters)
    by_class: dict[str, list[np.ndarray]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s.target.numpy())
    for class_id in sorted(by_class):
        pts = np.concatenate(by_class[class_id], axis=0)
        kb.fit_class(class_id, pts, seed=seed)
    return kb


def attach_components(samples: list[Sample], kb: ComponentKB, grid_h: int, grid_w: int) -> None:
    for s in samples:
        masks = assign_masks(s.target.numpy(), kb, s.class_id, grid_h, grid_w)
        pooled = masked_avg_pool(s.target.numpy(), masks)
        s.comp_ids = sorted(pooled)
        s.comp_embeddings = torch.from_numpy(
            np.stack([pooled[k] for k in s.comp_ids]).astype(np.float32)
        )


def make_batch(samples: list[Sample], indices: list[int]) -> Batch:
    chosen = [samples[i] for i in indices]
    return Batch(
        targets=torch.stack([s.target for s in chosen]),
        cls=torch.stack([s.cls for s in chosen]),
        class_ids=[s.class_id for s in chosen],
        labels=[s.label for s in chosen],
        comp_ids=[s.comp_ids for s in chosen],
        comp_embeddings=[s.comp_embeddings for s in chosen],
    )


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    def __init__(self, root: str | Path, manifest: DatasetManifest, cfg: TrainConfig,
                 kb: ComponentKB | None = None):
        cfg.validate()
        self.cfg = cfg
        self.root = Path(root)
        self.samples = load_training_samples(root, manifest)
        first = read_bundle(self.root / manifest.classes[sorted(manifest.classes)[0]]["train"][0].path)
        self.grid_h, self.grid_w = first.grid_h, first.grid_w
        self.dim = first.dim
        self.kb = kb or fit_component_kb(self.samples, cfg.kb_clusters, cfg.seed)
        attach_components(self.samples, self.kb, self.grid_h, self.grid_w)
        self.model = Engine(cfg, self.dim, self.grid_h, self.grid_w)
        self.bank = RepulsionBank(
            {
                "patch": cfg.n_patch_experts,
                "component": cfg.n_component_experts,
                "global": cfg.n_global_experts,
            },
            dim=self.dim,
            hidden=cfg.club_hidden,
            lr=cfg.club_lr,
            seed=cfg.seed,
        )
        self.optimizer = build_optimizer(cfg, self.model.parameters())
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.metrics: list[dict] = []
        self.score_stats: dict = {}

    def _sample_indices(self) -> list[int]:
        idx = torch.randint(len(self.samples), (self.cfg.batch_size,), generator=self.gen)
        return idx.tolist()

    def step(self) -> dict:
        batch = make_batch(self.samples, self._sample_indices())
        for label in batch.labels:
            if label != LABEL_NORMAL:
                raise TrainingError("anomalous sample in a training batch")
        patch_input = (
            corrupt(batch.targets, self.cfg.corruption(), self.gen)
            if self.model.patch_experts
            else batch.targets
        )
        perm = torch.randperm(batch.size, generator=self.gen)

        # one forward serves everything: the repulsion nets train on the
        # detached representations, then the frozen-net estimates join the loss
        if self.cfg.group_constrained:
            logits = self.model.logits(batch.cls)
            gates, idx = group_constrained_gates(
                logits, [self.model.group_slices[g] for g in GROUPS]
            )
        else:
            logits = self.model.logits(batch.cls)
            gates, idx = gates_from_logits(logits, self.cfg.top_k)
        losses, reps = forward_all_experts(self.model, batch, patch_input)
        club_loglik = self.bank.update_all(
            {g: [r.detach() for r in rs] for g, rs in reps.items()}
        )
        breakdown = _compose_loss(
            self.model, self.bank, batch, losses, reps, logits, gates, idx, perm
        )
        if not torch.isfinite(breakdown.total):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {self.iteration}: "
                f"rec={float(breakdown.reconstruction)} "
                f"imp={float(breakdown.balance_importance)} load={float(breakdown.balance_load)} "
                f"z={float(breakdown.balance_z)} rep={float(breakdown.repulsion)}"
            )
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        self.iteration += 1

        gate_mass = {
            g: float(v.detach().mean()) for g, v in self.model.group_gate_mass(breakdown.gates).items()
        }
        metrics = {
            "iteration": self.iteration,
            "total": float(breakdown.total.detach()),
            "reconstruction": float(breakdown.reconstruction.detach()),
            "balance_importance": float(breakdown.balance_importance.detach()),
            "balance_load": float(breakdown.balance_load.detach()),
            "balance_z": float(breakdown.balance_z.detach()),
            "repulsion": float(breakdown.repulsion.detach()),
            "club_loglik": club_loglik,
            "gate_mass": gate_mass,
            "importance": breakdown.stats.importance.tolist(),
            "counts": breakdown.stats.counts.tolist(),
        }
        self.metrics.append(metrics)
        return metrics

    def run(self, iterations: int | None = None, log_every: int = 0) -> list[dict]:
        n = self.cfg.iterations if iterations is None else iterations
        for _ in range(n):
            m = self.step()
            if log_every and m["iteration"] % log_every == 0:
                print(
                    f"iter {m['iteration']:6d}  total {m['total']:.4f}  "
                    f"rec {m['reconstruction']:.4f}  gate "
                    + "/".join(f"{m['gate_mass'][g]:.2f}" for g in GROUPS)
                )
        return self.metrics

    def compute_score_stats(self) -> dict:
        """Per class and group: mean/std of map values on training normals."""
        acc: dict[str, dict[str, list[np.ndarray]]] = {}
        for s in self.samples:
            parts, _, _ = score_maps(self.model, self.kb, s.target, s.cls, s.class_id)
            for g, m in parts.items():
                acc.setdefault(s.class_id, {}).setdefault(g, []).append(m)
        stats: dict[str, dict[str, dict[str, float]]] = {}
        for class_id, groups in acc.items():
            stats[class_id] = {}
            for g, maps in groups.items():
                vals = np.concatenate([m.ravel() for m in maps])
                stats[class_id][g] = {
                    "mean": float(vals.mean()),
                    "std": float(vals.std()),
                    "n_maps": len(maps),
                }
        self.score_stats = stats
        return stats


# ---------------------------------------------------------------------------
# inference-side score maps

def score_maps(
    model: Engine,
    kb: ComponentKB,
    target: torch.Tensor,
    cls: torch.Tensor,
    class_id: str,
    corruption: CorruptionConfig | None = None,
    generator: torch.Generator | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, float], np.ndarray]:
    """Per-group score maps for one sample.

    Returns (maps, gate mass per present group, gates). Within a group the
    selected experts' maps are combined weighted by their gates. Groups
    with no selected expert are absent from the result.
    """
    cfg = model.cfg
    with torch.no_grad():
        gates, idx = model.gates(cls.unsqueeze(0))
        gates, idx = gates[0], idx[0]
        gh, gw = model.grid_h, model.grid_w

        patch_input = target
        if corruption is not None and corruption.enabled_at_inference:
            patch_input = corrupt(target, corruption, generator)

        comp_cache: dict[str, object] = {}
        maps: dict[str, np.ndarray] = {}
        mass: dict[str, float] = {}
        for g, (start, stop) in model.group_slices.items():
            sel = [int(j) for j in idx.tolist() if start <= j < stop]
            if not sel:
                continue
            weights = np.array([float(gates[j]) for j in sel])
            weights = weights / weights.sum()
            acc = np.zeros((gh, gw))
            for w, j in zip(weights, sel):
                local = j - start
                if g == "patch":
                    rec = model.patch_experts[local](patch_input)
                    m = patch_score(target, rec, gh, gw).numpy()
                elif g == "component":
                    if not comp_cache:
                        masks = assign_masks(target.numpy(), kb, class_id, gh, gw)
                        pooled = masked_avg_pool(target.numpy(), masks)
                        ids = sorted(pooled)
                        emb = torch.from_numpy(
                            np.stack([pooled[k] for k in ids]).astype(np.float32)
                        ).to(target.dtype)
                        comp_cache.update(masks=masks, ids=ids, emb=emb)
                    emb = comp_cache["emb"]
                    rec = model.component_experts[local](emb)
                    per_comp = component_scores(emb, rec).numpy()
                    lut = dict(zip(comp_cache["ids"], per_comp))
                    from .components import scatter_component_scores

                    m = scatter_component_scores(lut, comp_cache["masks"])
                else:
                    grid = _grid(target.unsqueeze(0), gh, gw)
                    rec = model.global_experts[local](grid)
                    m = global_score(grid, rec)[0].numpy()
                acc = acc + w * m
            maps[g] = acc
            mass[g] = float(sum(float(gates[j]) for j in sel))
    return maps, mass, gates.numpy()


# ---------------------------------------------------------------------------
# checkpoints

def _named_tensors(trainer: Trainer) -> list[tuple[str, torch.Tensor]]:
    out: list[tuple[str, torch.Tensor]] = []
    for name, t in trainer.model.state_dict().items():
        out.append((f"model/{name}", t))
    for name, t in trainer.bank.state_dict().items():
        out.append((f"bank/{name}", t))
    for i, p in enumerate(trainer.model.parameters()):
        st = trainer.optimizer.state.get(p)
        if st:
            out.append((f"opt/{i}/exp_avg", st["exp_avg"]))
            out.append((f"opt/{i}/exp_avg_sq", st["exp_avg_sq"]))
    if trainer.bank.opt is not None:
        for i, p in enumerate(trainer.bank.parameters()):
            st = trainer.bank.opt.state.get(p)
            if st:
                out.append((f"clubopt/{i}/exp_avg", st["exp_avg"]))
                out.append((f"clubopt/{i}/exp_avg_sq", st["exp_avg_sq"]))
    return out


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    tensors = _named_tensors(trainer)
    manifest = []
    offset = 0
    blobs = []
    for name, t in tensors:
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    opt_steps = {}
    for i, p in enumerate(trainer.model.parameters()):
        st = trainer.optimizer.state.get(p)
        if st:
            opt_steps[str(i)] = int(st["step"])
    club_steps = {}
    if trainer.bank.opt is not None:
        for i, p in enumerate(trainer.bank.parameters()):
            st = trainer.bank.opt.state.get(p)
            if st:
                step = st["step"]
                club_steps[str(i)] = int(step.item()) if torch.is_tensor(step) else int(step)

    meta = {
        "version": CKPT_VERSION,
        "config": asdict(trainer.cfg),
        "iteration": trainer.iteration,
        "dim": trainer.dim,
        "grid_h": trainer.grid_h,
        "grid_w": trainer.grid_w,
        "rng_state": trainer.gen.get_state().numpy().tobytes().hex(),
        "kb": {
            "clusters_per_class": trainer.kb.clusters_per_class,
            "fit_stats": trainer.kb.fit_stats,
            "centroids": {c: m.tolist() for c, m in trainer.kb.centroids.items()},
        },
        "score_stats": trainer.score_stats,
        "opt_steps": opt_steps,
        "club_opt_steps": club_steps,
        "tensors": manifest,
    }
    mbytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def read_checkpoint_raw(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 14:
        raise CheckpointError(f"{path}: too short")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC mismatch")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
    meta = json.loads(data[10 : 10 + mlen].decode("utf-8"))
    payload = body[10 + mlen :]
    tensors = {}
    for ent in meta["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        if start + count * 4 > len(payload):
            raise ShapeMismatchError(
                f"{path}: tensor {ent['name']} shape {shape} overruns the payload"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[ent["name"]] = arr.copy()
    return meta, tensors


def load_checkpoint(path: str | Path, root: str | Path, manifest: DatasetManifest) -> Trainer:
    """Rebuild a trainer mid-run; the next step matches an uninterrupted run."""
    meta, tensors = read_checkpoint_raw(path)
    cfg = TrainConfig(**meta["config"])
    kb = ComponentKB(clusters_per_class=meta["kb"]["clusters_per_class"])
    for c, rows in meta["kb"]["centroids"].items():
        kb.centroids[c] = np.asarray(rows, dtype=np.float64)
    kb.fit_stats = meta["kb"]["fit_stats"]

    first_class = sorted(manifest.classes)[0]
    first = read_bundle(Path(root) / manifest.classes[first_class]["train"][0].path)
    if first.dim != meta["dim"] or (first.grid_h, first.grid_w) != (meta["grid_h"], meta["grid_w"]):
        raise ShapeMismatchError(
            f"checkpoint geometry (D={meta['dim']}, {meta['grid_h']}x{meta['grid_w']}) does not "
            f"match the data (D={first.dim}, {first.grid_h}x{first.grid_w})"
        )
    trainer = Trainer(root, manifest, cfg, kb=kb)

    def load_state(module: nn.Module, prefix: str) -> None:
        sd = module.state_dict()
        new = {}
        for name, t in sd.items():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise ShapeMismatchError(f"missing tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(t.shape):
                raise ShapeMismatchError(f"{key}: shape {arr.shape} != {tuple(t.shape)}")
            new[name] = torch.from_numpy(arr.copy()).to(t.dtype)
        module.load_state_dict(new)

    load_state(trainer.model, "model")
    load_state(trainer.bank, "bank")

    for i, p in enumerate(trainer.model.parameters()):
        key = f"opt/{i}/exp_avg"
        if key in tensors:
            st = trainer.optimizer.state[p] = {}
            st["step"] = meta["opt_steps"][str(i)]
            st["exp_avg"] = torch.from_numpy(tensors[key].copy())
            st["exp_avg_sq"] = torch.from_numpy(tensors[f"opt/{i}/exp_avg_sq"].copy())
    if trainer.bank.opt is not None:
        for i, p in enumerate(trainer.bank.parameters()):
            key = f"clubopt/{i}/exp_avg"
            if key in tensors:
                st = trainer.bank.opt.state[p] = {}
                st["step"] = torch.tensor(float(meta["club_opt_steps"][str(i)]))
                st["exp_avg"] = torch.from_numpy(tensors[key].copy())
                st["exp_avg_sq"] = torch.from_numpy(tensors[f"clubopt/{i}/exp_avg_sq"].copy())

    state_bytes = bytes.fromhex(meta["rng_state"])
    trainer.gen.set_state(torch.frombuffer(bytearray(state_bytes), dtype=torch.uint8).clone())
    trainer.iteration = meta["iteration"]
    trainer.score_stats = meta.get("score_stats", {})
    return trainer


def load_engine_for_eval(path: str | Path) -> tuple[TrainConfig, Engine, ComponentKB, dict, dict]:
    """Model + KB + score stats from a checkpoint, no training data needed."""
    meta, tensors = read_checkpoint_raw(path)
    cfg = TrainConfig(**meta["config"])
    model = Engine(cfg, meta["dim"], meta["grid_h"], meta["grid_w"])
    sd = {}
    for name, t in model.state_dict().items():
        key = f"model/{name}"
        if key not in tensors:
            raise ShapeMismatchError(f"missing tensor {key}")
        if tuple(tensors[key].shape) != tuple(t.shape):
            raise ShapeMismatchError(f"{key}: shape {tensors[key].shape} != {tuple(t.shape)}")
        sd[name] = torch.from_numpy(tensors[key].copy()).to(t.dtype)
    model.load_state_dict(sd)
    model.eval()
    kb = ComponentKB(clusters_per_class=meta["kb"]["clusters_per_class"])
    for c, rows in meta["kb"]["centroids"].items():
        kb.centroids[c] = np.asarray(rows, dtype=np.float64)
    kb.fit_stats = meta["kb"]["fit_stats"]
    return cfg, model, kb, meta.get("score_stats", {}), meta
