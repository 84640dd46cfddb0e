"""Score aggregation, AUROC, and dataset evaluation reports.

Aggregation: each present group map is standardized with that class's
training-normal statistics, then combined with weights proportional to the
gate mass of the group's activated experts (renormalized over present
groups). The image score is the mean of the top 1% of aggregated values.
All three knobs (standardization, weighting scheme, image statistic) are
configurable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundles import LABEL_NORMAL, DatasetManifest, fuse_target, read_bundle
from .training import ShapeMismatchError, load_engine_for_eval, score_maps

WEIGHTINGS = ("gate", "uniform", "max")
IMAGE_STATS = ("topq", "max")


class ScoringError(Exception):
    pass


@dataclass
class AggregationConfig:
    normalize: bool = True
    weighting: str = "gate"  # gate | uniform | max
    image_stat: str = "topq"  # topq | max
    top_q: float = 0.01

    def validate(self) -> None:
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.image_stat not in IMAGE_STATS:
            raise ValueError(f"image_stat must be one of {IMAGE_STATS}")
        if not 0 < self.top_q <= 1:
            raise ValueError("top_q must be in (0, 1]")


@dataclass
class AnomalyResult:
    maps: dict[str, np.ndarray]
    gate_mass: dict[str, float]
    gates: np.ndarray
    aggregated: np.ndarray
    image_score: float


def _standardize(m: np.ndarray, stats: dict | None) -> np.ndarray:
    if not stats:
        return m
    std = stats.get("std", 0.0)
    if std <= 0.0:
        return m  # degenerate training statistics exclude the group
    return (m - stats["mean"]) / std


def image_score_from_map(agg: np.ndarray, cfg: AggregationConfig) -> float:
    if cfg.image_stat == "max":
        return float(agg.max())
    k = max(1, math.ceil(cfg.top_q * agg.size))
    top = np.sort(agg.ravel())[-k:]
    return float(top.mean())


def aggregate(
    maps: dict[str, np.ndarray],
    gate_mass: dict[str, float],
    class_stats: dict[str, dict] | None,
    cfg: AggregationConfig | None = None,
) -> tuple[np.ndarray, float]:
    """Combine the present group maps into one map plus an image score."""
    cfg = cfg or AggregationConfig()
    cfg.validate()
    if not maps:
        raise ScoringError("no group maps present")
    normed = {
        g: _standardize(m, (class_stats or {}).get(g)) if cfg.normalize else m
        for g, m in maps.items()
    }
    groups = sorted(normed)
    if cfg.weighting == "max":
        agg = np.max(np.stack([normed[g] for g in groups]), axis=0)
    else:
        if cfg.weighting == "gate":
            w = np.array([max(gate_mass.get(g, 0.0), 0.0) for g in groups])
            if w.sum() <= 0:
                w = np.ones(len(groups))
        else:
            w = np.ones(len(groups))
        w = w / w.sum()
        agg = np.zeros_like(normed[groups[0]])
        for wi, g in zip(w, groups):
            agg = agg + wi * normed[g]
    return agg, image_score_from_map(agg, cfg)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ScoringError("scores and labels must align")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ScoringError("both labels must be present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores: np.ndarray, labels: np.ndarray) -> float:
    """Brute-force pair counting oracle: (pos>neg pairs + half ties) / (P*N)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ScoringError("both labels must be present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


# ---------------------------------------------------------------------------
# dataset evaluation

@dataclass
class EvalReport:
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = []
        header = f"{'class':<14}{'image AUROC':>12}{'pixel AUROC':>12}{'n test':>8}"
        lines.append(header)
        lines.append("-" * len(header))
        for c in sorted(self.data["classes"]):
            row = self.data["classes"][c]
            pix = row.get("pixel_auroc")
            pix_s = f"{pix:.4f}" if pix is not None else "-"
            lines.append(
                f"{c:<14}{row['image_auroc']:>12.4f}{pix_s:>12}{row['n_test']:>8d}"
            )
        mean = self.data["mean"]
        pix = mean.get("pixel_auroc")
        pix_s = f"{pix:.4f}" if pix is not None else "-"
        lines.append("-" * len(header))
        lines.append(f"{'mean':<14}{mean['image_auroc']:>12.4f}{pix_s:>12}{'':>8}")
        if self.data.get("per_tag_image_auroc"):
            lines.append("")
            lines.append("image AUROC per anomaly type (pooled over classes):")
            for tag, v in sorted(self.data["per_tag_image_auroc"].items()):
                lines.append(f"  {tag:<12}{v:.4f}")
        if self.data.get("gate_histogram"):
            lines.append("")
            lines.append("mean gate mass per group:")
            for c in sorted(self.data["gate_histogram"]):
                gh = self.data["gate_histogram"][c]
                lines.append(
                    "  " + f"{c:<12}" + "  ".join(f"{g}={gh.get(g, 0.0):.3f}" for g in sorted(gh))
                )
        return "\n".join(lines) + "\n"


def evaluate(
    root: str | Path,
    manifest: DatasetManifest,
    checkpoint: str | Path,
    agg_cfg: AggregationConfig | None = None,
) -> EvalReport:
    """Deterministic evaluation report over the manifest's test split."""
    agg_cfg = agg_cfg or AggregationConfig()
    cfg, model, kb, stats, meta = load_engine_for_eval(checkpoint)
    root = Path(root)

    classes: dict[str, dict] = {}
    warnings: list[str] = []
    tag_scores: dict[str, list[float]] = {}
    normal_scores_all: list[float] = []
    gate_hist: dict[str, dict[str, list[float]]] = {}

    for class_id in sorted(manifest.classes):
        img_scores, img_labels = [], []
        pix_scores, pix_labels = [], []
        pixel_ok = True
        for entry in manifest.classes[class_id]["test"]:
            b = read_bundle(root / entry.path)
            if b.dim != meta["dim"] or (b.grid_h, b.grid_w) != (meta["grid_h"], meta["grid_w"]):
                raise ShapeMismatchError(
                    f"{entry.path}: bundle geometry (D={b.dim}, {b.grid_h}x{b.grid_w}) does not "
                    f"match the checkpoint (D={meta['dim']}, {meta['grid_h']}x{meta['grid_w']})"
                )
            target = torch.from_numpy(fuse_target(b))
            cls_vec = torch.from_numpy(b.cls_embedding.copy())
            maps, mass, _ = score_maps(model, kb, target, cls_vec, class_id)
            agg, img = aggregate(maps, mass, stats.get(class_id), agg_cfg)
            label = 0 if b.label == LABEL_NORMAL else 1
            img_scores.append(img)
            img_labels.append(label)
            for g in mass:
                gate_hist.setdefault(class_id, {}).setdefault(g, []).append(mass[g])
            if label == 0:
                normal_scores_all.append(img)
                pix_scores.append(agg.ravel())
                pix_labels.append(np.zeros(agg.size, dtype=np.int64))
            else:
                tag = entry.tag or "anomalous"
                tag_scores.setdefault(tag, []).append(img)
                if b.pixel_mask is None:
                    pixel_ok = False
                    warnings.append(f"{entry.path}: anomalous test bundle without a mask")
                else:
                    pix_scores.append(agg.ravel())
                    pix_labels.append((b.pixel_mask.ravel() > 0).astype(np.int64))
        row: dict = {
            "image_auroc": auroc(np.array(img_scores), np.array(img_labels)),
            "n_test": len(img_scores),
        }
        if pixel_ok and pix_scores:
            flat_labels = np.concatenate(pix_labels)
            if flat_labels.any() and not flat_labels.all():
                row["pixel_auroc"] = auroc(np.concatenate(pix_scores), flat_labels)
            else:
                row["pixel_auroc"] = None
                warnings.append(f"{class_id}: pixel metric needs both mask labels")
        else:
            row["pixel_auroc"] = None
        classes[class_id] = row

    per_tag = {}
    for tag, sc in sorted(tag_scores.items()):
        labels = np.array([0] * len(normal_scores_all) + [1] * len(sc))
        per_tag[tag] = auroc(np.array(normal_scores_all + sc), labels)

    image_mean = float(np.mean([c["image_auroc"] for c in classes.values()]))
    pixel_vals = [c["pixel_auroc"] for c in classes.values() if c["pixel_auroc"] is not None]
    report = EvalReport(
        data={
            "classes": classes,
            "mean": {
                "image_auroc": image_mean,
                "pixel_auroc": float(np.mean(pixel_vals)) if pixel_vals else None,
            },
            "per_tag_image_auroc": per_tag,
            "gate_histogram": {
                c: {g: float(np.mean(v)) for g, v in groups.items()}
                for c, groups in gate_hist.items()
            },
            "checkpoint_iteration": meta["iteration"],
            "warnings": sorted(set(warnings)),
        }
    )
    return report


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    """Portable grayscale (P5) dump, min-max scaled to 0..255."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scale = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    img = (scale * 255.0).round().astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
