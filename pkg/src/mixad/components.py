"""Per-class component knowledge base: K-means centroids, masks, pooling.

K-means is Lloyd's algorithm with k-means++ seeding, deterministic under
the given rng seed. Per-iteration inertia is recorded and asserted
non-increasing; emptied clusters are re-seeded to the point farthest from
its assigned centroid (which strictly lowers inertia).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_KB_POINTS = 100_000


class ComponentKBError(Exception):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float64
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(assignment, squared distance to it); ties go to the lowest index."""
    # |x - c|^2 expanded via matmul; clip guards tiny negative round-off
    d2 = (
        (points * points).sum(axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    np.clip(d2, 0.0, None, out=d2)
    assign = d2.argmin(axis=1)  # np.argmin returns the first minimum
    return assign, d2[np.arange(len(points)), assign]


def _plusplus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ComponentKBError("points must be (M, D)")
    m = len(points)
    if m < k:
        raise ComponentKBError(f"{m} points < {k} clusters")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_seed(points, k, rng)

    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        assign, d2 = _nearest(points, centroids)
        inertia = float(d2.sum())
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise AssertionError(
                f"inertia increased: {history[-1]} -> {inertia} at iteration {iterations}"
            )
        history.append(inertia)

        new_centroids = centroids.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new_centroids[j] = points[sel].mean(axis=0)
            else:
                # re-seed to the point farthest from its assigned centroid
                far = int(d2.argmax())
                new_centroids[j] = points[far]
                d2[far] = 0.0
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    assign, d2 = _nearest(points, centroids)
    return KMeansResult(
        centroids=centroids,
        inertia=float(d2.sum()),
        iterations=iterations,
        inertia_history=history,
    )


@dataclass
class ComponentMasks:
    assignment: np.ndarray  # (grid_h, grid_w) int, values in [0, k)
    n_components: int

    def present(self) -> np.ndarray:
        """Sorted component ids that own at least one patch."""
        return np.unique(self.assignment)

    def flat(self) -> np.ndarray:
        return self.assignment.ravel()


@dataclass
class ComponentKB:
    clusters_per_class: int
    centroids: dict[str, np.ndarray] = field(default_factory=dict)  # class -> (k, d)
    fit_stats: dict[str, dict] = field(default_factory=dict)

    def fit_class(self, class_id: str, points: np.ndarray, seed: int) -> None:
        points = np.asarray(points, dtype=np.float64)
        if len(points) > MAX_KB_POINTS:
            rng = np.random.default_rng(seed)
            idx = rng.choice(len(points), size=MAX_KB_POINTS, replace=False)
            points = points[idx]
        res = kmeans_fit(points, self.clusters_per_class, seed=seed)
        self.centroids[class_id] = res.centroids
        self.fit_stats[class_id] = {
            "inertia": res.inertia,
            "iterations": res.iterations,
            "n_points": int(len(points)),
        }

    def classes(self) -> list[str]:
        return sorted(self.centroids)


def assign_masks(features: np.ndarray, kb: ComponentKB, class_id: str,
                 grid_h: int, grid_w: int) -> ComponentMasks:
    """Nearest-centroid assignment of each patch; ties to the lowest index."""
    if class_id not in kb.centroids:
        raise ComponentKBError(f"class {class_id!r} not in the knowledge base")
    features = np.asarray(features, dtype=np.float64)
    centroids = kb.centroids[class_id]
    if features.shape != (grid_h * grid_w, centroids.shape[1]):
        raise ComponentKBError(
            f"features shape {features.shape} != ({grid_h * grid_w}, {centroids.shape[1]})"
        )
    assign, _ = _nearest(features, centroids)
    return ComponentMasks(assignment=assign.reshape(grid_h, grid_w), n_components=len(centroids))


def masked_avg_pool(features: np.ndarray, masks: ComponentMasks) -> dict[int, np.ndarray]:
    """Mean patch embedding per occupied component; empty components omitted."""
    features = np.asarray(features)
    flat = masks.flat()
    if len(flat) != len(features):
        raise ComponentKBError("mask grid does not cover the feature rows")
    return {int(k): features[flat == k].mean(axis=0) for k in masks.present()}


def scatter_component_scores(scores: dict[int, float], masks: ComponentMasks) -> np.ndarray:
    """Grid map where each cell carries its component's score."""
    occupied = masks.present()
    missing = [int(k) for k in occupied if int(k) not in scores]
    if missing:
        raise ComponentKBError(f"missing scores for occupied components {missing}")
    lut = np.zeros(masks.n_components, dtype=np.float64)
    for k, s in scores.items():
        lut[k] = s
    return lut[masks.assignment]
