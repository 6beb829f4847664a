"""
Pseudo-domain labeling
GAP embeddings of a frozen backbone snapshot, K chosen by mean silhouette,
K-means centers and nearest-center labels for every split
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.autodiff import CdiraError, ShapeError
from src.config import ClusterConfig

logger = logging.getLogger(__name__)

GROUPS = ("large", "middle", "small")


class ClusteringError(CdiraError, ValueError):
    """Clustering preconditions not met"""


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia_history: List[float]
    n_iter: int

    def __iter__(self):
        # unpacks as (centers, assignments)
        return iter((self.centers, self.assignments))

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


@dataclass
class ClusterModel:
    """K* centroids plus the silhouette diagnostics that chose them"""
    k_star: int
    centers: np.ndarray
    silhouette_by_k: Dict[int, float]
    seed: int
    sizes: List[int] = field(default_factory=list)

    def groups(self) -> Dict[str, List[int]]:
        return tercile_groups(self.sizes)

    def to_dict(self) -> Dict:
        return {
            "k_star": self.k_star,
            "silhouette_by_k": {str(k): v for k, v in sorted(self.silhouette_by_k.items())},
            "seed": self.seed,
            "sizes": list(self.sizes),
            "groups": self.groups() if self.sizes else {},
        }


def embed_dataset(images, model, batch_size: int = 128) -> np.ndarray:
    """One GAP feature row per image, from the model's current (frozen) parameters"""
    images = np.asarray(images)
    if len(images) == 0:
        raise ClusteringError("cannot embed an empty dataset")
    return model.embed(images, batch_size=batch_size)


def _sq_dists(z: np.ndarray, centers: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Squared Euclidean distances (N, K) from explicit differences, float64"""
    out = np.empty((z.shape[0], centers.shape[0]), dtype=np.float64)
    for start in range(0, z.shape[0], chunk):
        diff = z[start:start + chunk, None, :] - centers[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(z, z[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a chosen center
            remaining = np.setdiff1d(np.arange(n), chosen)
            pick = int(rng.choice(remaining))
        else:
            pick = int(rng.choice(n, p=closest / total))
        chosen.append(pick)
        closest = np.minimum(closest, _sq_dists(z, z[pick:pick + 1]).ravel())
    return z[chosen].copy()


def kmeans(z, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding

    Args:
        z: (N, D) embeddings
        k: number of clusters, 1 <= k <= N
        seed: seeding RNG seed
        max_iter: Lloyd iteration cap
        tol: stop once every center moves less than this

    Returns:
        KMeansResult; assignments are the nearest-center labels of the returned centers
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ShapeError(f"kmeans expects a non-empty (N, D) matrix, got {z.shape}")
    n = z.shape[0]
    if k < 1 or k > n:
        raise ClusteringError(f"K must lie in [1, {n}], got {k}")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(z, k, rng)
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dists = _sq_dists(z, centers)
        assignments = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), assignments].sum()))

        new_centers = centers.copy()
        counts = np.bincount(assignments, minlength=k)
        for c in range(k):
            if counts[c]:
                new_centers[c] = z[assignments == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed each empty cluster from the point farthest from its center
            point_cost = dists[np.arange(n), assignments]
            for c in empty:
                far = int(point_cost.argmax())
                new_centers[c] = z[far]
                point_cost[far] = -1.0
            logger.debug("kmeans k=%d iter %d repaired %d empty clusters", k, n_iter, empty.size)

        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol and not empty.size:
            break

    dists = _sq_dists(z, centers)
    assignments = dists.argmin(axis=1)
    history.append(float(dists[np.arange(n), assignments].sum()))
    return KMeansResult(centers=centers, assignments=assignments, inertia_history=history, n_iter=n_iter)


def silhouette_samples(z, assignments, chunk: int = 1024) -> np.ndarray:
    """Per-point silhouette s(i); members of singleton clusters score 0"""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(assignments).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} assignments for {z.shape[0]} points")
    uniq, inverse = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise ClusteringError("silhouette needs at least 2 clusters")
    counts = np.bincount(inverse).astype(np.float64)
    onehot = np.zeros((z.shape[0], uniq.size), dtype=np.float64)
    onehot[np.arange(z.shape[0]), inverse] = 1.0

    scores = np.zeros(z.shape[0], dtype=np.float64)
    for start in range(0, z.shape[0], chunk):
        block = z[start:start + chunk]
        dist = np.sqrt(np.maximum(_sq_dists(block, z), 0.0))
        sums = dist @ onehot
        own = inverse[start:start + chunk]
        rows = np.arange(block.shape[0])
        own_size = counts[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        mean_other = sums / counts
        mean_other[rows, own] = np.inf
        b = mean_other.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[start:start + chunk] = np.where(own_size > 1, s, 0.0)
    return scores


def silhouette(z, assignments) -> float:
    """Mean silhouette over all points"""
    return float(silhouette_samples(z, assignments).mean())


def _canonical(z: np.ndarray, ids: Optional[Sequence]) -> np.ndarray:
    if ids is None:
        return z
    if len(ids) != z.shape[0]:
        raise ShapeError(f"{len(ids)} ids for {z.shape[0]} rows")
    return z[np.argsort(np.asarray(ids), kind="stable")]


def score_candidates(
    z,
    candidates: Iterable[int],
    sample_size: int = 5000,
    seed: int = 0,
    ids: Optional[Sequence] = None,
    max_iter: int = 100,
    tol: float = 1e-4
) -> Dict[int, float]:
    """Mean silhouette for every valid candidate K on one shared subsample"""
    z = _canonical(np.asarray(z, dtype=np.float64), ids)
    candidates = sorted(set(int(k) for k in candidates))
    if not candidates:
        raise ClusteringError("candidate set is empty")
    if z.shape[0] > sample_size:
        rng = np.random.default_rng(seed)
        z = z[np.sort(rng.choice(z.shape[0], size=sample_size, replace=False))]

    scores: Dict[int, float] = {}
    for k in candidates:
        if k < 2 or k > z.shape[0]:
            logger.warning("skipping K=%d: needs 2 <= K <= %d", k, z.shape[0])
            continue
        result = kmeans(z, k, seed=seed, max_iter=max_iter, tol=tol)
        if np.unique(result.assignments).size < 2:
            logger.warning("skipping K=%d: clustering collapsed to a single cluster", k)
            continue
        scores[k] = silhouette(z, result.assignments)
        logger.info("K=%d mean silhouette %.4f", k, scores[k])
    if not scores:
        raise ClusteringError(f"no valid candidate among {candidates} for {z.shape[0]} sampled points")
    return scores


def best_k(scores: Dict[int, float]) -> int:
    """Argmax of the silhouette map; the smaller K wins ties"""
    k_star, best = None, -np.inf
    for k in sorted(scores):
        if scores[k] > best:
            k_star, best = k, scores[k]
    return k_star


def select_k(
    z,
    candidates: Iterable[int],
    sample_size: int = 5000,
    seed: int = 0,
    ids: Optional[Sequence] = None
) -> int:
    return best_k(score_candidates(z, candidates, sample_size=sample_size, seed=seed, ids=ids))


def assign_domains(z, model: ClusterModel) -> np.ndarray:
    """Nearest center per row; the lowest index wins ties"""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(model.centers, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != centers.shape[1]:
        raise ShapeError(f"embeddings {z.shape} do not match centers {centers.shape}")
    return _sq_dists(z, centers).argmin(axis=1)


def tercile_groups(sizes: Sequence[int]) -> Dict[str, List[int]]:
    """Split cluster ids into large / middle / small thirds by sample count"""
    order = sorted(range(len(sizes)), key=lambda c: (-sizes[c], c))
    return {name: [int(c) for c in part] for name, part in zip(GROUPS, np.array_split(np.array(order, dtype=int), 3))}


class PseudoDomainLabeler:
    """Chooses K*, fits centers on the training embeddings and labels every split"""

    def __init__(self, config: ClusterConfig):
        """
        Args:
            config: candidate K set, silhouette subsample size, Lloyd settings and seed
        """
        self.config = config

    def fit(self, z_train, ids: Optional[Sequence] = None) -> ClusterModel:
        cfg = self.config
        print("\n" + "=" * 60)
        print("PSEUDO-DOMAIN CLUSTERING")
        print("=" * 60)
        scores = score_candidates(
            z_train, cfg.candidates, sample_size=cfg.sample_size, seed=cfg.seed, ids=ids,
            max_iter=cfg.max_iter, tol=cfg.tol
        )
        k_star = best_k(scores)
        z = _canonical(np.asarray(z_train, dtype=np.float64), ids)
        result = kmeans(z, k_star, seed=cfg.seed, max_iter=cfg.max_iter, tol=cfg.tol)
        # centers are kept at checkpoint precision so reloaded models label identically
        model = ClusterModel(
            k_star=k_star,
            centers=result.centers.astype(np.float32),
            silhouette_by_k=scores,
            seed=cfg.seed
        )
        labels = assign_domains(z_train, model)
        model.sizes = np.bincount(labels, minlength=k_star).astype(int).tolist()
        self._print_summary(model)
        return model

    def _print_summary(self, model: ClusterModel):
        for k, score in sorted(model.silhouette_by_k.items()):
            marker = "✓" if k == model.k_star else " "
            print(f"  {marker} K={k:>3}  silhouette {score:.4f}")
        print(f"\nSelected K* = {model.k_star}")
        empty = [c for c, size in enumerate(model.sizes) if size == 0]
        if empty:
            print(f"  ⚠ clusters without training samples: {empty}")
        groups = model.groups()
        for name in GROUPS:
            print(f"  {name:>6}: clusters {groups[name]}")

    @staticmethod
    def label_frame(sample_ids: Sequence, splits: Sequence[str], labels: Sequence[int]) -> pd.DataFrame:
        return pd.DataFrame({"sample_id": list(sample_ids), "split": list(splits), "domain_label": [int(v) for v in labels]})
