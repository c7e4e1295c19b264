"""Full-precision point operations: normalisation, FPS, kNN grouping and the
two-stage neighbour embedding that feeds the transformer module.

Nothing in here binarizes; the embedding is always full precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LBR, Module


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if len(self.features) != len(self.points):
                raise ValueError("features must have one row per point")

    def __len__(self):
        return len(self.points)


@dataclass
class GroupedNeighborhood:
    centers: np.ndarray  # M x 3
    center_indices: np.ndarray  # M
    neighbor_indices: np.ndarray  # M x k
    relative_features: np.ndarray  # M x k x 2C


def _coords(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def normalize(pc):
    """Centre on the centroid and scale to unit max radius.

    A cloud with zero extent is only centred.
    """
    pts = _coords(pc)
    centred = pts - pts.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius > 0:
        centred = centred / radius
    if isinstance(pc, PointCloud):
        return PointCloud(centred, pc.features, normalized=True)
    return centred


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sampling(pc, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = _coords(pc)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} centres from {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    diff = pts - pts[seed_index]
    min_d = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d, np.einsum("ij,ij->i", diff, diff), out=min_d)
    return chosen


def knn_indices(pc, center_indices, k: int) -> np.ndarray:
    """k nearest points (Euclidean) to each centre, nearest first.

    A centre always lists itself first; remaining ties go to the lowest index.
    """
    pts = _coords(pc)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} must be in [1, {len(pts)}]")
    d = _sq_dists(pts[center_indices], pts)
    d[np.arange(len(center_indices)), center_indices] = -1.0
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_group(pc, center_indices, k: int, features=None) -> GroupedNeighborhood:
    pts = _coords(pc)
    if features is None:
        features = pc.features if isinstance(pc, PointCloud) and pc.features is not None else pts
    features = np.asarray(features, dtype=np.float64)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    idx = knn_indices(pts, center_indices, k)
    nb = features[idx]
    rel = np.concatenate([nb, nb - features[center_indices][:, None, :]], axis=-1)
    return GroupedNeighborhood(pts[center_indices], center_indices, idx, rel)


# -- neighbour embedding ------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    fraction: float  # centres as a fraction of the input cloud size
    k: int
    width: int


@dataclass(frozen=True)
class EmbedConfig:
    point_widths: tuple[int, ...] = (64, 64)
    stages: tuple[StageConfig, ...] = (StageConfig(0.5, 32, 128), StageConfig(0.25, 32, 256))
    layers_per_stage: int = 1

    @property
    def out_dim(self) -> int:
        return self.stages[-1].width if self.stages else self.point_widths[-1]

    def stage_sizes(self, n_points: int) -> list[tuple[int, int]]:
        """(centres, k) per stage for an input of ``n_points``."""
        sizes, n = [], n_points
        for st in self.stages:
            m = max(1, min(n, int(round(st.fraction * n_points))))
            sizes.append((m, min(st.k, n)))
            n = m
        return sizes

    def to_dict(self) -> dict:
        return {
            "point_widths": list(self.point_widths),
            "stages": [[s.fraction, s.k, s.width] for s in self.stages],
            "layers_per_stage": self.layers_per_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedConfig":
        return cls(
            tuple(int(w) for w in d.get("point_widths", (64, 64))),
            tuple(StageConfig(float(f), int(k), int(w)) for f, k, w in d.get("stages", ())),
            int(d.get("layers_per_stage", 1)),
        )


@dataclass
class StagePlan:
    center_indices: np.ndarray  # M, into the previous level
    neighbor_indices: np.ndarray  # M x k, into the previous level


def plan_sampling(points: np.ndarray, cfg: EmbedConfig, seed_index: int = 0) -> list[StagePlan]:
    """FPS + kNN index plan for every stage; depends only on coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    plans = []
    for m, k in cfg.stage_sizes(len(pts)):
        centers = farthest_point_sampling(pts, m, seed_index)
        plans.append(StagePlan(centers, knn_indices(pts, centers, k)))
        pts = pts[centers]
        seed_index = 0
    return plans


def stack_plans(plans: list[list[StagePlan]]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-stage (B, M) centre and (B, M, k) neighbour index arrays."""
    return [
        (np.stack([p[s].center_indices for p in plans]), np.stack([p[s].neighbor_indices for p in plans]))
        for s in range(len(plans[0]))
    ]


class NeighborEmbedding(Module):
    def __init__(self, cfg: EmbedConfig, rng: np.random.Generator, in_dim: int = 3):
        self.cfg = cfg
        widths = (in_dim,) + tuple(cfg.point_widths)
        self.point_layers = [LBR(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.stage_layers = []
        c = widths[-1]
        for st in cfg.stages:
            dims = [2 * c] + [st.width] * cfg.layers_per_stage
            self.stage_layers.append([LBR(a, b, rng) for a, b in zip(dims[:-1], dims[1:])])
            c = st.width
        # flattened so named_parameters() sees them
        self.stage_modules = [layer for stage in self.stage_layers for layer in stage]

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def __call__(self, points, plans: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
        """points (B, N, 3); plans from :func:`stack_plans` -> (B, M_last, C)."""
        f = ad.as_tensor(points)
        for layer in self.point_layers:
            f = layer(f)
        for layers, (centers, neighbors) in zip(self.stage_layers, plans):
            f = group_and_pool(f, centers, neighbors, layers)
        return f


def group_and_pool(f: Tensor, centers: np.ndarray, neighbors: np.ndarray, layers) -> Tensor:
    """One sample-and-group stage: [f_j, f_j - f_c] -> LBR stack -> max over k."""
    B, M = centers.shape
    nb = ad.gather_rows(f, neighbors)
    ctr = ad.reshape(ad.gather_rows(f, centers), (B, M, 1, f.shape[-1]))
    x = ad.concat([nb, ad.sub(nb, ctr)], axis=-1)
    for layer in layers:
        x = layer(x)
    return ad.maxpool(x, axis=2)
