"""
DBSCAN over foreground pixel coordinates and size-based cluster filtering.

Points are fed in row-major order, so a border point reachable from two
clusters joins the one whose seed core comes first in that order.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.cluster import DBSCAN

NOISE = -1


@dataclass(frozen=True)
class ClusterParams:
    eps: float = 3.0
    min_pts: int = 4
    min_cluster_size: int = 20
    keep_top_k: Optional[int] = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError('eps must be positive')
        if self.min_pts < 1 or self.min_cluster_size < 1:
            raise ValueError('min_pts and min_cluster_size must be at least 1')
        if self.keep_top_k is not None and self.keep_top_k < 1:
            raise ValueError('keep_top_k must be at least 1 when set')


@dataclass(frozen=True)
class ClusterStats:
    cluster_id: int
    size: int
    bbox: tuple

    def to_dict(self):
        return {'cluster_id': self.cluster_id, 'size': self.size, 'bbox': list(self.bbox)}


@dataclass(frozen=True, eq=False)
class RawPrediction:
    prob: np.ndarray

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=np.float32)
        if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
            raise ValueError('probabilities must lie in [0, 1]')
        object.__setattr__(self, 'prob', prob)


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    mask: np.ndarray
    source_frame: str = ''
    cluster_stats: tuple = field(default_factory=tuple)

    @property
    def low_confidence(self):
        return not self.mask.any()

    def to_dict(self):
        return {
            'source_frame': self.source_frame,
            'low_confidence': self.low_confidence,
            'foreground_pixels': int(self.mask.sum()),
            'clusters': [stats.to_dict() for stats in self.cluster_stats],
        }


def dbscan(points, params: ClusterParams):
    """Per-point cluster ids (0, 1, ...) or NOISE; the point itself counts toward min_pts."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    model = DBSCAN(eps=params.eps, min_samples=params.min_pts, metric='euclidean')
    return model.fit(points).labels_.astype(np.int64)


def filter_clusters(prob, threshold, params: ClusterParams, source_frame='') -> PseudoLabel:
    if not 0.0 < threshold < 1.0:
        raise ValueError('threshold must lie in (0, 1)')
    prob = prob.prob if isinstance(prob, RawPrediction) else np.asarray(prob)
    mask = np.zeros(prob.shape, dtype=np.uint8)

    coords = np.argwhere(prob >= threshold)
    if len(coords) == 0:
        return PseudoLabel(mask=mask, source_frame=source_frame)

    labels = dbscan(coords, params)
    cluster_ids, sizes = np.unique(labels[labels != NOISE], return_counts=True)
    kept = [(int(cid), int(size)) for cid, size in zip(cluster_ids, sizes) if size >= params.min_cluster_size]
    kept.sort(key=lambda item: (-item[1], item[0]))
    if params.keep_top_k is not None:
        kept = kept[:params.keep_top_k]

    stats = []
    for cluster_id, size in sorted(kept):
        members = coords[labels == cluster_id]
        mask[members[:, 0], members[:, 1]] = 1
        r0, c0 = members.min(axis=0)
        r1, c1 = members.max(axis=0)
        stats.append(ClusterStats(cluster_id, size, (int(r0), int(c0), int(r1), int(c1))))

    return PseudoLabel(mask=mask, source_frame=source_frame, cluster_stats=tuple(stats))
