"""Post-lift aggregation: cluster lifted features, project cluster labels to
2D, and discard observation masks that disagree with their cluster mask."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .model import InvalidInputError
from .rasterize import WeightMatrix, render_labels
from .solver import FeatureField, ObservationSet


@dataclass(frozen=True)
class ClusterParams:
    """Density clustering parameters.

    eps defaults to the 95th percentile of the distance to the
    min_points-th nearest neighbor, floored at eps_floor to survive
    exactly-coincident feature rows.
    """

    min_points: int = 10
    eps: float | None = None
    eps_percentile: float = 95.0
    eps_floor: float = 1e-6


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-primitive cluster labels; -1 marks noise and unobserved primitives."""

    labels: np.ndarray
    n_clusters: int
    params: ClusterParams

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", lab)
        present = set(int(u) for u in np.unique(lab) if u >= 0)
        if present and present != set(range(self.n_clusters)):
            raise InvalidInputError("cluster labels must be contiguous from 0")


def cluster_features(field: FeatureField, params: ClusterParams | None = None) -> ClusterAssignment:
    """Density-based clustering of unit-normalized feature rows.

    Deterministic given the input order: cores are seeded in ascending index
    order and neighbor lists are visited sorted. Noise points and unobserved
    primitives map to -1.
    """
    params = params or ClusterParams()
    values = field.values
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("features must be finite")
    observed = ~field.unobserved
    norms = np.linalg.norm(values, axis=1)
    observed &= norms > 0
    labels_full = -np.ones(field.count, dtype=np.int64)
    obs_idx = np.flatnonzero(observed)
    if len(obs_idx) < params.min_points:
        warnings.warn("fewer observed primitives than min_points; labeling all noise",
                      stacklevel=2)
        return ClusterAssignment(labels=labels_full, n_clusters=0, params=params)

    x = values[obs_idx] / norms[obs_idx, None]
    tree = cKDTree(x)
    if params.eps is not None:
        eps = float(params.eps)
    else:
        k = min(params.min_points + 1, len(obs_idx))
        dists, _ = tree.query(x, k=k)
        eps = max(float(np.percentile(dists[:, -1], params.eps_percentile)), params.eps_floor)

    neighborhoods = [sorted(n) for n in tree.query_ball_point(x, eps)]
    core = np.array([len(n) >= params.min_points for n in neighborhoods])
    labels = -np.ones(len(obs_idx), dtype=np.int64)
    cluster_id = 0
    for seed in range(len(obs_idx)):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster_id
        stack = [seed]
        while stack:
            j = stack.pop()
            if not core[j]:
                continue
            for k in neighborhoods[j]:
                if labels[k] == -1:
                    labels[k] = cluster_id
                    if core[k]:
                        stack.append(k)
        cluster_id += 1
    labels_full[obs_idx] = labels
    return ClusterAssignment(labels=labels_full, n_clusters=cluster_id, params=params)


def onehot(assignment: ClusterAssignment) -> np.ndarray:
    """Encode labels as a (P, K+1) indicator matrix.

    Column 0 corresponds to label -1 (noise); column k+1 to cluster k. The
    encoding inverts exactly: argmax(onehot(g)) - 1 == g.
    """
    labels = assignment.labels
    out = np.zeros((len(labels), assignment.n_clusters + 1))
    out[np.arange(len(labels)), labels + 1] = 1.0
    return out


def project_clusters(A: WeightMatrix, gamma_onehot: np.ndarray) -> np.ndarray:
    """Render cluster indicators to per-ray labels (argmax decode, ties low).

    Any orthogonal encode/decode pair could stand in here; this delegates to
    the one-hot composite-and-argmax path.
    """
    return render_labels(A, gamma_onehot)


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


class MaskSet:
    """Per-view observation label maps paired with projected cluster labels."""

    def __init__(self, view_shapes, observation_labels, projected_labels):
        self.view_shapes = dict(view_shapes)
        self.observation_labels = {k: np.asarray(v, dtype=np.int64)
                                   for k, v in observation_labels.items()}
        self.projected_labels = {k: np.asarray(v, dtype=np.int64)
                                 for k, v in projected_labels.items()}

    @classmethod
    def build(cls, obs: ObservationSet, kappa: np.ndarray) -> "MaskSet":
        if not obs.label_backed:
            raise InvalidInputError("mask filtering requires label-backed observations")
        kappa = np.asarray(kappa, dtype=np.int64).reshape(-1)
        if kappa.shape[0] != obs.rows:
            raise InvalidInputError("projected labels are not aligned with the observations")
        obs_maps = {}
        proj_maps = {}
        for vid, (start, stop) in obs.view_ranges.items():
            obs_maps[vid] = obs.labels[vid].reshape(-1)
            proj_maps[vid] = kappa[start:stop]
        return cls(obs.view_shapes, obs_maps, proj_maps)

    def view_ids(self):
        return list(self.observation_labels)

    def observation_mask(self, view_id: str, label: int) -> np.ndarray:
        h, w = self.view_shapes[view_id]
        return (self.observation_labels[view_id] == label).reshape(h, w)

    def projected_mask(self, view_id: str, label: int) -> np.ndarray:
        h, w = self.view_shapes[view_id]
        return (self.projected_labels[view_id] == label).reshape(h, w)

    def observation_label_ids(self, view_id: str):
        return sorted(int(u) for u in np.unique(self.observation_labels[view_id]) if u >= 0)

    def projected_label_ids(self, view_id: str):
        return sorted(int(u) for u in np.unique(self.projected_labels[view_id]) if u >= 0)


@dataclass(frozen=True)
class MaskFilterRecord:
    view_id: str
    label: int
    iou: float
    kept: bool

    @property
    def decision(self) -> str:
        return "kept" if self.kept else "dropped"


def filter_observations(obs: ObservationSet, masks: MaskSet, tau: float):
    """Drop observation masks whose best-matching cluster mask overlaps < tau.

    Each (view, label) observation mask is matched to the single projected
    cluster label of maximal IoU (ties toward the lower label). Returns the
    filtered ObservationSet and one record per mask.
    """
    if not obs.label_backed:
        raise InvalidInputError("mask filtering requires label-backed observations")
    if not (0.0 <= tau <= 1.0):
        raise InvalidInputError(f"tau must lie in [0, 1], got {tau!r}")
    records = []
    drops = []
    for vid in obs.view_ranges:
        obs_map = masks.observation_labels[vid]
        proj_map = masks.projected_labels[vid]
        proj_ids = masks.projected_label_ids(vid)
        proj_sizes = {l: int(np.count_nonzero(proj_map == l)) for l in proj_ids}
        for label in masks.observation_label_ids(vid):
            sel = obs_map == label
            size = int(np.count_nonzero(sel))
            best = 0.0
            for pl in proj_ids:
                inter = int(np.count_nonzero(sel & (proj_map == pl)))
                union = size + proj_sizes[pl] - inter
                score = inter / union if union else 0.0
                if score > best:
                    best = score
            kept = best >= tau
            records.append(MaskFilterRecord(view_id=vid, label=label, iou=best, kept=kept))
            if not kept:
                drops.append((vid, label))
    filtered = obs.drop_view_labels(drops) if drops else obs
    return filtered, records
