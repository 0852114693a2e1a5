"""Query-time operations: attention scores against embeddings, 2D attention
rendering, histogram-valley auto-thresholding, segmentation, and metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import InvalidInputError
from .rasterize import WeightMatrix, render
from .solver import FeatureField, ObservationSet

BACKGROUND_SCORE = -1.0


class ValleyNotFoundError(RuntimeError):
    """The score histogram has no interior valley; fall back to a fixed threshold."""


@dataclass(frozen=True)
class QueryEmbedding:
    """A named query vector, unit-normalized on construction."""

    vector: np.ndarray
    name: str = "query"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if not np.all(np.isfinite(v)) or n == 0.0:
            raise InvalidInputError("query embedding must be finite and nonzero")
        v = v / n
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class AttentionMap:
    """Raw per-ray attention scores for one view.

    Thresholding always operates on the raw scores; display_min/display_max
    only record the affine rescaling used for 8-bit visualization.
    """

    view_id: str
    scores: np.ndarray
    covered: np.ndarray
    primitive_scores: np.ndarray
    display_min: float
    display_max: float

    def covered_scores(self) -> np.ndarray:
        return self.scores.reshape(-1)[self.covered.reshape(-1)]

    def to_display(self) -> np.ndarray:
        """8-bit rescaled scores (lossless given the recorded min/max)."""
        lo, hi = self.display_min, self.display_max
        span = hi - lo if hi > lo else 1.0
        return np.clip((self.scores - lo) / span * 255.0, 0, 255).astype(np.uint8)


def attention_scores(field: FeatureField, query: QueryEmbedding) -> np.ndarray:
    """Cosine similarity of every lifted feature against the query.

    Unobserved or zero-norm primitives score -1 so they never rise above a
    threshold on real scores.
    """
    values = field.values
    if values.shape[1] != query.vector.shape[0]:
        raise InvalidInputError(
            f"feature dim {values.shape[1]} does not match query dim {query.vector.shape[0]}")
    norms = np.linalg.norm(values, axis=1)
    valid = (norms > 0) & ~field.unobserved
    scores = np.full(field.count, BACKGROUND_SCORE)
    scores[valid] = (values[valid] @ query.vector) / norms[valid]
    return scores


def render_attention(A: WeightMatrix, scores: np.ndarray, views,
                     lift_lambda: float | None = None) -> dict[str, AttentionMap]:
    """Composite per-primitive scores into one scalar map per view.

    Background contributes BACKGROUND_SCORE. If the matrix was built with a
    different polarization factor than the lift, a warning is emitted (the
    two should match).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != A.cols:
        raise InvalidInputError("one score per primitive is required")
    if lift_lambda is not None and abs(lift_lambda - A.lambda_used) > 1e-12:
        warnings.warn(
            f"projection lambda {A.lambda_used} differs from lift lambda {lift_lambda}; "
            "attention maps are sharpest when both match", stacklevel=2)
    composite = render(A, scores, BACKGROUND_SCORE)
    covered_rows = A.covered_rows()
    out = {}
    for view in views:
        start, stop = A.view_ranges[view.view_id]
        vals = composite[start:stop].reshape(view.height, view.width)
        cov = covered_rows[start:stop].reshape(view.height, view.width)
        covered_vals = vals[cov]
        lo = float(covered_vals.min()) if covered_vals.size else 0.0
        hi = float(covered_vals.max()) if covered_vals.size else 0.0
        out[view.view_id] = AttentionMap(
            view_id=view.view_id, scores=vals, covered=cov,
            primitive_scores=scores, display_min=lo, display_max=hi)
    return out


def _smooth(hist: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return hist.astype(np.float64)
    half = window // 2
    padded = np.pad(hist.astype(np.float64), half, mode="reflect")
    kernel = np.ones(window) / window
    return np.convolve(padded, kernel, mode="valid")


def _runs(values: np.ndarray):
    """Run-length encode: list of (value, start, stop_exclusive)."""
    runs = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] != values[start]:
            runs.append((values[start], start, i))
            start = i
    return runs


def _valleys(hist: np.ndarray, peak: int, direction: int):
    """Interior minima scanning from peak, nearest first: (lo, hi) bin spans.

    A valley is a run of equal values strictly below its predecessor run and
    strictly below its successor run (so monotone tails do not qualify).
    """
    if direction > 0:
        segment = hist[peak:]
    else:
        segment = hist[:peak + 1][::-1]
    runs = _runs(segment)
    for k in range(1, len(runs) - 1):
        prev_v = runs[k - 1][0]
        cur_v, start, stop = runs[k]
        next_v = runs[k + 1][0]
        if cur_v < prev_v and cur_v < next_v:
            if direction > 0:
                yield peak + start, peak + stop - 1
            else:
                yield peak - (stop - 1), peak - start


# A valley only counts when a mode of at least this fraction of the main
# peak lies beyond it; smaller rises are treated as tail noise.
MIN_MODE_FRACTION = 0.02


def auto_threshold(attention, bins: int = 256, smoothing_window: int = 5) -> float:
    """Histogram-valley threshold over covered raw scores.

    Builds a histogram spanning [min, max], box-smooths it, locates the
    largest peak, and scans toward higher scores for the first valley
    (center of the minimum plateau) that separates the peak from another
    significant mode; when the largest peak is itself the top-most mode the
    scan runs toward lower scores instead. Raises ValleyNotFoundError on
    degenerate (unimodal or flat) histograms.
    """
    if isinstance(attention, AttentionMap):
        vals = attention.covered_scores()
    else:
        vals = np.asarray(attention, dtype=np.float64).reshape(-1)
    vals = vals[np.isfinite(vals)]
    if vals.size < 2 or vals.min() == vals.max():
        raise ValleyNotFoundError("no valley found: fewer than 2 distinct scores")
    hist, edges = np.histogram(vals, bins=bins, range=(vals.min(), vals.max()))
    smoothed = _smooth(hist, smoothing_window)
    peak = int(np.argmax(smoothed))
    min_rise = MIN_MODE_FRACTION * smoothed[peak]
    for direction in (+1, -1):
        for lo, hi in _valleys(smoothed, peak, direction):
            beyond = smoothed[hi + 1:] if direction > 0 else smoothed[:lo]
            # a real valley separates the peak from another mode: the
            # histogram must rise substantially again beyond it
            if beyond.size and beyond.max() - smoothed[lo] >= min_rise:
                return float(0.5 * (edges[lo] + edges[hi + 1]))
    raise ValleyNotFoundError("no valley found: histogram is unimodal")


def segment(attention, threshold: float) -> np.ndarray:
    """Binary mask of raw scores >= threshold."""
    if not np.isfinite(threshold):
        raise InvalidInputError("threshold must be finite")
    scores = attention.scores if isinstance(attention, AttentionMap) else np.asarray(attention)
    return scores >= threshold


def eval_miou(pred_masks: dict, gt_masks: dict) -> float:
    """Mean IoU over queries shared by both mask sets.

    Queries missing a ground-truth mask are excluded with a warning;
    invariant under query reordering.
    """
    from .aggregate import iou

    missing = sorted(set(pred_masks) - set(gt_masks))
    if missing:
        warnings.warn(f"queries without ground truth excluded: {missing}", stacklevel=2)
    shared = sorted(set(pred_masks) & set(gt_masks))
    if not shared:
        raise InvalidInputError("no queries with both prediction and ground truth")
    return float(np.mean([iou(pred_masks[q], gt_masks[q]) for q in shared]))


@dataclass(frozen=True)
class CosineReport:
    mean: float
    rays_used: int
    rays_excluded: int


def eval_cosine(rendered: np.ndarray, obs: ObservationSet) -> CosineReport:
    """Mean per-ray cosine similarity between rendered features and observations.

    Rays without an observation, or with a zero-norm vector on either side,
    are excluded and counted.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    if rendered.shape != (obs.rows, obs.feature_dim):
        raise InvalidInputError(
            f"rendered shape {rendered.shape} does not match ({obs.rows}, {obs.feature_dim})")
    gt = obs.dense_values()
    mask = obs.observed_mask()
    rn = np.linalg.norm(rendered, axis=1)
    gn = np.linalg.norm(gt, axis=1)
    usable = mask & (rn > 0) & (gn > 0)
    excluded = int(np.count_nonzero(mask) - np.count_nonzero(usable))
    if not np.any(usable):
        raise InvalidInputError("no usable rays for cosine evaluation")
    cos = np.sum(rendered[usable] * gt[usable], axis=1) / (rn[usable] * gn[usable])
    return CosineReport(mean=float(cos.mean()), rays_used=int(np.count_nonzero(usable)),
                        rays_excluded=excluded)


def pca_rgb(field: FeatureField) -> np.ndarray:
    """Project observed features onto their top-3 principal components and
    min-max normalize each channel to [0, 1].

    Deterministic sign convention: the largest-magnitude loading of each
    component is made positive. Rank-deficient channels (and unobserved
    primitives) are filled with 0.5.
    """
    observed = ~field.unobserved
    n_obs = int(np.count_nonzero(observed))
    if n_obs < 3:
        raise InvalidInputError("PCA visualization needs at least 3 observed primitives")
    x = field.values[observed]
    centered = x - x.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    out = np.full((field.count, 3), 0.5)
    n_comp = min(3, vt.shape[0])
    for c in range(n_comp):
        if svals[c] <= 1e-12 * max(svals[0], 1e-300):
            break
        comp = vt[c]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        proj = centered @ comp
        lo, hi = proj.min(), proj.max()
        channel = (proj - lo) / (hi - lo) if hi > lo else np.full(n_obs, 0.5)
        out[observed, c] = channel
    return out
