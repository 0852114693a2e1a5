"""Sparse row-stochastic weight matrix construction and per-ray compositing.

Per view, primitives are projected to screen space, depth-sorted front to
back, tile-culled, and alpha-composited per pixel; each composited
contribution omega = sigma * prod(1 - sigma_front) becomes one entry of the
sparse weight matrix. Rendering composites per-primitive values back to rays
with the same weights.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import (
    CameraView,
    InvalidInputError,
    KernelKind,
    LiftConfig,
    SplatPrimitive,
    SplatScene,
    polarized_opacities,
    quaternions_to_rotations,
)

NEAR_PLANE = 1e-3
WEIGHT_EPS = 1e-8
COV_LOWPASS = 0.3
# Affine footprints under-estimate the perspective extent of tilted planar
# disks; their bounding radius is inflated by this factor.
PLANAR_RADIUS_SLACK = 1.25


@dataclass(frozen=True)
class Ray:
    """World-space ray; direction need not be unit length."""

    origin: np.ndarray
    direction: np.ndarray


def camera_ray(view: CameraView, pixel) -> Ray:
    """Ray through integer pixel coordinates (x, y) of a view."""
    x, y = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(x - view.cx) / view.fx, (y - view.cy) / view.fy, 1.0])
    return Ray(origin=view.camera_center, direction=view.rotation.T @ d_cam)


@dataclass(frozen=True)
class ProjectedFootprint:
    """Screen-space footprint of one primitive in one view.

    For planar (GAUSSIAN_2D) primitives the tangent frame is carried along so
    the kernel can be evaluated at the exact ray-plane intersection.
    """

    kind: KernelKind
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float
    plane_origin: np.ndarray | None = None
    plane_normal: np.ndarray | None = None
    plane_axis_u: np.ndarray | None = None
    plane_axis_v: np.ndarray | None = None
    plane_scales: np.ndarray | None = None


class WeightMatrix:
    """Sparse ray-by-primitive compositing weights.

    Entries within a row are stored in front-to-back depth order. view_ranges
    maps view_id -> contiguous [start, stop) row interval; within a view,
    pixel (row r, column c) occupies row r * width + c.
    """

    def __init__(self, indptr, indices, weights, cols, view_ranges, lambda_used):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.cols = int(cols)
        self.view_ranges = dict(view_ranges)
        self.lambda_used = float(lambda_used)
        self._csr = None

    @property
    def rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz(self) -> int:
        return len(self.weights)

    def row_entries(self, i: int):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def row_sums(self) -> np.ndarray:
        reps = np.diff(self.indptr)
        rows_idx = np.repeat(np.arange(self.rows), reps)
        return np.bincount(rows_idx, weights=self.weights, minlength=self.rows)

    def covered_rows(self) -> np.ndarray:
        return np.diff(self.indptr) > 0

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.weights, self.indices, self.indptr), shape=(self.rows, self.cols))
        return self._csr

    def validate(self) -> None:
        if not np.all(np.isfinite(self.weights)):
            raise InvalidInputError("weights must be finite")
        if self.nnz and (self.weights.min() <= 0.0 or self.weights.max() > 1.0):
            raise InvalidInputError("weights must lie in (0, 1]")
        sums = self.row_sums()
        if sums.size and sums.max() > 1.0 + 1e-6:
            raise InvalidInputError(f"row sum exceeds 1: {sums.max()}")
        for i in range(self.rows):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            seg = self.indices[lo:hi]
            if len(np.unique(seg)) != len(seg):
                raise InvalidInputError(f"duplicate primitive index in row {i}")

    def row_normalized(self) -> "WeightMatrix":
        """Copy with every non-empty row rescaled to sum exactly 1.

        Normalized weights are snapped to dyadic rationals (k / 2^30) whose
        integer numerators sum to 2^30 per row, so the row-stochastic premise
        holds in real arithmetic rather than to within rounding. The snap
        perturbs each weight by at most 2^-30 relative.
        """
        denom = 1 << 30
        sums = self.row_sums()
        scale = np.ones_like(sums)
        nz = sums > 0
        scale[nz] = 1.0 / sums[nz]
        reps = np.diff(self.indptr)
        w = self.weights * np.repeat(scale, reps)
        ticks = np.maximum(np.round(w * denom), 1.0)
        for i in range(self.rows):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            if hi > lo:
                seg = ticks[lo:hi]
                seg[np.argmax(seg)] += denom - seg.sum()
        if ticks.size and ticks.min() < 1:
            raise InvalidInputError("row normalization produced a non-positive weight")
        return WeightMatrix(self.indptr.copy(), self.indices.copy(), ticks / denom,
                            self.cols, self.view_ranges, self.lambda_used)


def view_ranges(views) -> dict:
    """Contiguous global row interval per view, in listed order."""
    ranges = {}
    offset = 0
    for v in views:
        ranges[v.view_id] = (offset, offset + v.pixel_count)
        offset += v.pixel_count
    if len(ranges) != len(views):
        raise InvalidInputError("duplicate view_id among views")
    return ranges


class _ViewProjection:
    """Depth-sorted non-culled footprint arrays for one view."""

    __slots__ = ("idx", "mean2d", "inv_cov", "radius", "alpha", "depth",
                 "is_planar", "plane_origin", "plane_normal", "axis_u",
                 "axis_v", "plane_scales", "origin", "rot_c2w")


def _project_scene(scene: SplatScene, view: CameraView, cfg: LiftConfig,
                   alphas: np.ndarray) -> _ViewProjection:
    w2c = view.world_to_camera
    rot_w2c = w2c[:3, :3]
    xc = scene.positions @ rot_w2c.T + w2c[:3, 3]
    z = xc[:, 2]
    in_front = z > NEAR_PLANE

    x, y = xc[:, 0], xc[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_x = view.fx * x / z + view.cx
        mean_y = view.fy * y / z + view.cy

    rots = quaternions_to_rotations(scene.rotations)
    s2 = np.exp(2.0 * scene.log_scales)
    planar = scene.kernels == int(KernelKind.GAUSSIAN_2D)
    s2 = s2.copy()
    s2[planar, 2] = 0.0  # planar disks have no thickness
    cov3d = np.einsum("nij,nj,nkj->nik", rots, s2, rots)

    # Affine Jacobian of the perspective projection at the primitive center.
    zs = np.where(in_front, z, 1.0)
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = view.fx / zs
    jac[:, 0, 2] = -view.fx * x / zs**2
    jac[:, 1, 1] = view.fy / zs
    jac[:, 1, 2] = -view.fy * y / zs**2
    m = jac @ rot_w2c
    cov2d = np.einsum("nij,njk,nlk->nil", m, cov3d, m)
    cov2d[:, 0, 0] += COV_LOWPASS
    cov2d[:, 1, 1] += COV_LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = in_front & (det > 1e-12) & (a > 0) & (c > 0)
    half_trace = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_trace**2 - det, 0.0))
    lam_max = half_trace + disc
    radius = cfg.kernel_cutoff_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    radius = np.where(planar, radius * PLANAR_RADIUS_SLACK, radius)

    idx = np.flatnonzero(ok)
    order = np.lexsort((idx, z[idx]))  # depth ascending, ties by index
    idx = idx[order]

    proj = _ViewProjection()
    proj.idx = idx
    proj.mean2d = np.stack([mean_x[idx], mean_y[idx]], axis=1)
    inv = np.empty((len(idx), 2, 2))
    d = det[idx]
    inv[:, 0, 0] = c[idx] / d
    inv[:, 0, 1] = -b[idx] / d
    inv[:, 1, 0] = -b[idx] / d
    inv[:, 1, 1] = a[idx] / d
    proj.inv_cov = inv
    proj.radius = radius[idx]
    proj.alpha = alphas[idx]
    proj.depth = z[idx]
    proj.is_planar = planar[idx]
    proj.plane_origin = scene.positions[idx]
    proj.plane_normal = rots[idx][:, :, 2]
    proj.axis_u = rots[idx][:, :, 0]
    proj.axis_v = rots[idx][:, :, 1]
    proj.plane_scales = np.exp(scene.log_scales[idx][:, :2])
    proj.origin = view.camera_center
    proj.rot_c2w = view.rotation.T
    return proj


def project_primitive(splat: SplatPrimitive, view: CameraView,
                      cfg: LiftConfig | None = None) -> ProjectedFootprint | None:
    """Project one splat into a view; returns None when culled."""
    cfg = cfg or LiftConfig()
    scene = SplatScene([splat])
    alphas = polarized_opacities(scene.thetas, cfg.lam)
    proj = _project_scene(scene, view, cfg, alphas)
    if len(proj.idx) == 0:
        return None
    inv = proj.inv_cov[0]
    det_inv = inv[0, 0] * inv[1, 1] - inv[0, 1] * inv[1, 0]
    cov = np.array([[inv[1, 1], -inv[0, 1]], [-inv[1, 0], inv[0, 0]]]) / det_inv
    kind = KernelKind(int(splat.kernel))
    if kind == KernelKind.GAUSSIAN_2D:
        return ProjectedFootprint(
            kind=kind, mean2d=proj.mean2d[0], cov2d=cov, depth=float(proj.depth[0]),
            radius=float(proj.radius[0]), plane_origin=proj.plane_origin[0],
            plane_normal=proj.plane_normal[0], plane_axis_u=proj.axis_u[0],
            plane_axis_v=proj.axis_v[0], plane_scales=proj.plane_scales[0])
    return ProjectedFootprint(kind=kind, mean2d=proj.mean2d[0], cov2d=cov,
                              depth=float(proj.depth[0]), radius=float(proj.radius[0]))


def kernel_eval(footprint: ProjectedFootprint, pixel, ray: Ray | None = None) -> float:
    """Kernel value delta in [0, 1] at a pixel; 0 beyond the bounding radius."""
    pix = np.asarray(pixel, dtype=np.float64)
    d = pix - footprint.mean2d
    if d @ d > footprint.radius**2:
        return 0.0
    if footprint.kind == KernelKind.GAUSSIAN_2D:
        if ray is None:
            raise InvalidInputError("planar kernels require the pixel ray")
        denom = float(ray.direction @ footprint.plane_normal)
        if abs(denom) < 1e-12:
            return 0.0
        t = float((footprint.plane_origin - ray.origin) @ footprint.plane_normal) / denom
        if t <= NEAR_PLANE:
            return 0.0
        point = ray.origin + t * ray.direction
        local = point - footprint.plane_origin
        u = float(local @ footprint.plane_axis_u) / footprint.plane_scales[0]
        v = float(local @ footprint.plane_axis_v) / footprint.plane_scales[1]
        return float(min(np.exp(-0.5 * (u * u + v * v)), 1.0))
    inv = np.linalg.inv(footprint.cov2d)
    q = float(d @ inv @ d)
    return float(min(np.exp(-0.5 * q), 1.0))


def _tile_entries(proj: _ViewProjection, view: CameraView, cfg: LiftConfig):
    """Yield (rows_local, ranks, cols, weights) arrays per tile of one view."""
    n_cand = len(proj.idx)
    if n_cand == 0:
        return
    w, h, ts = view.width, view.height, cfg.tile_size
    ranks_all = np.arange(n_cand, dtype=np.int64)
    for ty0 in range(0, h, ts):
        ty1 = min(ty0 + ts, h)
        for tx0 in range(0, w, ts):
            tx1 = min(tx0 + ts, w)
            # Disk-rectangle overlap against the tile's pixel coordinates.
            nearest_x = np.clip(proj.mean2d[:, 0], tx0, tx1 - 1)
            nearest_y = np.clip(proj.mean2d[:, 1], ty0, ty1 - 1)
            dx = proj.mean2d[:, 0] - nearest_x
            dy = proj.mean2d[:, 1] - nearest_y
            cand = np.flatnonzero(dx * dx + dy * dy <= proj.radius**2)
            if cand.size == 0:
                continue
            xs = np.arange(tx0, tx1, dtype=np.float64)
            ys = np.arange(ty0, ty1, dtype=np.float64)
            gx, gy = np.meshgrid(xs, ys)
            pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
            rows_local = (np.repeat(np.arange(ty0, ty1), tx1 - tx0) * w
                          + np.tile(np.arange(tx0, tx1), ty1 - ty0)).astype(np.int64)
            npx = len(pix)

            diff = pix[:, None, :] - proj.mean2d[None, cand, :]
            within = np.einsum("pcx,pcx->pc", diff, diff) <= proj.radius[cand]**2

            delta = np.zeros((npx, cand.size))
            vol = ~proj.is_planar[cand]
            if np.any(vol):
                sub = cand[vol]
                dv = diff[:, vol, :]
                quad = np.einsum("pcx,cxy,pcy->pc", dv, proj.inv_cov[sub], dv)
                delta[:, vol] = np.exp(-0.5 * quad)
            if np.any(~vol):
                sub = cand[~vol]
                dirs_cam = np.stack([(pix[:, 0] - view.cx) / view.fx,
                                     (pix[:, 1] - view.cy) / view.fy,
                                     np.ones(npx)], axis=1)
                dirs = dirs_cam @ proj.rot_c2w.T
                normals = proj.plane_normal[sub]
                denom = dirs @ normals.T
                tnum = np.einsum("cx,cx->c", proj.plane_origin[sub] - proj.origin, normals)
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = tnum[None, :] / denom
                du0 = np.einsum("x,cx->c", proj.origin, proj.axis_u[sub]) \
                    - np.einsum("cx,cx->c", proj.plane_origin[sub], proj.axis_u[sub])
                dv0 = np.einsum("x,cx->c", proj.origin, proj.axis_v[sub]) \
                    - np.einsum("cx,cx->c", proj.plane_origin[sub], proj.axis_v[sub])
                uu = (du0[None, :] + t * (dirs @ proj.axis_u[sub].T)) / proj.plane_scales[sub, 0]
                vv = (dv0[None, :] + t * (dirs @ proj.axis_v[sub].T)) / proj.plane_scales[sub, 1]
                dp = np.exp(-0.5 * (uu * uu + vv * vv))
                valid = np.isfinite(t) & (t > NEAR_PLANE) & (np.abs(denom) > 1e-12)
                delta[:, ~vol] = np.where(valid, np.minimum(dp, 1.0), 0.0)
            delta[~within] = 0.0

            sigma = proj.alpha[cand][None, :] * delta
            one_minus = 1.0 - sigma
            t_prefix = np.cumprod(one_minus, axis=1)
            t_prefix = np.concatenate([np.ones((npx, 1)), t_prefix[:, :-1]], axis=1)
            alive = t_prefix >= cfg.transmittance_floor
            omega = sigma * t_prefix * alive
            keep = omega >= WEIGHT_EPS
            if not np.any(keep):
                continue
            pk, ck = np.nonzero(keep)
            yield (rows_local[pk], ranks_all[cand][ck],
                   proj.idx[cand][ck], omega[pk, ck])


def _build_view(scene: SplatScene, view: CameraView, cfg: LiftConfig, alphas: np.ndarray):
    """Sparse weight arrays (indptr, indices, weights) for one view."""
    proj = _project_scene(scene, view, cfg, alphas)
    rows_parts, rank_parts, col_parts, w_parts = [], [], [], []
    for rows_local, ranks, cols, weights in _tile_entries(proj, view, cfg):
        rows_parts.append(rows_local)
        rank_parts.append(ranks)
        col_parts.append(cols)
        w_parts.append(weights)
    n_rows = view.pixel_count
    if not rows_parts:
        return (np.zeros(n_rows + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))
    rows = np.concatenate(rows_parts)
    ranks = np.concatenate(rank_parts)
    cols = np.concatenate(col_parts)
    weights = np.concatenate(w_parts)
    order = np.lexsort((ranks, rows))
    rows, cols, weights = rows[order], cols[order], weights[order]
    counts = np.bincount(rows, minlength=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols, weights


def build_weight_matrix(scene: SplatScene, views, cfg: LiftConfig | None = None,
                        threads: int = 1) -> WeightMatrix:
    """Build the sparse compositing weight matrix over all views' rays.

    Deterministic: depth ties break by ascending primitive index and entries
    are merged in fixed (view, row, depth) order regardless of thread count.
    """
    cfg = cfg or LiftConfig()
    views = list(views)
    if scene is None or len(scene) == 0:
        raise InvalidInputError("scene must contain at least one primitive")
    if not views:
        raise InvalidInputError("at least one view is required")
    ranges = view_ranges(views)
    alphas = polarized_opacities(scene.thetas, cfg.lam)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda v: _build_view(scene, v, cfg, alphas), views))
    else:
        chunks = [_build_view(scene, v, cfg, alphas) for v in views]

    indptr = np.zeros(1, dtype=np.int64)
    indices_parts, weight_parts = [], []
    for chunk_indptr, chunk_indices, chunk_weights in chunks:
        indptr = np.concatenate([indptr, chunk_indptr[1:] + indptr[-1]])
        indices_parts.append(chunk_indices)
        weight_parts.append(chunk_weights)
    matrix = WeightMatrix(
        indptr=indptr,
        indices=np.concatenate(indices_parts) if indices_parts else np.zeros(0, np.int64),
        weights=np.concatenate(weight_parts) if weight_parts else np.zeros(0),
        cols=len(scene),
        view_ranges=ranges,
        lambda_used=cfg.lam,
    )
    matrix.validate()
    return matrix


def iter_view_entries(scene: SplatScene, view: CameraView, cfg: LiftConfig,
                      alphas: np.ndarray | None = None):
    """Streaming access to one view's weight entries without materializing A."""
    if alphas is None:
        alphas = polarized_opacities(scene.thetas, cfg.lam)
    proj = _project_scene(scene, view, cfg, alphas)
    yield from _tile_entries(proj, view, cfg)


def render(A: WeightMatrix, values, background) -> np.ndarray:
    """Composite per-primitive values to rays: sum_p w_p x_p + (1 - sum_p w_p) * bg."""
    x = np.asarray(getattr(values, "values", values), dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != A.cols:
        raise InvalidInputError(
            f"value rows ({x.shape[0]}) do not match primitive count ({A.cols})")
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1 and x.shape[1] != 1:
        bg = np.full(x.shape[1], bg[0])
    if bg.size != x.shape[1]:
        raise InvalidInputError(
            f"background dimension ({bg.size}) does not match feature dimension ({x.shape[1]})")
    out = A.to_csr() @ x
    out += (1.0 - A.row_sums())[:, None] * bg[None, :]
    return out[:, 0] if squeeze else out


def render_labels(A: WeightMatrix, gamma_onehot) -> np.ndarray:
    """Composite one-hot label indicators and decode per ray.

    Returns argmax column minus 1 per ray; argmax ties break toward the
    lower column index, and rays with no entries map to -1.
    """
    g = np.asarray(gamma_onehot, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != A.cols:
        raise InvalidInputError(
            f"one-hot matrix rows ({g.shape}) do not match primitive count ({A.cols})")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise InvalidInputError("label matrix entries must lie in {0, 1}")
    if np.any(g.sum(axis=1) > 1.0):
        raise InvalidInputError("rows of the label matrix must be one-hot or all zero")
    scores = A.to_csr() @ g
    kappa = np.argmax(scores, axis=1).astype(np.int64) - 1
    kappa[~A.covered_rows()] = -1
    return kappa
