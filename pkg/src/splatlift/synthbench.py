"""Synthetic scene and observation generation with controllable mask noise,
plus Monte-Carlo verification helpers for the compositing statistics."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .model import CameraView, InvalidInputError, KernelKind, LiftConfig, SplatScene
from .rasterize import WeightMatrix, build_weight_matrix, view_ranges
from .solver import ObservationSet

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
# A pixel belongs to an object's silhouette when that object's composited
# weight exceeds half the unit ray mass.
SILHOUETTE_DOMINANCE = 0.5


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    shape: str                      # wall | blob | sphere-cloud
    count: int
    theta_range: tuple[float, float]
    feature: tuple[float, ...]
    center: tuple[float, float, float]
    extent: float
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.shape not in ("wall", "blob", "sphere-cloud", "disk"):
            raise InvalidInputError(f"unknown object shape {self.shape!r}")
        if self.count < 1:
            raise InvalidInputError("object primitive count must be >= 1")
        if not self.extent > 0:
            raise InvalidInputError("object extent must be positive")


@dataclass(frozen=True)
class ViewOrbit:
    count: int = 3
    width: int = 64
    height: int = 64
    focal: float = 70.0
    radius: float = 4.0
    height_offset: float = 0.0
    span_degrees: float = 40.0
    target: tuple[float, float, float] = (0.0, 0.0, 4.0)

    def __post_init__(self):
        if self.count < 1 or self.width < 1 or self.height < 1:
            raise InvalidInputError("view counts and resolution must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float = 0.0
    merge_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.fraction <= 1.0):
            raise InvalidInputError("noise fraction must lie in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    kernel: KernelKind = KernelKind.GAUSSIAN_3D
    objects: tuple[ObjectSpec, ...] = ()
    views: ViewOrbit = field(default_factory=ViewOrbit)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if not self.objects:
            raise InvalidInputError("a scene spec needs at least one object")
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise InvalidInputError("object names must be unique")
        for a, b in self.noise.merge_pairs:
            if a not in names or b not in names:
                raise InvalidInputError(f"merge pair ({a!r}, {b!r}) references a missing object")


# -- declarative text config -------------------------------------------------

def parse_scene_spec(text: str) -> SceneSpec:
    """Parse the INI-style scene description (see format_scene_spec)."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidInputError(f"malformed scene spec: {exc}") from exc

    def floats(raw):
        return tuple(float(t) for t in raw.split())

    scene_sec = cp["scene"] if cp.has_section("scene") else {}
    seed = int(scene_sec.get("seed", 0))
    kernel_name = scene_sec.get("kernel", "gaussian3d").strip().lower()
    kernel = {"gaussian3d": KernelKind.GAUSSIAN_3D,
              "gaussian2d": KernelKind.GAUSSIAN_2D}.get(kernel_name)
    if kernel is None:
        raise InvalidInputError(f"unknown kernel {kernel_name!r}")

    vs = cp["views"] if cp.has_section("views") else {}
    views = ViewOrbit(
        count=int(vs.get("count", 3)),
        width=int(vs.get("width", 64)),
        height=int(vs.get("height", 64)),
        focal=float(vs.get("focal", 70.0)),
        radius=float(vs.get("radius", 4.0)),
        height_offset=float(vs.get("height_offset", 0.0)),
        span_degrees=float(vs.get("span_degrees", 40.0)),
        target=floats(vs.get("target", "0 0 4")),
    )

    merge_pairs = ()
    fraction = 0.0
    if cp.has_section("noise"):
        ns = cp["noise"]
        fraction = float(ns.get("fraction", 0.0))
        raw = ns.get("merge", "").strip()
        if raw:
            merge_pairs = tuple(tuple(p.split("+")) for p in raw.split())
            for pair in merge_pairs:
                if len(pair) != 2:
                    raise InvalidInputError(f"merge pairs must be name+name, got {pair!r}")

    objects = []
    for section in cp.sections():
        if not section.startswith("object:"):
            continue
        name = section.split(":", 1)[1]
        sec = cp[section]
        try:
            theta = floats(sec["theta"])
            objects.append(ObjectSpec(
                name=name,
                shape=sec["shape"].strip(),
                count=int(sec["count"]),
                theta_range=(theta[0], theta[-1]),
                feature=floats(sec["feature"]),
                center=floats(sec["center"]),
                extent=float(sec["extent"]),
                scale_factor=float(sec.get("scale_factor", 1.0)),
            ))
        except KeyError as exc:
            raise InvalidInputError(f"object {name!r} is missing key {exc}") from exc
    return SceneSpec(seed=seed, kernel=kernel, objects=tuple(objects),
                     views=views, noise=NoiseSpec(fraction=fraction, merge_pairs=merge_pairs))


def format_scene_spec(spec: SceneSpec) -> str:
    """Serialize a SceneSpec back to the INI text format."""
    cp = configparser.ConfigParser()
    cp["scene"] = {"seed": str(spec.seed), "kernel": spec.kernel.name.lower().replace("_", "")}
    cp["views"] = {
        "count": str(spec.views.count), "width": str(spec.views.width),
        "height": str(spec.views.height), "focal": repr(spec.views.focal),
        "radius": repr(spec.views.radius), "height_offset": repr(spec.views.height_offset),
        "span_degrees": repr(spec.views.span_degrees),
        "target": " ".join(repr(t) for t in spec.views.target),
    }
    if spec.noise.fraction or spec.noise.merge_pairs:
        cp["noise"] = {
            "fraction": repr(spec.noise.fraction),
            "merge": " ".join(f"{a}+{b}" for a, b in spec.noise.merge_pairs),
        }
    for obj in spec.objects:
        cp[f"object:{obj.name}"] = {
            "shape": obj.shape, "count": str(obj.count),
            "theta": f"{obj.theta_range[0]!r} {obj.theta_range[1]!r}",
            "feature": " ".join(repr(f) for f in obj.feature),
            "center": " ".join(repr(c) for c in obj.center),
            "extent": repr(obj.extent), "scale_factor": repr(obj.scale_factor),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# -- scene construction ------------------------------------------------------

def _look_at(eye, target, width, height, focal, view_id) -> CameraView:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up_hint) > 0.999:
        up_hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(up_hint, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return CameraView(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height, world_to_camera=w2c, view_id=view_id)


def orbit_views(orbit: ViewOrbit) -> list[CameraView]:
    """Cameras on an arc around the target, all looking at it."""
    target = np.asarray(orbit.target, dtype=np.float64)
    if orbit.count == 1:
        angles = [0.0]
    else:
        half = math.radians(orbit.span_degrees) / 2.0
        angles = np.linspace(-half, half, orbit.count)
    views = []
    for i, ang in enumerate(angles):
        eye = target + np.array([orbit.radius * math.sin(ang),
                                 orbit.height_offset,
                                 -orbit.radius * math.cos(ang)])
        views.append(_look_at(eye, target, orbit.width, orbit.height,
                              orbit.focal, f"view_{i:03d}"))
    return views


def _object_primitives(rng: np.random.Generator, obj: ObjectSpec):
    center = np.asarray(obj.center, dtype=np.float64)
    lo, hi = obj.theta_range
    if obj.shape == "wall":
        n = max(1, int(round(math.sqrt(obj.count))))
        if n == 1:
            positions = center[None, :]
            spacing = obj.extent
        else:
            axis = np.linspace(-obj.extent, obj.extent, n)
            gx, gy = np.meshgrid(axis, axis)
            positions = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1) + center
            spacing = 2.0 * obj.extent / (n - 1)
        scale = spacing * obj.scale_factor
        count = len(positions)
    elif obj.shape == "blob":
        # Uniform solid ball: sharp silhouette compared to a Gaussian cloud.
        dirs = rng.normal(size=(obj.count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = obj.extent * rng.uniform(0.0, 1.0, obj.count) ** (1.0 / 3.0)
        positions = center + dirs * radii[:, None]
        scale = obj.extent / obj.count ** (1.0 / 3.0) * obj.scale_factor
        count = obj.count
    elif obj.shape == "disk":
        # Flat circular plate of small splats: pixel-sharp silhouette.
        n = max(2, int(math.ceil(math.sqrt(4.0 / math.pi * obj.count))))
        axis = np.linspace(-obj.extent, obj.extent, n)
        gx, gy = np.meshgrid(axis, axis)
        pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
        spacing = 2.0 * obj.extent / (n - 1)
        pts[:, :2] += rng.uniform(-0.1, 0.1, (n * n, 2)) * spacing
        keep = np.linalg.norm(pts[:, :2], axis=1) <= obj.extent
        positions = pts[keep] + center
        scale = spacing * obj.scale_factor
        count = len(positions)
    else:  # sphere-cloud
        dirs = rng.normal(size=(obj.count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        positions = center + dirs * obj.extent
        scale = obj.extent * math.sqrt(4.0 * math.pi / obj.count) * obj.scale_factor
        count = obj.count
    thetas = rng.uniform(lo, hi, count)
    log_scales = np.full((count, 3), math.log(max(scale, 1e-9)))
    rotations = np.tile(IDENTITY_QUAT, (count, 1))
    return positions, log_scales, rotations, thetas


def make_scene(spec: SceneSpec):
    """Deterministically build (scene, views, per-primitive object ids)."""
    rng = np.random.default_rng(spec.seed)
    positions, log_scales, rotations, thetas, ids = [], [], [], [], []
    for obj_index, obj in enumerate(spec.objects):
        p, ls, r, t = _object_primitives(rng, obj)
        positions.append(p)
        log_scales.append(ls)
        rotations.append(r)
        thetas.append(t)
        ids.append(np.full(len(p), obj_index, dtype=np.int64))
    scene = SplatScene.from_arrays(
        np.concatenate(positions), np.concatenate(log_scales),
        np.concatenate(rotations), np.concatenate(thetas),
        np.full(sum(len(p) for p in positions), int(spec.kernel), dtype=np.int8))
    views = orbit_views(spec.views)
    return scene, views, np.concatenate(ids)


def instance_label_maps(A: WeightMatrix, object_ids: np.ndarray, n_objects: int):
    """Per-view silhouette label maps: the dominant object, or -1.

    A pixel is labeled with the object holding the largest composited
    weight, provided that weight exceeds SILHOUETTE_DOMINANCE.
    """
    onehot_obj = np.zeros((len(object_ids), n_objects))
    onehot_obj[np.arange(len(object_ids)), object_ids] = 1.0
    scores = A.to_csr() @ onehot_obj
    best = np.argmax(scores, axis=1)
    best_weight = scores[np.arange(len(best)), best]
    labels = np.where(best_weight > SILHOUETTE_DOMINANCE, best, -1).astype(np.int32)
    return {vid: labels[start:stop] for vid, (start, stop) in A.view_ranges.items()}


@dataclass(frozen=True)
class MaskTag:
    view_id: str
    label: int
    merged: bool
    source_objects: tuple[int, ...]


def _unit_features(spec: SceneSpec) -> np.ndarray:
    feats = np.array([o.feature for o in spec.objects], dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("object feature vectors must be nonzero")
    return feats / norms[:, None]


def make_observations(scene: SplatScene, views, spec: SceneSpec,
                      cfg: LiftConfig | None = None,
                      object_ids: np.ndarray | None = None):
    """Label-backed observations with optional merged-mask corruption.

    Clean views carry one mask per visible object with that object's unit
    feature vector; a deterministic fraction of views has each designated
    pair merged into one mask whose feature is the renormalized mean of the
    two. Returns (observations, {(view_id, label): MaskTag}).
    """
    cfg = cfg or LiftConfig(lam=1.0)
    if object_ids is None:
        raise InvalidInputError("make_observations needs the per-primitive object ids")
    feats = _unit_features(spec)
    name_to_index = {o.name: i for i, o in enumerate(spec.objects)}
    A = build_weight_matrix(scene, views, cfg)
    labels_by_view = instance_label_maps(A, object_ids, len(spec.objects))

    n_noisy = int(round(spec.noise.fraction * len(views)))
    noisy_rng = np.random.default_rng(spec.seed + 1)
    noisy_views = set()
    if n_noisy > 0 and spec.noise.merge_pairs:
        chosen = noisy_rng.choice(len(views), size=min(n_noisy, len(views)), replace=False)
        noisy_views = {views[i].view_id for i in sorted(chosen)}

    maps = {}
    tables = {}
    tags = {}
    for view in views:
        vid = view.view_id
        lab = labels_by_view[vid].copy()
        table = {}
        merged_into = {}
        if vid in noisy_views:
            for name_a, name_b in spec.noise.merge_pairs:
                ia, ib = name_to_index[name_a], name_to_index[name_b]
                keep, drop = min(ia, ib), max(ia, ib)
                lab[lab == drop] = keep
                merged = feats[ia] + feats[ib]
                merged /= np.linalg.norm(merged)
                table[keep] = merged
                merged_into[keep] = (ia, ib)
        for obj_index in sorted(int(u) for u in np.unique(lab) if u >= 0):
            if obj_index in merged_into:
                tags[(vid, obj_index)] = MaskTag(vid, obj_index, True, merged_into[obj_index])
            else:
                table[obj_index] = feats[obj_index]
                tags[(vid, obj_index)] = MaskTag(vid, obj_index, False, (obj_index,))
        maps[vid] = lab
        tables[vid] = table
    obs = ObservationSet.from_labels(views, maps, tables)
    return obs, tags


# -- presets -----------------------------------------------------------------

def opaque_wall_spec(seed: int = 3, views: int = 3) -> SceneSpec:
    """A dense high-opacity wall filling every pixel of every view."""
    return SceneSpec(
        seed=seed,
        objects=(ObjectSpec(name="wall", shape="wall", count=1600,
                            theta_range=(8.0, 10.0), feature=(0.0, 0.0, 1.0),
                            center=(0.0, 0.0, 4.0), extent=4.0, scale_factor=1.4),),
        views=ViewOrbit(count=views, width=64, height=64, focal=70.0,
                        radius=4.0, span_degrees=24.0, target=(0.0, 0.0, 4.0)),
    )


def two_blob_spec(noise_fraction: float = 0.0, seed: int = 7,
                  resolution: int = 80, views: int = 10) -> SceneSpec:
    """Two opaque sharp-edged blobs before a backing wall; optional merged masks."""
    return SceneSpec(
        seed=seed,
        objects=(
            ObjectSpec(name="blob_a", shape="disk", count=3000,
                       theta_range=(9.0, 11.0), feature=(1.0, 0.0, 0.0, 0.0),
                       center=(-1.12, 0.0, 4.0), extent=1.0, scale_factor=0.65),
            ObjectSpec(name="blob_b", shape="disk", count=3000,
                       theta_range=(9.0, 11.0), feature=(0.0, 1.0, 0.0, 0.0),
                       center=(1.12, 0.0, 4.0), extent=1.0, scale_factor=0.65),
            ObjectSpec(name="wall", shape="wall", count=1600,
                       theta_range=(9.0, 11.0), feature=(0.0, 0.0, 1.0, 0.0),
                       center=(0.0, 0.0, 6.0), extent=6.5, scale_factor=1.4),
        ),
        views=ViewOrbit(count=views, width=resolution, height=resolution,
                        focal=1.05 * resolution, radius=4.0, span_degrees=24.0,
                        target=(0.0, 0.0, 4.0)),
        noise=NoiseSpec(fraction=noise_fraction, merge_pairs=(("blob_a", "blob_b"),)),
    )


def layered_sheet_scene(focal: float = 64.0, resolution: int = 64):
    """Two coaxial near-flat giant splats covering every pixel of one view.

    Both carry logit 1.0 so the polarization factor directly steers how much
    of the front sheet shows through; observations split half the pixels to
    one value and half to another, making the lift genuinely inconsistent.
    Used to measure dispersion against the polarization factor.
    """
    big = math.log(2.0e2)
    scene = SplatScene.from_arrays(
        positions=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
        log_scales=np.full((2, 3), big),
        rotations=np.tile(IDENTITY_QUAT, (2, 1)),
        thetas=np.array([1.0, 1.0]),
    )
    w2c = np.eye(4)
    view = CameraView(fx=focal, fy=focal, cx=resolution / 2.0, cy=resolution / 2.0,
                      width=resolution, height=resolution, world_to_camera=w2c,
                      view_id="sheet")
    values = np.zeros((resolution * resolution, 1))
    values[::2] = 1.0  # alternate pixels observe conflicting values
    obs = ObservationSet.from_dense([view], {"sheet": values})
    return scene, [view], obs


# -- Monte-Carlo verification ------------------------------------------------

@dataclass(frozen=True)
class McGradientResult:
    estimate: float
    standard_error: float
    analytic: float


def mc_background_gradient(s: float, n_samples: int = 100_000, seed: int = 0,
                           primitive_value: float = 0.7) -> McGradientResult:
    """Monte-Carlo expectation of the squared-residual gradient w.r.t. the
    weight sum under a uniform random background.

    Single-ray, single-primitive configuration with a consistent observation
    (zero foreground residual): the rendered value is s * c + (1 - s) * b
    with b ~ U(-1, 1), the observation is s * c, and the half-MSE gradient
    with respect to s is (residual) * (c - b). Its expectation is
    (s - 1) * Var(b) = (s - 1) / 3.
    """
    if not (0.0 <= s <= 1.0):
        raise InvalidInputError("weight sum s must lie in [0, 1]")
    if n_samples < 10_000:
        raise InvalidInputError("need at least 1e4 samples for a stable standard error")
    rng = np.random.default_rng(seed)
    bg = rng.uniform(-1.0, 1.0, n_samples)
    residual = (1.0 - s) * bg  # foreground residual is zero by construction
    grad = residual * (primitive_value - bg)
    estimate = float(grad.mean())
    se = float(grad.std(ddof=1) / math.sqrt(n_samples))
    return McGradientResult(estimate=estimate, standard_error=se, analytic=(s - 1.0) / 3.0)


def alpha_sum_stats(A: WeightMatrix) -> dict[str, tuple[float, float]]:
    """Per-view (mean, std) of row weight sums over covered rays, in percent."""
    if A.rows == 0:
        raise InvalidInputError("weight matrix has no rows")
    sums = A.row_sums()
    covered = A.covered_rows()
    out = {}
    for vid, (start, stop) in A.view_ranges.items():
        seg = sums[start:stop][covered[start:stop]]
        if seg.size == 0:
            out[vid] = (0.0, 0.0)
        else:
            out[vid] = (float(seg.mean() * 100.0), float(seg.std() * 100.0))
    return out


# -- random instances for property suites ------------------------------------

def random_row_stochastic(rng: np.random.Generator, rows: int, cols: int,
                          features: int, max_entries: int = 8):
    """A random row-stochastic weight matrix paired with Gaussian observations.

    Weights are dyadic rationals k / 2^20 adjusted so every row sums to
    exactly 1.0 in floating point, making the row-stochastic premise of the
    Jensen bound hold in real arithmetic, not just approximately.
    """
    denom = 1 << 20
    indptr = [0]
    indices = []
    weights = []
    for _ in range(rows):
        k = int(rng.integers(1, min(max_entries, cols) + 1))
        idx = rng.choice(cols, size=k, replace=False)
        draw = rng.dirichlet(np.ones(k))
        ticks = np.maximum(np.round(draw * denom).astype(np.int64), 1)
        ticks[np.argmax(ticks)] += denom - ticks.sum()
        assert ticks.min() >= 1 and ticks.sum() == denom
        indices.append(idx)
        weights.append(ticks.astype(np.float64) / denom)
        indptr.append(indptr[-1] + k)
    A = WeightMatrix(
        indptr=np.array(indptr, dtype=np.int64),
        indices=np.concatenate(indices),
        weights=np.concatenate(weights),
        cols=cols,
        view_ranges={"instance": (0, rows)},
        lambda_used=1.0,
    )
    values = rng.normal(size=(rows, features))
    view = CameraView(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=rows,
                      world_to_camera=np.eye(4), view_id="instance")
    obs = ObservationSet.from_dense([view], {"instance": values})
    return A, obs
