"""Synthetic scenes with ground truth, a teacher-embedding oracle,
controlled semantic corruption, and segmentation metrics.

Scenes are rooms (floor/ceiling/walls) plus primitive objects sampled on
their surfaces with analytic normals. Views are rendered by z-buffer point
splatting; each valid pixel carries the class prototype of the frontmost
point, which stands in for a 2D feature backbone whose noise we control
explicitly via corrupt_features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distill import TeacherField
from .errors import DataError, ParameterError
from .geometry import NeighborIndex, PointCloud
from .lifting import CameraView, FeatureField

_PROTO_TAG = 7001
_GEOM_TAG = 7002
_VIEW_TAG = 7003

STRUCTURAL_CLASSES = ("floor", "ceiling", "wall")


def make_prototypes(class_count: int, dim: int, seed: int) -> np.ndarray:
    """Random unit prototype vectors, one per class, reproducible from seed."""
    if dim < 2 or class_count < 1:
        raise ParameterError("need class_count >= 1 and dim >= 2")
    rng = np.random.default_rng((seed, _PROTO_TAG))
    vecs = rng.normal(size=(class_count, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic room scene."""

    seed: int = 0
    extents: tuple[float, float, float] = (3.2, 2.8, 2.4)
    object_count: int = 6
    shape_palette: tuple[str, ...] = ("box", "cylinder", "sphere")
    structure: tuple[str, ...] = STRUCTURAL_CLASSES
    points_per_object: int = 700
    noise_sigma: float = 0.004
    class_names: tuple[str, ...] = STRUCTURAL_CLASSES + ("box", "cylinder", "sphere")
    feature_dim: int = 32
    feature_noise: float = 0.0
    num_views: int = 6
    image_size: int = 224
    focal: float = 200.0
    scene_id: str = ""
    prototypes: np.ndarray | None = None

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise ParameterError("room extents must be three positive lengths")
        if self.points_per_object < 10:
            raise ParameterError("points_per_object must be >= 10")
        unknown = set(self.shape_palette) - {"box", "cylinder", "sphere"}
        if unknown:
            raise ParameterError(f"unknown shapes in palette: {sorted(unknown)}")
        bad_structure = set(self.structure) - set(STRUCTURAL_CLASSES)
        if bad_structure:
            raise ParameterError(f"unknown structural surfaces: {sorted(bad_structure)}")
        for name in self.shape_palette + self.structure:
            if name not in self.class_names:
                raise ParameterError(f"class {name!r} missing from class list")
        if self.object_count == 0 and not self.structure:
            raise ParameterError("scene would be empty: no structure and no objects")
        if not (4 <= self.num_views <= 8):
            raise ParameterError("num_views must lie in [4, 8]")
        if self.prototypes is None:
            protos = make_prototypes(len(self.class_names), self.feature_dim, self.seed)
        else:
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.shape != (len(self.class_names), self.feature_dim):
                raise ParameterError("prototypes must be (num_classes, feature_dim)")
            if np.abs(np.linalg.norm(protos, axis=1) - 1.0).max() > 1e-6:
                raise DataError("prototypes must be unit rows")
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                if np.array_equal(protos[i], protos[j]):
                    raise DataError("prototypes must be pairwise distinct")
        protos = np.ascontiguousarray(protos)
        protos.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))

    @property
    def class_count(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class Scene:
    """A generated scene: cloud, per-point instance ids, rendered views."""

    cloud: PointCloud
    instances: np.ndarray
    views: list[CameraView]
    prototypes: np.ndarray
    class_names: tuple[str, ...]


def _sample_rect(rng, n, origin, edge_u, edge_v, normal):
    u = rng.random(n)[:, None]
    v = rng.random(n)[:, None]
    pts = np.asarray(origin) + u * np.asarray(edge_u) + v * np.asarray(edge_v)
    nrm = np.tile(np.asarray(normal, dtype=np.float64), (n, 1))
    return pts, nrm


def _sample_box(rng, n, center, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random(n) * 2.0 - 1.0
    v = rng.random(n) * 2.0 - 1.0
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = faces == f
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        o1, o2 = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, o1] = u[m] * half[o1]
        pts[m, o2] = v[m] * half[o2]
        nrm[m, axis] = sign
    return pts + np.asarray(center), nrm


def _sample_cylinder(rng, n, center, radius, height):
    lateral = 2.0 * np.pi * radius * height
    cap = np.pi * radius * radius
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.random(n) * 2.0 * np.pi
    rr = radius * np.sqrt(rng.random(n))
    zz = (rng.random(n) - 0.5) * height
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = zz[side]
    nrm[side, 0] = np.cos(theta[side])
    nrm[side, 1] = np.sin(theta[side])
    for which, sign in ((1, 1.0), (2, -1.0)):
        m = part == which
        pts[m, 0] = rr[m] * np.cos(theta[m])
        pts[m, 1] = rr[m] * np.sin(theta[m])
        pts[m, 2] = sign * height / 2.0
        nrm[m, 2] = sign
    return pts + np.asarray(center), nrm


def _sample_sphere(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v, v


def _look_at(position, target):
    """World-to-camera rigid transform, +x right, +y down, +z forward."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    return ext


def generate_scene(spec: SceneSpec) -> Scene:
    """Sample a room scene and render its views; deterministic from seed."""
    ex, ey, ez = spec.extents
    rng = np.random.default_rng((spec.seed, _GEOM_TAG))
    name_to_id = {name: i for i, name in enumerate(spec.class_names)}

    chunks = []  # (points, normals, class_id, instance_id)
    inst = 0
    ppo = spec.points_per_object

    def add(pts, nrm, cls):
        nonlocal inst
        chunks.append((pts, nrm, cls, inst))
        inst += 1

    if "floor" in spec.structure:
        pts, nrm = _sample_rect(rng, ppo, (0, 0, 0), (ex, 0, 0), (0, ey, 0), (0, 0, 1))
        add(pts, nrm, name_to_id["floor"])
    if "ceiling" in spec.structure:
        pts, nrm = _sample_rect(rng, ppo, (0, 0, ez), (ex, 0, 0), (0, ey, 0), (0, 0, -1))
        add(pts, nrm, name_to_id["ceiling"])
    if "wall" in spec.structure:
        half = max(ppo // 2, 10)
        for origin, eu, ev, normal in (
            ((0, 0, 0), (ex, 0, 0), (0, 0, ez), (0, 1, 0)),
            ((0, ey, 0), (ex, 0, 0), (0, 0, ez), (0, -1, 0)),
            ((0, 0, 0), (0, ey, 0), (0, 0, ez), (1, 0, 0)),
            ((ex, 0, 0), (0, ey, 0), (0, 0, ez), (-1, 0, 0)),
        ):
            pts, nrm = _sample_rect(rng, half, origin, eu, ev, normal)
            add(pts, nrm, name_to_id["wall"])

    margin = min(0.55, 0.25 * min(ex, ey))
    for _ in range(spec.object_count):
        shape = spec.shape_palette[int(rng.integers(len(spec.shape_palette)))]
        cx = rng.uniform(margin, ex - margin)
        cy = rng.uniform(margin, ey - margin)
        if shape == "box":
            hs = rng.uniform(0.12, 0.40, size=3)
            pts, nrm = _sample_box(rng, ppo, (cx, cy, hs[2]), hs)
        elif shape == "cylinder":
            radius = rng.uniform(0.10, 0.30)
            height = rng.uniform(0.30, 0.90)
            pts, nrm = _sample_cylinder(rng, ppo, (cx, cy, height / 2.0), radius, height)
        else:
            radius = rng.uniform(0.12, 0.35)
            pts, nrm = _sample_sphere(rng, ppo, (cx, cy, radius), radius)
        add(pts, nrm, name_to_id[shape])

    positions = np.concatenate([c[0] for c in chunks])
    normals = np.concatenate([c[1] for c in chunks])
    labels = np.concatenate([np.full(len(c[0]), c[2], dtype=np.int64) for c in chunks])
    instances = np.concatenate([np.full(len(c[0]), c[3], dtype=np.int64) for c in chunks])
    if spec.noise_sigma > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma, positions.shape)
    base_colors = rng.uniform(0.15, 0.85, size=(inst, 3))
    colors = np.clip(
        base_colors[instances] + rng.uniform(-0.05, 0.05, positions.shape), 0.0, 1.0
    )
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(
        positions=positions, colors=colors, normals=normals, labels=labels,
        scene_id=spec.scene_id or f"scene-{spec.seed}",
    )

    views = _render_views(spec, cloud)
    instances.setflags(write=False)
    return Scene(
        cloud=cloud, instances=instances, views=views,
        prototypes=spec.prototypes, class_names=spec.class_names,
    )


def _render_views(spec: SceneSpec, cloud: PointCloud) -> list[CameraView]:
    """Z-buffer point splatting into prototype feature maps + depth maps."""
    ex, ey, ez = spec.extents
    center = np.array([ex / 2.0, ey / 2.0, ez / 2.0])
    ring = 0.42 * min(ex, ey)
    size = spec.image_size
    c_px = (size - 1) / 2.0
    rng = np.random.default_rng((spec.seed, _VIEW_TAG))
    protos = spec.prototypes
    labels = cloud.labels
    views = []
    for k in range(spec.num_views):
        theta = 2.0 * np.pi * k / spec.num_views
        position = center + np.array(
            [ring * np.cos(theta), ring * np.sin(theta), 0.14 * ez]
        )
        ext = _look_at(position, center)
        cam = cloud.positions @ ext[:3, :3].T + ext[:3, 3]
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = spec.focal * cam[:, 0] / depth + c_px
            v = spec.focal * cam[:, 1] / depth + c_px
        ok = (depth > 1e-6) & (u >= 0) & (u < size) & (v >= 0) & (v < size)
        iu = np.clip(np.rint(u[ok]).astype(np.int64), 0, size - 1)
        iv = np.clip(np.rint(v[ok]).astype(np.int64), 0, size - 1)
        pid = iv * size + iu
        pt_idx = np.flatnonzero(ok)
        order = np.lexsort((pt_idx, depth[ok], pid))
        pid_sorted = pid[order]
        first = np.unique(pid_sorted, return_index=True)[1]
        win_pid = pid_sorted[first]
        win_pt = pt_idx[order][first]

        feat = np.zeros((size * size, spec.feature_dim), dtype=np.float64)
        dmap = np.zeros(size * size, dtype=np.float64)
        feat[win_pid] = protos[labels[win_pt]]
        if spec.feature_noise > 0:
            feat[win_pid] += rng.normal(0.0, spec.feature_noise,
                                        size=(len(win_pid), spec.feature_dim))
        dmap[win_pid] = depth[win_pt]
        views.append(
            CameraView(
                fx=spec.focal, fy=spec.focal, cx=c_px, cy=c_px,
                extrinsics=ext, width=size, height=size,
                feature_map=feat.reshape(size, size, spec.feature_dim),
                depth_map=dmap.reshape(size, size),
            )
        )
    return views


def teacher_oracle(instances, d_t: int, sigma_t: float, seed: int) -> TeacherField:
    """Instance-coherent teacher embeddings.

    Each instance gets a fixed random unit vector; each point gets its
    instance vector plus Gaussian noise sigma_t, renormalized. Intra-
    instance similarity therefore dominates inter-instance similarity for
    small sigma_t.
    """
    inst = np.asarray(instances, dtype=np.int64)
    if inst.ndim != 1 or inst.size == 0 or inst.min() < 0:
        raise ParameterError("instances must be a nonempty array of ids >= 0")
    n_inst = int(inst.max()) + 1
    if d_t < n_inst:
        raise ParameterError(f"d_t = {d_t} < number of instances {n_inst}")
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(n_inst, d_t))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    vals = basis[inst]
    if sigma_t > 0:
        vals = vals + sigma_t * rng.normal(size=(inst.size, d_t))
    vals /= np.linalg.norm(vals, axis=1, keepdims=True)
    return TeacherField(values=vals, source="oracle")


def boundary_mask(labels, index: NeighborIndex, k: int = 16) -> np.ndarray:
    """Points whose k-NN neighbourhood mixes labels (object boundaries)."""
    labels = np.asarray(labels, dtype=np.int64)
    idx, _ = index.query_knn_batch(index.points, min(k, len(index)))
    return (labels[idx] != labels[:, None]).any(axis=1)


def corrupt_features(
    sem: FeatureField,
    labels,
    prototypes,
    flip_rate: float,
    sigma_n: float,
    boundary_bias: float,
    index: NeighborIndex,
    seed: int,
    boundary_k: int = 16,
) -> FeatureField:
    """Flip a fraction of features to a wrong class prototype + add noise.

    Points in label-mixed neighbourhoods flip with probability
    min(1, flip_rate * boundary_bias). Corruption touches covered rows
    only, so zero rows of unseen points stay zero.
    """
    if not (0.0 <= flip_rate <= 1.0):
        raise ParameterError("flip_rate must lie in [0, 1]")
    if boundary_bias < 1.0:
        raise ParameterError("boundary_bias must be >= 1")
    if sigma_n < 0:
        raise ParameterError("sigma_n must be >= 0")
    labels = np.asarray(labels, dtype=np.int64)
    protos = np.asarray(prototypes, dtype=np.float64)
    n = len(sem)
    c = protos.shape[0]
    if c < 2 and flip_rate > 0:
        raise ParameterError("flipping needs at least two classes")
    rng = np.random.default_rng(seed)
    mixed = boundary_mask(labels, index, boundary_k)
    p_flip = np.where(mixed, min(1.0, flip_rate * boundary_bias), flip_rate)
    u = rng.random(n)
    offsets = rng.integers(1, c, size=n) if c > 1 else np.zeros(n, dtype=np.int64)
    noise = rng.normal(0.0, 1.0, size=(n, sem.dim)) if sigma_n > 0 else None

    values = sem.values.copy()
    covered = sem.coverage
    flips = (u < p_flip) & covered
    wrong = (labels + offsets) % c
    values[flips] = protos[wrong[flips]]
    if sigma_n > 0:
        values[covered] += sigma_n * noise[covered]
    return FeatureField(values, sem.granularity, covered)


def assign_labels(features: FeatureField, prototypes):
    """Nearest-prototype classification by cosine similarity.

    Zero feature rows map to class 0 and are counted in the returned flag;
    similarity ties resolve to the lowest class id. Returns (labels,
    zero_row_count).
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    if np.abs(np.linalg.norm(protos, axis=1) - 1.0).max() > 1e-4:
        raise DataError("prototype rows must be unit-norm")
    vals = features.values
    norms = np.linalg.norm(vals, axis=1)
    zero = norms < 1e-30
    safe = np.where(zero, 1.0, norms)
    sims = (vals / safe[:, None]) @ protos.T
    labels = np.argmax(sims, axis=1).astype(np.int64)  # first max = lowest id
    labels[zero] = 0
    return labels, int(zero.sum())


@dataclass
class EvalReport:
    """Segmentation metrics plus the confusion matrix they derive from.

    Rows of the confusion matrix are ground-truth classes. Per-class
    entries are NaN for classes absent from the ground truth; means run
    over present classes, foreground means additionally drop the excluded
    (structural) classes.
    """

    per_class_iou: np.ndarray
    per_class_acc: np.ndarray
    miou: float
    macc: float
    f_miou: float
    f_macc: float
    confusion: np.ndarray
    excluded: tuple[int, ...]

    def to_json_dict(self) -> dict:
        def clean(x):
            return None if np.isnan(x) else float(x)

        return {
            "per_class_iou": [clean(x) for x in self.per_class_iou],
            "per_class_acc": [clean(x) for x in self.per_class_acc],
            "miou": clean(self.miou),
            "macc": clean(self.macc),
            "f_miou": clean(self.f_miou),
            "f_macc": clean(self.f_macc),
            "confusion": self.confusion.tolist(),
            "excluded": list(self.excluded),
        }


def evaluate(pred, gt, class_count: int, excluded=()) -> EvalReport:
    """Confusion-matrix metrics: IoU_c = TP/(TP+FP+FN), Acc_c = TP/(TP+FN).

    Ground-truth label -1 means ignore. Means run over classes present in
    the ground truth; f-variants additionally exclude the given class ids.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ParameterError("pred and gt must be equal-length 1-D arrays")
    if class_count < 1:
        raise ParameterError("class_count must be >= 1")
    if pred.min() < 0 or pred.max() >= class_count:
        raise DataError("pred ids outside [0, class_count)")
    if gt.min() < -1 or gt.max() >= class_count:
        raise DataError("gt ids outside [-1, class_count)")
    keep = gt >= 0
    if not keep.any():
        raise DataError("no valid (non-ignored) points to evaluate")
    flat = gt[keep] * class_count + pred[keep]
    confusion = np.bincount(flat, minlength=class_count * class_count)
    confusion = confusion.reshape(class_count, class_count).astype(np.int64)

    tp = np.diag(confusion).astype(np.float64)
    gt_count = confusion.sum(axis=1).astype(np.float64)
    pred_count = confusion.sum(axis=0).astype(np.float64)
    present = gt_count > 0
    union = gt_count + pred_count - tp
    iou = np.full(class_count, np.nan)
    acc = np.full(class_count, np.nan)
    iou[present] = tp[present] / union[present]
    acc[present] = tp[present] / gt_count[present]

    fg = present.copy()
    for c in excluded:
        if 0 <= c < class_count:
            fg[c] = False

    def mean_or_nan(vals, mask):
        return float(vals[mask].mean()) if mask.any() else float("nan")

    return EvalReport(
        per_class_iou=iou,
        per_class_acc=acc,
        miou=mean_or_nan(iou, present),
        macc=mean_or_nan(acc, present),
        f_miou=mean_or_nan(iou, fg),
        f_macc=mean_or_nan(acc, fg),
        confusion=confusion,
        excluded=tuple(int(c) for c in excluded),
    )
