"""Contrastive distillation of teacher affinities into the student.

For each anchor the teacher's embedding space supplies one positive (the
most similar candidate in the scene) and two kinds of hard negatives:
macro-negatives (globally most dissimilar) and micro-negatives (spatially
near the anchor but least similar within that neighbourhood). The student
is optimized with an InfoNCE objective over these triplets, AdamW with
decoupled weight decay, per-layer learning-rate scaling and a linear
warmup + cosine annealing schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError
from .geometry import NeighborIndex, PointCloud, build_neighbor_index
from .lifting import FeatureField
from .student import (
    DEFAULT_WIDTHS,
    StudentNet,
    backprop_embeddings,
    embed_points,
    featurize_context,
    init_student,
)


@dataclass(frozen=True)
class TeacherField:
    """Frozen unit-norm teacher embeddings (rows within 1e-5 of unit)."""

    values: np.ndarray
    source: str = "oracle"

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ParameterError("teacher field must be (M, D)")
        norms = np.linalg.norm(vals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise DataError("teacher rows must be unit-norm within 1e-5")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class TripletBatch:
    """Anchor/positive/negative point indices for one scene.

    negatives holds the K_macro macro-negatives first, then the K_micro
    micro-negatives. Rows with valid=False could not fill their quota and
    must be skipped by the loss.
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    valid: np.ndarray
    k_macro: int
    k_micro: int

    def __post_init__(self):
        a = self.anchors[self.valid]
        p = self.positives[self.valid]
        n = self.negatives[self.valid]
        if (p == a).any():
            raise DataError("positive equals anchor")
        if (n == a[:, None]).any() or (n == p[:, None]).any():
            raise DataError("negative collides with anchor or positive")
        if self.negatives.shape[1] != self.k_macro + self.k_micro:
            raise ParameterError("negative count != k_macro + k_micro")

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class TrainConfig:
    """Hyperparameters for distillation training.

    Defaults follow the published configuration: 4096 anchors per scene,
    48 macro / 16 micro negatives, tau 0.07, AdamW base lr 1e-4 with
    0.1x/1x/5x input/middle/output scaling, weight decay 1e-5, two linear
    warmup epochs from factor 1e-6 and cosine annealing to 1e-3 of base.
    Desk-scale runs typically shrink anchors to 256 and K to 12+4.
    """

    epochs: int = 50
    anchors_per_scene: int = 4096
    k_macro: int = 48
    k_micro: int = 16
    tau: float = 0.07
    base_lr: float = 1e-4
    lr_input_mult: float = 0.1
    lr_middle_mult: float = 1.0
    lr_output_mult: float = 5.0
    weight_decay: float = 1e-5
    warmup_epochs: float = 2.0
    warmup_start_factor: float = 1e-6
    min_lr_factor: float = 1e-3
    pool_size: int = 4096
    micro_pool_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.anchors_per_scene < 1:
            raise ParameterError("anchors_per_scene must be >= 1")
        if self.k_macro < 0 or self.k_micro < 0 or self.k_macro + self.k_micro < 1:
            raise ParameterError("need at least one negative per anchor")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ParameterError("base_lr must be positive, weight_decay >= 0")
        if self.warmup_epochs < 0:
            raise ParameterError("warmup_epochs must be >= 0")
        if not (0 < self.warmup_start_factor <= 1 and 0 < self.min_lr_factor <= 1):
            raise ParameterError("schedule factors must lie in (0, 1]")
        if self.pool_size < self.k_macro + 1:
            raise ParameterError("pool_size must be >= k_macro + 1")
        if self.k_micro > self.micro_pool_size:
            raise ParameterError("k_micro must be <= micro_pool_size")


def sample_triplets(
    teacher: TeacherField,
    index: NeighborIndex,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TripletBatch:
    """Hybrid anchor/positive/macro/micro sampling against the teacher.

    Anchors are drawn uniformly without replacement (all points when the
    scene is smaller than the quota). Each anchor scores a uniformly
    sampled candidate pool (the full scene when pool_size >= N-1) by
    teacher cosine similarity: the argmax is the positive, the k_macro
    lowest are macro-negatives, and the k_micro teacher-least-similar
    among the anchor's micro_pool_size spatial neighbours are
    micro-negatives. All ties break by ascending point index.
    """
    t_vals = teacher.values
    n = t_vals.shape[0]
    if len(index) != n:
        raise ParameterError("index and teacher cover different point counts")
    k_total = cfg.k_macro + cfg.k_micro
    if n < k_total + 2:
        raise DataError(
            f"scene has {n} points, fewer than K+2 = {k_total + 2}; skipped"
        )
    a_count = min(cfg.anchors_per_scene, n)
    anchors = rng.choice(n, size=a_count, replace=False).astype(np.int64)

    full_scan = cfg.pool_size >= n - 1
    micro_nbrs = None
    if cfg.k_micro > 0:
        k_nn = min(cfg.micro_pool_size + 1, n)
        nbr_idx, _ = index.query_knn_batch(index.points[anchors], k_nn)
        micro_nbrs = nbr_idx

    positives = np.empty(a_count, dtype=np.int64)
    negatives = np.empty((a_count, k_total), dtype=np.int64)
    valid = np.ones(a_count, dtype=bool)
    all_idx = np.arange(n, dtype=np.int64)

    for j, a in enumerate(anchors):
        if full_scan:
            pool = np.delete(all_idx, a)
        else:
            draw = rng.choice(n - 1, size=cfg.pool_size, replace=False)
            pool = draw + (draw >= a)
        sims = t_vals[pool] @ t_vals[a]
        order = np.lexsort((pool, sims))  # ascending (similarity, index)
        # argmax with lowest-index tie-break
        top_sim = sims[order[-1]]
        pos = int(pool[sims == top_sim].min())
        positives[j] = pos

        macro = []
        for o in order:
            cand = int(pool[o])
            if cand == pos:
                continue
            macro.append(cand)
            if len(macro) == cfg.k_macro:
                break
        if len(macro) < cfg.k_macro:
            valid[j] = False
            negatives[j] = -1
            continue

        micro = []
        if cfg.k_micro > 0:
            nbrs = micro_nbrs[j]
            nbrs = nbrs[(nbrs != a) & (nbrs != pos)]
            if nbrs.size < cfg.k_micro:
                valid[j] = False
                negatives[j] = -1
                continue
            nsims = t_vals[nbrs] @ t_vals[a]
            norder = np.lexsort((nbrs, nsims))
            micro = [int(nbrs[o]) for o in norder[: cfg.k_micro]]
        negatives[j] = macro + micro
    return TripletBatch(
        anchors=anchors, positives=positives, negatives=negatives,
        valid=valid, k_macro=cfg.k_macro, k_micro=cfg.k_micro,
    )


def infonce_loss(student_embeds: FeatureField, batch: TripletBatch, tau: float):
    """InfoNCE over unit-sphere embeddings with exact analytic gradients.

    loss = mean over valid anchors of
        -log( exp(s_ap/tau) / (exp(s_ap/tau) + sum_k exp(s_ank/tau)) )
    with s = dot product. The log-sum-exp is max-subtracted. Returns
    (loss, gradient) where the gradient covers every participating
    embedding row and is zero elsewhere.
    """
    if tau <= 0:
        raise ParameterError("tau must be positive")
    g_all = student_embeds.values
    norms = np.linalg.norm(g_all, axis=1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise DataError("student embeddings must be unit rows within 1e-4")
    if batch.num_valid == 0:
        raise ParameterError("empty batch: no valid anchors")
    sel = batch.valid
    a_idx = batch.anchors[sel]
    p_idx = batch.positives[sel]
    n_idx = batch.negatives[sel]
    ga = g_all[a_idx]
    gp = g_all[p_idx]
    gn = g_all[n_idx]  # (A, K, D)

    s_ap = (ga * gp).sum(axis=1)
    s_an = np.einsum("ad,akd->ak", ga, gn)
    logits = np.concatenate([s_ap[:, None], s_an], axis=1) / tau
    m = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - m)
    denom = expd.sum(axis=1, keepdims=True)
    log_probs = logits - m - np.log(denom)
    loss = float(-log_probs[:, 0].mean())

    probs = expd / denom
    a_valid = a_idx.shape[0]
    # d loss / d logit: (p - onehot(0)) / A_valid, then / tau for similarity
    dl = probs / (a_valid * tau)
    dl0 = dl[:, 0] - 1.0 / (a_valid * tau)
    dlk = dl[:, 1:]

    grad = np.zeros_like(g_all)
    grad_a = dl0[:, None] * gp + np.einsum("ak,akd->ad", dlk, gn)
    np.add.at(grad, a_idx, grad_a)
    np.add.at(grad, p_idx, dl0[:, None] * ga)
    contrib_n = dlk[:, :, None] * ga[:, None, :]
    np.add.at(grad, n_idx.reshape(-1), contrib_n.reshape(-1, g_all.shape[1]))
    return loss, grad


@dataclass(frozen=True)
class LayerRates:
    """Learning rates for the input layer, middle layers, output layer."""

    input: float
    middle: float
    output: float

    def for_layer(self, layer: int, num_layers: int) -> float:
        if layer == 0:
            return self.input
        if layer == num_layers - 1:
            return self.output
        return self.middle


def lr_at(cfg: TrainConfig, epoch: float) -> LayerRates:
    """Schedule value at a (possibly fractional) epoch in [0, epochs].

    Linear warmup from warmup_start_factor * base_lr to base_lr over
    warmup_epochs, then cosine annealing down to min_lr_factor * base_lr
    at the final epoch; endpoints are exact. Per-layer multipliers are
    applied on top.
    """
    if epoch < 0 or epoch > cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    warm = cfg.warmup_epochs
    if epoch < warm:
        t = epoch / warm
        s = cfg.base_lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * t)
    elif epoch == warm:
        s = cfg.base_lr
    elif epoch >= cfg.epochs:
        s = cfg.base_lr * cfg.min_lr_factor
    else:
        t = (epoch - warm) / (cfg.epochs - warm)
        cosine = 0.5 * (1.0 + np.cos(np.pi * t))
        s = cfg.base_lr * (cfg.min_lr_factor + (1.0 - cfg.min_lr_factor) * cosine)
    return LayerRates(
        input=s * cfg.lr_input_mult,
        middle=s * cfg.lr_middle_mult,
        output=s * cfg.lr_output_mult,
    )


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def init(cls, params: list[np.ndarray]) -> "AdamWState":
        return cls(
            step=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamWState,
    lrs,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamWState:
    """One decoupled-weight-decay adaptive update with bias correction.

    ``lrs`` is a per-parameter list or a scalar. Parameters are updated
    in place, in list order.
    """
    if len(params) != len(grads):
        raise ParameterError("params and grads differ in length")
    if np.isscalar(lrs):
        lrs = [float(lrs)] * len(params)
    if len(lrs) != len(params):
        raise ParameterError("lrs must match params")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v, lr in zip(params, grads, state.m, state.v, lrs):
        if p.shape != g.shape:
            raise ParameterError("gradient shape mismatch")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


@dataclass
class LogRow:
    epoch: int
    scene_id: str
    mean_loss: float
    lr_input: float
    lr_middle: float
    lr_output: float
    wall_ms: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    epoch_mean_loss: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "scene_id", "mean_loss", "lr_input", "lr_middle",
                 "lr_output", "wall_ms"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.epoch, r.scene_id, repr(r.mean_loss), repr(r.lr_input),
                     repr(r.lr_middle), repr(r.lr_output), "%.3f" % r.wall_ms]
                )


def train(
    scenes: list[tuple[PointCloud, TeacherField]],
    cfg: TrainConfig,
    *,
    widths=DEFAULT_WIDTHS,
    student_seed: int | None = None,
    k_ctx: int = 16,
    semantic_fields: list[FeatureField] | None = None,
    net: StudentNet | None = None,
) -> tuple[StudentNet, TrainLog]:
    """Full distillation loop; fully reproducible from cfg.seed.

    Per epoch, scenes are visited in a seeded shuffled order; per scene the
    pipeline is featurize -> sample triplets -> forward -> loss ->
    backward -> AdamW step. Scene-level errors are logged and the scene
    skipped; an epoch in which every scene fails aborts training.
    """
    if not scenes:
        raise ParameterError("need at least one scene")
    if semantic_fields is not None and len(semantic_fields) != len(scenes):
        raise ParameterError("semantic_fields must align with scenes")
    if net is None:
        net = init_student(widths, cfg.seed if student_seed is None else student_seed)
    log = TrainLog()

    prepared = []
    for si, (cloud, teacher) in enumerate(scenes):
        try:
            if len(teacher) != len(cloud):
                raise DataError(
                    f"scene {cloud.scene_id!r}: teacher rows != point count"
                )
            sem = semantic_fields[si] if semantic_fields is not None else None
            desc = featurize_context(cloud, k_ctx, semantic=sem)
            if desc.shape[1] != net.in_dim:
                raise ParameterError(
                    f"scene {cloud.scene_id!r}: descriptor dim {desc.shape[1]} "
                    f"!= net input {net.in_dim}"
                )
            index = build_neighbor_index(cloud.positions)
            prepared.append((cloud.scene_id, desc, index, teacher))
        except (DataError, ParameterError) as exc:
            log.warnings.append(str(exc))
            prepared.append(None)
    if all(p is None for p in prepared):
        raise DataError("all scenes failed preparation: " + "; ".join(log.warnings))

    params = net.parameters()
    state = AdamWState.init(params)
    n_layers = net.num_layers
    for epoch in range(cfg.epochs):
        rates = lr_at(cfg, epoch)
        lrs = [rates.for_layer(i // 2, n_layers) for i in range(len(params))]
        order = np.random.default_rng((cfg.seed, 1000 + epoch)).permutation(len(scenes))
        epoch_losses = []
        for scene_pos in order:
            entry = prepared[scene_pos]
            if entry is None:
                continue
            scene_id, desc, index, teacher = entry
            t0 = time.perf_counter()
            rng = np.random.default_rng((cfg.seed, 2000 + epoch, int(scene_pos)))
            try:
                batch = sample_triplets(teacher, index, cfg, rng)
                embeds, cache = embed_points(net, desc)
                loss, g_emb = infonce_loss(embeds, batch, cfg.tau)
                grads = backprop_embeddings(net, cache, g_emb)
            except (DataError, ParameterError) as exc:
                log.warnings.append(f"epoch {epoch} scene {scene_id!r}: {exc}")
                continue
            adamw_step(params, grads, state, lrs, cfg.weight_decay)
            net.version += 1
            wall_ms = (time.perf_counter() - t0) * 1e3
            log.rows.append(
                LogRow(epoch, scene_id, loss, rates.input, rates.middle,
                       rates.output, wall_ms)
            )
            epoch_losses.append(loss)
        if not epoch_losses:
            raise DataError(f"all scenes failed in epoch {epoch}")
        log.epoch_mean_loss.append(float(np.mean(epoch_losses)))
    return net, log
