import numpy as np
import pytest

from pointpurify import (
    DataError,
    FeatureField,
    ParameterError,
    SceneSpec,
    assign_labels,
    boundary_mask,
    build_neighbor_index,
    corrupt_features,
    evaluate,
    generate_scene,
    make_prototypes,
    teacher_oracle,
    voxelize,
)
from pointpurify.synth import _sample_box


def small_spec(**kw):
    base = dict(seed=5, points_per_object=150, object_count=3,
                image_size=128, focal=120.0, extents=(2.6, 2.4, 2.2))
    base.update(kw)
    return SceneSpec(**base)


class TestGenerateScene:
    def test_floor_only_scene(self):
        spec = SceneSpec(seed=1, structure=("floor",), object_count=0,
                         noise_sigma=0.0, points_per_object=200)
        scene = generate_scene(spec)
        floor_id = spec.class_names.index("floor")
        assert (scene.cloud.labels == floor_id).all()
        np.testing.assert_array_equal(
            scene.cloud.normals, np.tile([0, 0, 1.0], (200, 1))
        )

    def test_seed_repeat_bitwise_identical(self):
        a = generate_scene(small_spec())
        b = generate_scene(small_spec())
        assert np.array_equal(a.cloud.positions, b.cloud.positions)
        assert np.array_equal(a.cloud.colors, b.cloud.colors)
        assert np.array_equal(a.instances, b.instances)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.feature_map, vb.feature_map)
            assert np.array_equal(va.depth_map, vb.depth_map)

    def test_labels_and_instances_align(self):
        scene = generate_scene(small_spec())
        assert scene.cloud.labels.min() >= 0
        assert scene.instances.min() == 0
        # instances refine labels: one class per instance
        for inst in np.unique(scene.instances):
            assert len(np.unique(scene.cloud.labels[scene.instances == inst])) == 1

    def test_box_faces_follow_area_weighted_multinomial(self):
        rng = np.random.default_rng(0)
        n = 6000
        pts, nrm = _sample_box(rng, n, (0, 0, 0), (0.5, 0.5, 0.5))
        # identify the face by the normal's axis and sign
        axis = np.abs(nrm).argmax(axis=1)
        sign = np.sign(nrm[np.arange(n), axis])
        counts = np.array(
            [((axis == a) & (sign == s)).sum() for a in range(3) for s in (1, -1)]
        )
        p = 1.0 / 6.0
        sigma = np.sqrt(n * p * (1 - p))
        assert np.abs(counts - n * p).max() < 3 * sigma

    def test_renderer_consistency(self):
        # every valid depth pixel unprojects to within a voxel of some point
        spec = small_spec()
        scene = generate_scene(spec)
        grid = voxelize(scene.cloud, 0.02)
        index = build_neighbor_index(scene.cloud.positions)
        for view in scene.views[:2]:
            vv, uu = np.nonzero(view.depth_map > 0)
            rot = view.extrinsics[:3, :3]
            t = view.extrinsics[:3, 3]
            sub = slice(0, len(vv), 17)  # sample pixels for speed
            for v_px, u_px in zip(vv[sub], uu[sub]):
                d = view.depth_map[v_px, u_px]
                cam = np.array(
                    [(u_px - view.cx) / view.fx * d, (v_px - view.cy) / view.fy * d, d]
                )
                world = rot.T @ (cam - t)
                _, dist = index.query_knn_batch(world[None], 1)
                assert dist[0, 0] <= 0.02

    def test_empty_scene_rejected(self):
        with pytest.raises(ParameterError):
            SceneSpec(structure=(), object_count=0)


class TestTeacherOracle:
    def test_zero_noise_gives_exact_instance_vectors(self):
        inst = np.array([0, 0, 1, 1, 2])
        field = teacher_oracle(inst, 8, 0.0, seed=3)
        assert np.array_equal(field.values[0], field.values[1])
        assert np.array_equal(field.values[2], field.values[3])
        assert not np.array_equal(field.values[0], field.values[2])

    def test_cross_instance_similarity_reproducible(self):
        inst = np.array([0, 1])
        a = teacher_oracle(inst, 16, 0.0, seed=9)
        b = teacher_oracle(inst, 16, 0.0, seed=9)
        dot_a = float(a.values[0] @ a.values[1])
        dot_b = float(b.values[0] @ b.values[1])
        assert dot_a == dot_b

    def test_intra_exceeds_inter_with_noise(self):
        scene = generate_scene(small_spec())
        field = teacher_oracle(scene.instances, 32, 0.1, seed=2)
        t = field.values
        inst = scene.instances
        rng = np.random.default_rng(0)
        pairs = rng.integers(0, len(inst), size=(4000, 2))
        sims = (t[pairs[:, 0]] * t[pairs[:, 1]]).sum(axis=1)
        same = inst[pairs[:, 0]] == inst[pairs[:, 1]]
        assert same.any() and (~same).any()
        assert sims[same].mean() > sims[~same].mean()

    def test_oracle_separation_margin(self):
        # default-style scene, sigma_T <= 0.1: intra >= inter + 0.3
        scene = generate_scene(small_spec(seed=11))
        field = teacher_oracle(scene.instances, 32, 0.1, seed=4)
        t = field.values
        inst = scene.instances
        rng = np.random.default_rng(1)
        pairs = rng.integers(0, len(inst), size=(6000, 2))
        sims = (t[pairs[:, 0]] * t[pairs[:, 1]]).sum(axis=1)
        same = inst[pairs[:, 0]] == inst[pairs[:, 1]]
        assert sims[same].mean() >= sims[~same].mean() + 0.3

    def test_dimension_check(self):
        with pytest.raises(ParameterError):
            teacher_oracle(np.arange(10), 8, 0.0, seed=0)


class TestCorruptFeatures:
    def setup_method(self):
        self.rng = np.random.default_rng(6)
        n = 400
        self.pts = self.rng.uniform(size=(n, 3))
        self.labels = (self.pts[:, 0] > 0.5).astype(np.int64)
        self.protos = make_prototypes(2, 8, seed=1)
        self.sem = FeatureField(self.protos[self.labels].astype(float))
        self.index = build_neighbor_index(self.pts)

    def test_identity_when_disabled(self):
        out = corrupt_features(self.sem, self.labels, self.protos, 0.0, 0.0, 1.0,
                               self.index, seed=0)
        assert np.array_equal(out.values, self.sem.values)

    def test_full_flip_single_alternative(self):
        out = corrupt_features(self.sem, self.labels, self.protos, 1.0, 0.0, 1.0,
                               self.index, seed=0)
        wrong = self.protos[1 - self.labels]
        np.testing.assert_array_equal(out.values, wrong)

    def test_boundary_bias_ratio_within_3_sigma(self):
        flip_rate, bias = 0.2, 3.0
        mixed = boundary_mask(self.labels, self.index, 16)
        out = corrupt_features(self.sem, self.labels, self.protos, flip_rate, 0.0,
                               bias, self.index, seed=3)
        flipped = ~np.isclose(out.values, self.sem.values).all(axis=1)
        for mask, p in ((mixed, min(1.0, flip_rate * bias)), (~mixed, flip_rate)):
            n = int(mask.sum())
            k = int(flipped[mask].sum())
            assert abs(k - n * p) <= 3 * np.sqrt(n * p * (1 - p)) + 1e-9

    def test_uncovered_rows_stay_zero(self):
        vals = self.sem.values.copy()
        cov = np.ones(len(vals), dtype=bool)
        cov[:25] = False
        vals[:25] = 0.0
        sem = FeatureField(vals, "point", cov)
        out = corrupt_features(sem, self.labels, self.protos, 0.5, 0.3, 2.0,
                               self.index, seed=5)
        np.testing.assert_array_equal(out.values[:25], 0.0)
        assert np.array_equal(out.coverage, cov)

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            corrupt_features(self.sem, self.labels, self.protos, 1.5, 0.0, 1.0,
                             self.index, seed=0)
        with pytest.raises(ParameterError):
            corrupt_features(self.sem, self.labels, self.protos, 0.5, 0.0, 0.5,
                             self.index, seed=0)


class TestAssignLabels:
    def test_exact_prototype(self):
        protos = make_prototypes(5, 8, seed=2)
        field = FeatureField(protos[[2, 4, 0]].astype(float))
        labels, flagged = assign_labels(field, protos)
        assert labels.tolist() == [2, 4, 0]
        assert flagged == 0

    def test_zero_row_flagged_class_zero(self):
        protos = make_prototypes(3, 4, seed=3)
        vals = np.vstack([protos[1], np.zeros(4)])
        labels, flagged = assign_labels(FeatureField(vals, "point", None), protos)
        assert labels.tolist() == [1, 0]
        assert flagged == 1

    def test_matches_brute_force_argmax(self):
        rng = np.random.default_rng(4)
        protos = make_prototypes(5, 16, seed=5)
        vals = rng.normal(size=(200, 16))
        labels, _ = assign_labels(FeatureField(vals), protos)
        for i in range(200):
            f = vals[i] / np.linalg.norm(vals[i])
            sims = [float(f @ p) for p in protos]
            best = max(range(5), key=lambda c: (sims[c], -c))
            assert labels[i] == best


class TestEvaluate:
    def test_perfect_prediction(self):
        gt = np.array([0, 1, 2, 1, 0])
        rep = evaluate(gt, gt, 3)
        assert rep.miou == 1.0 and rep.macc == 1.0

    def test_hand_confusion_arithmetic(self):
        # confusion [[50, 50], [0, 100]]: IoU = [0.5, 2/3], mIoU = 7/12
        gt = np.array([0] * 100 + [1] * 100)
        pred = np.array([0] * 50 + [1] * 50 + [1] * 100)
        rep = evaluate(pred, gt, 2)
        np.testing.assert_array_equal(rep.confusion, [[50, 50], [0, 100]])
        assert rep.miou == pytest.approx(7 / 12, abs=1e-12)
        assert rep.macc == pytest.approx(0.75, abs=1e-12)

    def test_exclusion_rule(self):
        gt = np.array([0] * 10 + [1] * 10 + [2] * 10)
        pred = gt.copy()
        pred[:5] = 1  # class 0 partially wrong
        rep = evaluate(pred, gt, 3, excluded=(0,))
        iou = rep.per_class_iou
        assert rep.f_miou == pytest.approx((iou[1] + iou[2]) / 2)

    def test_ignore_label(self):
        gt = np.array([-1, -1, 0, 1])
        pred = np.array([1, 0, 0, 1])
        rep = evaluate(pred, gt, 2)
        assert rep.miou == 1.0
        assert rep.confusion.sum() == 2

    def test_iou_never_exceeds_acc(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            gt = rng.integers(0, 4, size=300)
            pred = rng.integers(0, 4, size=300)
            rep = evaluate(pred, gt, 4)
            ok = ~np.isnan(rep.per_class_iou)
            assert (rep.per_class_iou[ok] <= rep.per_class_acc[ok] + 1e-12).all()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        gt = rng.integers(-1, 3, size=200)
        pred = rng.integers(0, 3, size=200)
        perm = rng.permutation(200)
        a = evaluate(pred, gt, 3)
        b = evaluate(pred[perm], gt[perm], 3)
        assert a.miou == b.miou and a.macc == b.macc
        assert np.array_equal(a.confusion, b.confusion)

    def test_confusion_rows_are_gt_counts(self):
        rng = np.random.default_rng(11)
        gt = rng.integers(0, 5, size=400)
        pred = rng.integers(0, 5, size=400)
        rep = evaluate(pred, gt, 5)
        np.testing.assert_array_equal(
            rep.confusion.sum(axis=1), np.bincount(gt, minlength=5)
        )

    def test_errors(self):
        with pytest.raises(ParameterError):
            evaluate(np.zeros(3, int), np.zeros(4, int), 2)
        with pytest.raises(DataError):
            evaluate(np.zeros(3, int), np.full(3, -1), 2)
        with pytest.raises(DataError):
            evaluate(np.array([5]), np.array([0]), 2)
