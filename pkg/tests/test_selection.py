import numpy as np
import pytest

from pointpurify import (
    DataError,
    ParameterError,
    PointCloud,
    SceneStats,
    filter_median,
    kmeans_histograms,
    scene_stats,
    select_subset,
)


def labeled_cloud(labels, scene_id="s"):
    labels = np.asarray(labels)
    return PointCloud(
        positions=np.random.default_rng(0).uniform(size=(len(labels), 3)),
        labels=labels,
        scene_id=scene_id,
    )


def stats_of(scene_id, hist):
    hist = np.asarray(hist, dtype=float)
    nz = hist[hist > 0]
    return SceneStats(
        scene_id=scene_id,
        n_classes=int((hist > 0).sum()),
        entropy_bits=float(-(nz * np.log2(nz)).sum()),
        histogram=hist,
    )


class TestSceneStats:
    def test_uniform_two_class(self):
        s = scene_stats(labeled_cloud([0] * 50 + [1] * 50), 4)
        assert s.n_classes == 2
        assert s.entropy_bits == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(s.histogram, [0.5, 0.5, 0, 0])

    def test_single_class(self):
        s = scene_stats(labeled_cloud([2] * 10), 4)
        assert s.n_classes == 1
        assert s.entropy_bits == 0.0

    def test_hand_entropy(self):
        # proportions [0.5, 0.25, 0.25] -> 1.5 bits
        s = scene_stats(labeled_cloud([0, 0, 1, 2]), 3)
        assert s.entropy_bits == pytest.approx(1.5, abs=1e-12)

    def test_unlabeled_points_excluded(self):
        s = scene_stats(labeled_cloud([-1, -1, 0, 1]), 2)
        np.testing.assert_allclose(s.histogram, [0.5, 0.5])

    def test_no_labeled_points_names_scene(self):
        with pytest.raises(DataError, match="ghost"):
            scene_stats(labeled_cloud([-1, -1], scene_id="ghost"), 2)

    def test_missing_labels(self):
        cloud = PointCloud(positions=np.zeros((1, 3)), scene_id="x")
        with pytest.raises(ParameterError):
            scene_stats(cloud, 2)


class TestFilterMedian:
    def test_identical_scenes_all_kept(self):
        stats = [stats_of(f"s{i}", [0.5, 0.5]) for i in range(5)]
        assert len(filter_median(stats)) == 5

    def test_hand_case(self):
        stats = [
            SceneStats("a", 1, 0.0, np.array([1.0])),
            SceneStats("b", 2, 0.5, np.array([0.5, 0.5])),
            SceneStats("c", 3, 0.9, np.array([0.4, 0.3, 0.3])),
        ]
        kept = filter_median(stats)
        # medians are (2, 0.5); only scenes at or above both survive
        assert [s.scene_id for s in kept] == ["b", "c"]

    def test_single_scene_kept(self):
        assert len(filter_median([stats_of("only", [1.0])])) == 1

    def test_even_count_uses_lower_middle(self):
        stats = [
            SceneStats("a", 1, 0.0, np.array([1.0])),
            SceneStats("b", 2, 0.2, np.array([0.5, 0.5])),
            SceneStats("c", 3, 0.3, np.array([0.4, 0.3, 0.3])),
            SceneStats("d", 4, 0.4, np.array([0.25] * 4)),
        ]
        kept = filter_median(stats)
        # lower-middle medians are (2, 0.2): scenes b, c, d survive
        assert [s.scene_id for s in kept] == ["b", "c", "d"]

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            filter_median([])


class TestKMeans:
    def test_single_cluster(self):
        stats = [stats_of(f"s{i}", h) for i, h in enumerate(([1, 0], [0.5, 0.5], [0, 1]))]
        assert kmeans_histograms(stats, 1, seed=0).tolist() == [0, 0, 0]

    def test_orthogonal_groups_separate(self):
        stats = []
        for i in range(6):
            h = [1.0, 0.0] if i < 3 else [0.0, 1.0]
            stats.append(stats_of(f"s{i}", h))
        labels = kmeans_histograms(stats, 2, seed=3)
        assert len(set(labels[:3])) == 1
        assert len(set(labels[3:])) == 1
        assert labels[0] != labels[3]

    def test_inertia_not_worse_than_first_assignment(self):
        rng = np.random.default_rng(5)
        hists = rng.dirichlet(np.ones(6), size=30)
        stats = [stats_of(f"s{i}", h) for i, h in enumerate(hists)]
        labels = kmeans_histograms(stats, 4, seed=9)
        x = np.stack([s.histogram for s in stats])

        def inertia(assign):
            total = 0.0
            for j in set(assign.tolist()):
                members = x[assign == j]
                total += ((members - members.mean(axis=0)) ** 2).sum()
            return total

        # recompute the greedy farthest-point initial assignment
        centers = [x[np.random.default_rng(9).integers(30)]]
        d2 = ((x - centers[0]) ** 2).sum(axis=1)
        for _ in range(1, 4):
            centers.append(x[int(np.argmax(d2))])
            d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
        first = np.argmin(
            ((x[:, None, :] - np.stack(centers)[None]) ** 2).sum(axis=2), axis=1
        )
        assert inertia(labels) <= inertia(first) + 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        hists = rng.dirichlet(np.ones(4), size=20)
        stats = [stats_of(f"s{i}", h) for i, h in enumerate(hists)]
        a = kmeans_histograms(stats, 3, seed=1)
        b = kmeans_histograms(stats, 3, seed=1)
        assert np.array_equal(a, b)

    def test_too_few_scenes(self):
        with pytest.raises(ParameterError):
            kmeans_histograms([stats_of("a", [1.0])], 2, seed=0)


class TestSelectSubset:
    def test_every_scene_its_own_cluster(self):
        stats = [
            stats_of("a", [1, 0, 0]),
            stats_of("b", [0, 1, 0]),
            stats_of("c", [0, 0, 1]),
        ]
        chosen = select_subset(stats, 3, 3, gamma=0.5, seed=0)
        assert sorted(chosen) == ["a", "b", "c"]

    def test_scoring_example(self):
        # H_norm = [1, 0], N_norm = [0, 1], gamma = 0.5 -> scene 0 wins
        stats = [
            SceneStats("s0", 2, 0.9, np.array([0.6, 0.4, 0.0])),
            SceneStats("s1", 3, 0.1, np.array([0.97, 0.02, 0.01])),
        ]
        # force one cluster so only scores decide
        chosen = select_subset(stats, 1, 1, gamma=0.5, seed=0)
        assert chosen == ["s0"]
        assert stats[0].score == pytest.approx(1.0)
        assert stats[1].score == pytest.approx(0.5)

    def test_quota_with_remainder(self):
        rng = np.random.default_rng(2)
        hists = rng.dirichlet(np.ones(5), size=9)
        stats = [stats_of(f"s{i}", h) for i, h in enumerate(hists)]
        chosen = select_subset(stats, 5, 3, gamma=0.5, seed=4)
        assert len(chosen) == 5
        assert len(set(chosen)) == 5

    def test_deficit_redistributes_forward(self):
        # two tight groups: one has a single scene, quota asks for two
        stats = [
            stats_of("a0", [1.0, 0, 0, 0]),
            stats_of("b0", [0, 1.0, 0, 0]),
            stats_of("b1", [0, 0.95, 0.05, 0]),
            stats_of("b2", [0, 0.9, 0.1, 0]),
        ]
        chosen = select_subset(stats, 4, 2, gamma=0.5, seed=1)
        assert len(chosen) == 4
        assert sorted(chosen) == ["a0", "b0", "b1", "b2"]

    def test_insufficient_scenes_rejected(self):
        with pytest.raises(ParameterError):
            select_subset([stats_of("a", [1.0])], 2, 1, gamma=0.5, seed=0)

    def test_determinism(self):
        rng = np.random.default_rng(8)
        hists = rng.dirichlet(np.ones(4), size=12)
        stats1 = [stats_of(f"s{i}", h) for i, h in enumerate(hists)]
        stats2 = [stats_of(f"s{i}", h) for i, h in enumerate(hists)]
        assert select_subset(stats1, 4, 2, 0.5, seed=3) == select_subset(
            stats2, 4, 2, 0.5, seed=3
        )
