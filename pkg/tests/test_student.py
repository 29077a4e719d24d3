import numpy as np
import pytest

from pointpurify import (
    ParameterError,
    PointCloud,
    UsageError,
    backprop_embeddings,
    embed_points,
    featurize_context,
    init_student,
    load_student,
    save_student,
)


def reference_forward(net, x):
    """Independent re-implementation of the forward pass (oracle)."""
    h = np.asarray(x, dtype=np.float64)
    for li in range(net.num_layers):
        h = h @ net.weights[li].T + net.biases[li]
        if li < net.num_layers - 1:
            h = np.where(h > 0, h, 0.0)
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def fd_gradients(net, x, upstream, h=1e-5):
    """Central finite differences of sum(upstream * embeddings)."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float((reference_forward(net, x) * upstream).sum())
            flat[i] = orig - h
            dn = float((reference_forward(net, x) * upstream).sum())
            flat[i] = orig
            gflat[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


class TestFeaturize:
    def make_cloud(self, pts):
        pts = np.asarray(pts, dtype=float)
        normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
        return PointCloud(positions=pts, normals=normals)

    def test_planar_neighborhood_eigenvalues(self):
        # symmetric ring + center on z=0: eigenvalues exactly (1/2, 1/2, 0)
        theta = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        ring = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(8)])
        pts = np.vstack([[0.0, 0.0, 0.0], ring])
        desc = featurize_context(self.make_cloud(pts), len(pts))
        np.testing.assert_allclose(desc[0, 9:12], [0.5, 0.5, 0.0], atol=1e-9)
        np.testing.assert_allclose(desc[:, 9:12].sum(axis=1), 1.0, atol=1e-9)

    def test_rod_neighborhood(self):
        pts = np.column_stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)])
        desc = featurize_context(self.make_cloud(pts), 8)
        eigs = desc[:, 9:12]
        np.testing.assert_allclose(eigs[:, 0], 1.0, atol=1e-9)
        np.testing.assert_allclose(eigs[:, 1:], 0.0, atol=1e-9)

    def test_isotropic_shell(self):
        # octahedron vertices around the origin: exactly isotropic covariance
        shell = np.vstack([np.eye(3), -np.eye(3)])
        pts = np.vstack([[0.0, 0.0, 0.0], shell])
        desc = featurize_context(self.make_cloud(pts), len(pts))
        np.testing.assert_allclose(desc[0, 9:12], 1 / 3, atol=1e-9)

    def test_descriptor_width_and_concat(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(30, 3))
        cloud = self.make_cloud(pts)
        desc = featurize_context(cloud, 8)
        assert desc.shape == (30, 13)
        from pointpurify import FeatureField

        sem = FeatureField(rng.normal(size=(30, 5)))
        assert featurize_context(cloud, 8, semantic=sem).shape == (30, 18)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = init_student((13, 64, 64, 64, 32), 7)
        b = init_student((13, 64, 64, 64, 32), 7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_different_seeds_differ(self):
        a = init_student((13, 8, 4), 1)
        b = init_student((13, 8, 4), 2)
        assert any(
            not np.array_equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_parameter_count_closed_form(self):
        net = init_student((13, 64, 64, 64, 32), 0)
        expected = 13 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 32 + 32
        assert net.parameter_count() == expected == 11_296

    def test_glorot_scale_and_zero_bias(self):
        net = init_student((10, 20), 5)
        limit = np.sqrt(6.0 / 30)
        assert np.abs(net.weights[0]).max() <= limit
        assert np.array_equal(net.biases[0], np.zeros(20))

    def test_invalid_widths(self):
        with pytest.raises(ParameterError):
            init_student((5,), 0)
        with pytest.raises(ParameterError):
            init_student((5, 0, 3), 0)


class TestForward:
    def test_constant_network(self):
        net = init_student((4, 3), 0)
        net.weights[0][:] = 0.0
        net.biases[0][:] = [3.0, 0.0, 4.0]
        field, _ = embed_points(net, np.random.default_rng(0).normal(size=(6, 4)))
        np.testing.assert_allclose(field.values, np.tile([0.6, 0.0, 0.8], (6, 1)))

    def test_duplicate_rows_embed_identically(self):
        net = init_student((5, 8, 4), 3)
        x = np.random.default_rng(1).normal(size=(4, 5))
        x[2] = x[0]
        field, _ = embed_points(net, x)
        assert np.array_equal(field.values[2], field.values[0])

    def test_unit_rows(self):
        net = init_student((6, 16, 8), 5)
        x = np.random.default_rng(2).normal(size=(50, 6))
        field, _ = embed_points(net, x)
        np.testing.assert_allclose(np.linalg.norm(field.values, axis=1), 1.0, atol=1e-6)

    def test_matches_independent_reimplementation(self):
        net = init_student((7, 11, 9, 5), 9)
        x = np.random.default_rng(3).normal(size=(20, 7))
        field, _ = embed_points(net, x)
        np.testing.assert_allclose(field.values, reference_forward(net, x),
                                   rtol=0, atol=1e-12)

    def test_permutation_purity(self):
        net = init_student((5, 8, 4), 11)
        x = np.random.default_rng(4).normal(size=(10, 5))
        perm = np.random.default_rng(5).permutation(10)
        a, _ = embed_points(net, x)
        b, _ = embed_points(net, x[perm])
        assert np.array_equal(a.values[perm], b.values)

    def test_dim_mismatch(self):
        net = init_student((5, 4), 0)
        with pytest.raises(ParameterError):
            embed_points(net, np.zeros((3, 6)))


class TestBackprop:
    def test_zero_upstream_gives_zero_grads(self):
        net = init_student((5, 8, 4), 2)
        x = np.random.default_rng(0).normal(size=(12, 5))
        _, cache = embed_points(net, x)
        grads = backprop_embeddings(net, cache, np.zeros((12, 4)))
        for g in grads:
            assert np.array_equal(g, np.zeros_like(g))

    def test_single_linear_layer_weight_gradient(self):
        # one linear layer: the weight gradient is delta^T x, where delta is the
        # upstream gradient pushed through the normalization Jacobian
        net = init_student((3, 2), 1)
        x = np.array([[1.0, 2.0, -1.0]])
        field, cache = embed_points(net, x)
        upstream = np.array([[0.3, -0.7]])
        grads = backprop_embeddings(net, cache, upstream)
        z = x @ net.weights[0].T + net.biases[0]
        norm = np.linalg.norm(z)
        g = z / norm
        delta = (upstream - (upstream * g).sum() * g) / norm
        np.testing.assert_allclose(grads[0], delta.T @ x, atol=1e-12)
        np.testing.assert_allclose(grads[1], delta[0], atol=1e-12)

    def test_gradients_match_finite_differences(self):
        net = init_student((6, 10, 8, 5), 13)
        rng = np.random.default_rng(21)
        x = rng.normal(size=(32, 6))
        upstream = rng.normal(size=(32, 5))
        _, cache = embed_points(net, x)
        analytic = backprop_embeddings(net, cache, upstream)
        numeric = fd_gradients(net, x, upstream)
        for a, f in zip(analytic, numeric):
            assert rel_err(a, f).max() < 1e-4

    def test_stale_cache_rejected(self):
        net = init_student((4, 3), 0)
        x = np.zeros((2, 4)) + 0.5
        _, cache = embed_points(net, x)
        net.version += 1
        with pytest.raises(UsageError):
            backprop_embeddings(net, cache, np.zeros((2, 3)))


class TestCheckpoint:
    def test_round_trip_is_float32_exact(self, tmp_path):
        net = init_student((13, 16, 8), 77)
        path = tmp_path / "net.gpck"
        save_student(path, net)
        back = load_student(path)
        assert back.widths == net.widths
        assert back.rng_seed == 77
        for pa, pb in zip(net.parameters(), back.parameters()):
            np.testing.assert_array_equal(pa.astype(np.float32), pb.astype(np.float32))

    def test_save_is_deterministic(self, tmp_path):
        net = init_student((5, 4), 3)
        a, b = tmp_path / "a", tmp_path / "b"
        save_student(a, net)
        save_student(b, net)
        assert a.read_bytes() == b.read_bytes()
