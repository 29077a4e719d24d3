import numpy as np
import pytest

from pointpurify import DataError, PointCloud, read_ply, write_ply


@pytest.fixture
def labeled_cloud():
    rng = np.random.default_rng(4)
    n = 50
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(
        positions=rng.normal(size=(n, 3)),
        colors=rng.random((n, 3)),
        normals=normals,
        labels=rng.integers(-1, 5, size=n),
        scene_id="fixture",
    )


@pytest.mark.parametrize("binary", [True, False])
def test_round_trip(tmp_path, labeled_cloud, binary):
    path = tmp_path / "scene.ply"
    write_ply(path, labeled_cloud, binary=binary)
    back = read_ply(path)
    np.testing.assert_array_equal(back.positions, labeled_cloud.positions)
    np.testing.assert_array_equal(back.normals, labeled_cloud.normals)
    np.testing.assert_array_equal(back.labels, labeled_cloud.labels)
    # colors quantize to 8 bits
    np.testing.assert_allclose(back.colors, labeled_cloud.colors, atol=0.5 / 255)
    assert back.scene_id == "scene"


def test_positions_only_round_trip(tmp_path):
    cloud = PointCloud(positions=[[0.5, -1.25, 3.0]])
    path = tmp_path / "min.ply"
    write_ply(path, cloud)
    back = read_ply(path)
    np.testing.assert_array_equal(back.positions, cloud.positions)
    assert back.colors is None and back.normals is None and back.labels is None


def test_reads_float32_ascii_with_extra_property(tmp_path):
    text = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            "comment written by hand",
            "element vertex 2",
            "property float x",
            "property float y",
            "property float z",
            "property float curvature",
            "end_header",
            "0 0 0 9.5",
            "1 2 3 -1.0",
            "",
        ]
    )
    path = tmp_path / "extra.ply"
    path.write_text(text)
    cloud = read_ply(path)
    np.testing.assert_array_equal(cloud.positions, [[0, 0, 0], [1, 2, 3]])


def test_reads_binary_little_endian_uint8_colors(tmp_path):
    header = (
        b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
        b"property float x\nproperty float y\nproperty float z\n"
        b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
        b"end_header\n"
    )
    payload = np.array(
        [(1.0, 2.0, 3.0, 255, 0, 128)],
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1")],
    ).tobytes()
    path = tmp_path / "rgb.ply"
    path.write_bytes(header + payload)
    cloud = read_ply(path)
    np.testing.assert_allclose(cloud.colors[0], [1.0, 0.0, 128 / 255])


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"obj\n")
    with pytest.raises(DataError, match="magic"):
        read_ply(path)


def test_short_binary_payload(tmp_path, labeled_cloud):
    path = tmp_path / "short.ply"
    write_ply(path, labeled_cloud)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 8])
    with pytest.raises(DataError, match="shorter"):
        read_ply(path)


def test_write_is_deterministic(tmp_path, labeled_cloud):
    a = tmp_path / "a.ply"
    b = tmp_path / "b.ply"
    write_ply(a, labeled_cloud)
    write_ply(b, labeled_cloud)
    assert a.read_bytes() == b.read_bytes()
