"""PLY reader/writer for labeled point clouds.

Supports ASCII and binary little-endian files with properties x,y,z,
optional red,green,blue (8-bit, rescaled to [0,1]), optional nx,ny,nz and
optional label (int32). Only the vertex element is handled; meshes are out
of scope.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    line = fh.readline()
    if line.strip() != b"ply":
        raise DataError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise DataError("unexpected end of PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"unsupported PLY format: {tokens[1]}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                count = int(tokens[2])
                in_vertex = True
            else:
                if int(tokens[2]) != 0:
                    raise DataError(f"unsupported PLY element: {tokens[1]}")
                in_vertex = False
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise DataError("list properties are not supported on vertices")
            if tokens[1] not in _PLY_TYPES:
                raise DataError(f"unsupported property type: {tokens[1]}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt is None or count is None:
        raise DataError("PLY header missing format or vertex element")
    return fmt, count, props


def read_ply(path) -> PointCloud:
    """Read a point cloud; unknown vertex properties are ignored."""
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh)
        names = [p[0] for p in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise DataError(f"PLY vertex element lacks property {axis}")
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if fmt == "binary_little_endian":
            raw = fh.read(dtype.itemsize * count)
            if len(raw) != dtype.itemsize * count:
                raise DataError("PLY payload shorter than declared vertex count")
            data = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            rows = []
            for _ in range(count):
                fields = fh.readline().split()
                if len(fields) != len(props):
                    raise DataError("malformed ASCII PLY row")
                rows.append(tuple(fields))
            data = np.array(rows, dtype=dtype)

    positions = np.stack(
        [data["x"], data["y"], data["z"]], axis=1
    ).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack(
            [data["red"], data["green"], data["blue"]], axis=1
        ).astype(np.float64) / 255.0
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack(
            [data["nx"], data["ny"], data["nz"]], axis=1
        ).astype(np.float64)
    labels = data["label"].astype(np.int64) if "label" in names else None
    scene_id = Path(path).stem
    return PointCloud(
        positions=positions, colors=colors, normals=normals,
        labels=labels, scene_id=scene_id,
    )


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    """Write a cloud with whatever optional attributes it carries.

    Positions and normals are stored as double so a write/read round trip
    preserves them exactly; colors quantize to 8-bit.
    """
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += [
            "property uchar red", "property uchar green", "property uchar blue",
        ]
    if cloud.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        header += [
            "property double nx", "property double ny", "property double nz",
        ]
    if cloud.labels is not None:
        fields.append(("label", "<i4"))
        header.append("property int label")
    header.append("end_header")

    data = np.empty(n, dtype=np.dtype(fields))
    data["x"], data["y"], data["z"] = cloud.positions.T
    if cloud.colors is not None:
        rgb = np.rint(cloud.colors * 255.0).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
    if cloud.normals is not None:
        data["nx"], data["ny"], data["nz"] = cloud.normals.T
    if cloud.labels is not None:
        data["label"] = cloud.labels.astype(np.int32)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            cols = []
            for name, code in fields:
                if code in ("u1", "<i4"):
                    cols.append([str(int(v)) for v in data[name]])
                else:
                    cols.append([repr(float(v)) for v in data[name]])
            lines = (" ".join(row) for row in zip(*cols))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
