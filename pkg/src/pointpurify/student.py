"""The trainable point-context embedding network.

A pointwise MLP maps an engineered local-context descriptor (13 dims, plus
the semantic feature in concat mode) to a unit-norm embedding. Forward and
reverse passes are hand-written so gradients can be checked against finite
differences exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gpff
from .errors import DataError, ParameterError, UsageError
from .geometry import PointCloud, build_neighbor_index, estimate_normals
from .lifting import FeatureField

DEFAULT_WIDTHS = (13, 64, 64, 64, 32)

CHECKPOINT_VERSION = 1


def featurize_context(cloud: PointCloud, k_ctx: int, semantic: FeatureField | None = None):
    """Build one local-context descriptor row per point.

    Layout: relative position (3, centred and scaled by the bounding-box
    diagonal), color (3, zeros when absent), unit normal (3), sorted
    unit-trace covariance eigenvalues of the k_ctx neighbourhood (3), and
    the mean normal deviation 1 - |n_i . n_j| over that neighbourhood (1).
    Semantic features are appended when ``semantic`` is given (concat mode).
    """
    if k_ctx < 4:
        raise ParameterError("k_ctx must be >= 4")
    n = len(cloud)
    pos = cloud.positions
    if cloud.normals is not None:
        normals = cloud.normals
    else:
        normals, _ = estimate_normals(cloud, k_ctx)

    centroid = pos.mean(axis=0)
    extent = pos.max(axis=0) - pos.min(axis=0)
    diag = float(np.sqrt(extent[0] ** 2 + extent[1] ** 2 + extent[2] ** 2))
    if diag <= 0.0:
        diag = 1.0
    rel = (pos - centroid) / diag

    colors = cloud.colors if cloud.colors is not None else np.zeros((n, 3))

    index = build_neighbor_index(pos)
    idx, _ = index.query_knn_batch(pos, min(k_ctx, n))
    nbrs = pos[idx]
    mean = nbrs.mean(axis=1, keepdims=True)
    centered = nbrs - mean
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals = np.linalg.eigvalsh(cov)[:, ::-1]  # descending
    eigvals = np.maximum(eigvals, 0.0)
    trace = eigvals.sum(axis=1)
    flat = trace <= 0.0
    safe = np.where(flat, 1.0, trace)
    eig_unit = eigvals / safe[:, None]
    eig_unit[flat] = 1.0 / 3.0

    nbr_normals = normals[idx]
    dots = np.abs(np.einsum("nd,nkd->nk", normals, nbr_normals))
    deviation = (1.0 - np.minimum(dots, 1.0)).mean(axis=1)

    parts = [rel, colors, normals, eig_unit, deviation[:, None]]
    if semantic is not None:
        if len(semantic) != n:
            raise ParameterError("semantic field does not match point count")
        parts.append(semantic.values)
    return np.concatenate(parts, axis=1)


@dataclass
class StudentNet:
    """MLP parameters: rectifier hidden layers, identity output, then a
    row-wise L2 normalization that is part of the network contract."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    rng_seed: int
    version: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in update order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def layer_of_parameter(self, param_idx: int) -> int:
        return param_idx // 2


@dataclass
class ForwardCache:
    """Activations recorded by embed_points for the reverse pass."""

    net_version: int
    inputs: np.ndarray
    pre_acts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    prenorm: np.ndarray | None = None
    norms: np.ndarray | None = None


def init_student(widths, seed: int) -> StudentNet:
    """Glorot-uniform weights (scale sqrt(6/(fan_in+fan_out))), zero biases."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ParameterError(f"invalid layer widths: {widths}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return StudentNet(widths=widths, weights=weights, biases=biases, rng_seed=int(seed))


def embed_points(net: StudentNet, descriptors) -> tuple[FeatureField, ForwardCache]:
    """Forward pass; every output row is unit-norm within 1e-6.

    Returns the embedding field plus the activation cache consumed by
    backprop_embeddings. Rows whose pre-normalization output is exactly
    zero map to the first canonical basis vector (deterministic fallback).
    """
    x = np.ascontiguousarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ParameterError(
            f"descriptor dim {x.shape[1] if x.ndim == 2 else '?'} != net input {net.in_dim}"
        )
    cache = ForwardCache(net_version=net.version, inputs=x)
    h = x
    last = net.num_layers - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        cache.pre_acts.append(z)
        h = np.maximum(z, 0.0) if li < last else z
        cache.acts.append(h)
    norms = np.sqrt((h * h).sum(axis=1))
    zero = norms < 1e-30
    g = np.empty_like(h)
    g[~zero] = h[~zero] / norms[~zero, None]
    if zero.any():
        g[zero] = 0.0
        g[zero, 0] = 1.0
    cache.prenorm = h
    cache.norms = norms
    return FeatureField(g, "point", None), cache


def backprop_embeddings(net: StudentNet, cache: ForwardCache, grad_wrt_embeddings):
    """Exact reverse-mode gradients for every weight and bias.

    The upstream gradient is with respect to the normalized embeddings; the
    normalization Jacobian (I - g g^T)/|z| is applied first. Raises
    UsageError when the cache does not match the net's current parameters.
    """
    if cache.net_version != net.version:
        raise UsageError("forward cache is stale: parameters changed since embed_points")
    g_up = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    z = cache.prenorm
    if g_up.shape != z.shape:
        raise ParameterError("gradient shape does not match embeddings")
    norms = cache.norms
    safe = np.where(norms < 1e-30, 1.0, norms)
    g = z / safe[:, None]
    # (I - g g^T)/|z| applied row-wise
    delta = (g_up - (g_up * g).sum(axis=1, keepdims=True) * g) / safe[:, None]

    grads_w = [None] * net.num_layers
    grads_b = [None] * net.num_layers
    last = net.num_layers - 1
    for li in range(last, -1, -1):
        if li < last:
            delta = delta * (cache.pre_acts[li] > 0)
        below = cache.inputs if li == 0 else cache.acts[li - 1]
        grads_w[li] = delta.T @ below
        grads_b[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ net.weights[li]
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out.append(gw)
        out.append(gb)
    return out


def save_student(path, net: StudentNet) -> None:
    """Checkpoint: version byte, widths, seed, then one GPFF frame holding
    the flat float32 parameter vector (W then b per layer)."""
    import struct

    header = struct.pack("<BB", CHECKPOINT_VERSION, len(net.widths))
    header += struct.pack("<%dQ" % len(net.widths), *net.widths)
    header += struct.pack("<q", net.rng_seed)
    flat = np.concatenate([p.reshape(-1) for p in net.parameters()])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(gpff.pack_frame(flat.astype(np.float32)))


def load_student(path) -> StudentNet:
    import struct

    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 2:
        raise DataError("truncated checkpoint")
    version, n_widths = struct.unpack_from("<BB", buf, 0)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    offset = 2
    widths = struct.unpack_from("<%dQ" % n_widths, buf, offset)
    offset += 8 * n_widths
    (seed,) = struct.unpack_from("<q", buf, offset)
    offset += 8
    flat, end = gpff.unpack_frame(buf, offset)
    if end != len(buf):
        raise DataError("trailing bytes after checkpoint payload")
    flat = flat.astype(np.float64).reshape(-1)
    weights = []
    biases = []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = flat[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        b = flat[pos : pos + fan_out].copy()
        pos += fan_out
        weights.append(w.copy())
        biases.append(b)
    if pos != flat.size:
        raise DataError("checkpoint parameter count does not match widths")
    return StudentNet(widths=tuple(int(w) for w in widths), weights=weights,
                      biases=biases, rng_seed=int(seed))
