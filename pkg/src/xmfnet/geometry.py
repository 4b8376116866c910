"""Non-differentiable point-set utilities.

All tie-breaking is by lower index so results are reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, IngestionError, SizeError

PCF_MAGIC = b"PCF1"


def as_points(pc) -> np.ndarray:
    pts = np.asarray(getattr(pc, "data", pc), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected an n×3 point array, got shape {pts.shape}")
    return pts


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared distances (explicit differences, no |a|²+|b|²-2ab cancellation)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def knn(pc, k: int) -> np.ndarray:
    """Indices of the k nearest neighbours of every point, self excluded.

    Returns an ``n×k`` int array sorted by distance; ties go to the lower index.
    """
    pts = as_points(pc)
    n = pts.shape[0]
    if n <= k:
        raise SizeError(f"knn needs more than k={k} points, got {n}")
    d = pairwise_sq_dists(pts, pts)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def fps(pc, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling (Gonzalez) starting from ``seed_index``."""
    pts = as_points(pc)
    n = pts.shape[0]
    if m > n:
        raise SizeError(f"cannot sample {m} points from {n}")
    if m == n:
        return np.arange(n, dtype=np.int64)
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    dist = np.full(n, np.inf)
    cur = int(seed_index)
    for i in range(m):
        out[i] = cur
        diff = pts - pts[cur]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
        dist[out[: i + 1]] = -np.inf
        cur = int(np.argmax(dist))
    return out


def covering_radius(pc, centers_idx) -> float:
    """Largest distance from any point to its closest selected center."""
    pts = as_points(pc)
    d = pairwise_sq_dists(pts, pts[np.asarray(centers_idx)])
    return float(np.sqrt(d.min(axis=1).max()))


def normalize_unit_sphere(pc):
    """Center on the centroid and scale so the farthest point sits at radius 1.

    Returns ``(points, centroid, scale)`` with ``points = (pc - centroid) * scale``.
    """
    pts = as_points(pc)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))
    scale = 1.0 / radius if radius > 0 else 1.0
    return centered * scale, centroid, scale


def resample(pc, m: int, rng: np.random.Generator) -> np.ndarray:
    """Fix the cardinality to ``m`` by sampling without (then with) replacement."""
    pts = as_points(pc)
    n = pts.shape[0]
    if n < 1:
        raise SizeError("cannot resample an empty cloud")
    if m <= n:
        return pts[rng.choice(n, size=m, replace=False)]
    fill = rng.integers(0, n, size=m - n)
    return pts[np.concatenate([rng.permutation(n), fill])]


def chamfer_numpy(a, b) -> float:
    """Plain L1 Chamfer value (each direction divided by its own count, halved)."""
    d = np.sqrt(pairwise_sq_dists(as_points(a), as_points(b)))
    return 0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean()


# -- PCF files ----------------------------------------------------------------

def write_pcf(path, pc) -> None:
    pts = as_points(pc).astype("<f4")
    Path(path).write_bytes(PCF_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes())


def read_pcf(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestionError(path, str(exc)) from None
    if len(buf) < 8 or buf[:4] != PCF_MAGIC:
        raise IngestionError(path, "not a PCF1 file")
    (count,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 12 * count:
        raise IngestionError(path, f"expected {count} points, file size {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(count, 3).astype(np.float64)
