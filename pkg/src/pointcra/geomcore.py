"""Point-cloud containers, neighborhood construction and the text file format.

All searches are brute force.  Ties are always resolved toward the lowest
index, and short neighborhoods are padded by repetition, never with zeros.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels


class GeometryError(ValueError):
    """Invalid argument to a geometric kernel."""


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features, dtype=np.float64)
        if feat.ndim == 1:
            feat = feat[:, None]
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError(f"positions must be N x 3, got {pos.shape}")
        if pos.shape[0] < 1:
            raise GeometryError("a point cloud needs at least one point")
        if feat.shape[0] != pos.shape[0]:
            raise GeometryError(
                f"positions ({pos.shape[0]}) and features ({feat.shape[0]}) disagree on N"
            )
        if not (np.isfinite(pos).all() and np.isfinite(feat).all()):
            raise GeometryError("non-finite coordinate or feature entry")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", np.ascontiguousarray(feat))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pos.shape[0]:
                raise GeometryError("labels must have one entry per point")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> PointCloud:
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return PointCloud(self.positions[idx], self.features[idx], labels)


@dataclass(frozen=True)
class NeighborhoodIndex:
    """``neighbors[i]`` lists K source indices around source point ``centers[i]``.

    ``distances`` holds Euclidean distances when the builder knows them
    (knn); it is ``None`` otherwise.
    """

    centers: np.ndarray
    neighbors: np.ndarray
    distances: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self):
        return self.neighbors.shape[0]

    def validate(self, n_source: int) -> None:
        for name, arr in (("centers", self.centers), ("neighbors", self.neighbors)):
            if arr.size and (arr.min() < 0 or arr.max() >= n_source):
                raise GeometryError(f"{name} index out of range [0, {n_source})")
        if self.neighbors.ndim != 2 or self.neighbors.shape[0] != self.centers.shape[0]:
            raise GeometryError("neighbors must be M x K with one row per center")


def _as_positions(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.positions
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subsample of ``m`` indices starting from ``seed_index``."""
    pos = _as_positions(cloud)
    n = pos.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise GeometryError(f"seed_index {seed_index} out of range [0, {n})")
    return _kernels.fps(pos, int(m), int(seed_index))


def knn(query_positions, reference_positions, k: int) -> NeighborhoodIndex:
    """K nearest references for every query row (rows padded with the nearest)."""
    query = _as_positions(query_positions)
    ref = _as_positions(reference_positions)
    if ref.shape[0] == 0:
        raise GeometryError("reference set is empty")
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    idx, d2 = _kernels.knn(query, ref, int(k))
    centers = np.arange(query.shape[0], dtype=np.int64)
    return NeighborhoodIndex(centers, idx, np.sqrt(d2))


def ball_query(query_positions, reference_positions, radius: float, max_k: int) -> NeighborhoodIndex:
    """Up to ``max_k`` in-radius references in index order.

    Short rows repeat their last in-radius index; a query with nothing in
    range gets its single nearest reference repeated.
    """
    query = _as_positions(query_positions)
    ref = _as_positions(reference_positions)
    if ref.shape[0] == 0:
        raise GeometryError("reference set is empty")
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if max_k < 1:
        raise GeometryError(f"max_k must be >= 1, got {max_k}")
    idx = _kernels.ball_query(query, ref, float(radius) ** 2, int(max_k))
    return NeighborhoodIndex(np.arange(query.shape[0], dtype=np.int64), idx)


def group(source: PointCloud, index: NeighborhoodIndex, center_positions=None):
    """Gather neighbor features and center-minus-neighbor offsets.

    ``index.centers`` are taken as indices into ``source`` unless explicit
    ``center_positions`` are given.  Returns (M x K x 3, M x K x C).
    """
    index.validate(len(source))
    nbr = index.neighbors
    if center_positions is None:
        center_positions = source.positions[index.centers]
    rel = center_positions[:, None, :] - source.positions[nbr]
    return rel, source.features[nbr]


def scatter_back(grouped: np.ndarray, index: NeighborhoodIndex, n_source: int) -> np.ndarray:
    """Write grouped rows back to their source slots (last write wins)."""
    out = np.zeros((n_source,) + grouped.shape[2:], dtype=grouped.dtype)
    out[index.neighbors.reshape(-1)] = grouped.reshape((-1,) + grouped.shape[2:])
    return out


# --------------------------------------------------------------------------
# text format:  "#pts N dims C labeled {0|1}" then "x y z [f1 .. fC] [label]"
# --------------------------------------------------------------------------

def write_cloud(path, cloud: PointCloud) -> None:
    labeled = cloud.labels is not None
    n, c = len(cloud), cloud.num_channels
    lines = [f"#pts {n} dims {c} labeled {int(labeled)}"]
    for i in range(n):
        vals = [repr(float(v)) for v in cloud.positions[i]]
        vals += [repr(float(v)) for v in cloud.features[i]]
        if labeled:
            vals.append(str(int(cloud.labels[i])))
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise GeometryError(f"{path}: empty file")
    head = text[0].split()
    if (
        len(head) != 6
        or head[0] != "#pts"
        or head[2] != "dims"
        or head[4] != "labeled"
        or head[5] not in ("0", "1")
    ):
        raise GeometryError(f"{path}: malformed header {text[0]!r}")
    try:
        n, c = int(head[1]), int(head[3])
    except ValueError as exc:
        raise GeometryError(f"{path}: malformed header {text[0]!r}") from exc
    if n < 1 or c < 0:
        raise GeometryError(f"{path}: header counts out of range")
    labeled = head[5] == "1"
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    if len(rows) != n:
        raise GeometryError(f"{path}: header says {n} points, found {len(rows)}")
    width = 3 + c + int(labeled)
    if any(len(r) != width for r in rows):
        raise GeometryError(f"{path}: every row needs {width} columns")
    data = np.array([[float(v) for v in r[: 3 + c]] for r in rows]).reshape(n, 3 + c)
    labels = np.array([int(r[-1]) for r in rows]) if labeled else None
    return PointCloud(data[:, :3], data[:, 3:].reshape(n, c), labels)
