"""Synthetic labeled scenes built from analytic surface patches.

Shape kinds and their class ids: plane 0, sphere 1, corner 2.  A composite
scene places a sphere or a corner on a floor plane; every point is labeled
with the kind of the surface that generated it.

Contamination: points closer than ``band`` to the *other* object's surface
form the boundary band.  For a ``contamination`` fraction of them an extra
point is sampled on the other object's surface at its nearest location
(so within ``band``).  Where that spot lies beyond the band point's K
nearest neighbors, the extra point is pulled across the band toward the
band point, so every contaminated neighborhood straddles both labels.  The
same number of non-band points is dropped to keep the scene size fixed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..geomcore import PointCloud, knn

PLANE, SPHERE, CORNER = 0, 1, 2
KIND_IDS = {"plane": PLANE, "sphere": SPHERE, "corner": CORNER}
# neighborhood size whose label mixing contamination guarantees
CONTAMINATION_K = 8


@dataclass
class SceneSpec:
    kind: str = "composite"  # plane | sphere | corner | composite
    points: int = 512
    band: float = 0.08
    noise: float = 0.005
    contamination: float = 0.0

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "corner", "composite"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.points < 64:
            raise ValueError("a scene needs at least 64 points")
        if self.band < 0 or self.noise < 0:
            raise ValueError("band width and noise must be nonnegative")
        if not 0.0 <= self.contamination <= 1.0:
            raise ValueError("contamination must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# surfaces
# --------------------------------------------------------------------------

@dataclass
class Rect:
    """Planar rectangle ``origin + s*u + t*v`` for s in [0, lu], t in [0, lv]."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    lu: float
    lv: float

    @property
    def area(self):
        return self.lu * self.lv

    def sample(self, rng, n):
        s = rng.uniform(0, self.lu, n)[:, None]
        t = rng.uniform(0, self.lv, n)[:, None]
        return self.origin + s * self.u + t * self.v

    def nearest(self, p):
        d = p - self.origin
        a = np.clip(d @ self.u, 0.0, self.lu)[:, None]
        b = np.clip(d @ self.v, 0.0, self.lv)[:, None]
        return self.origin + a * self.u + b * self.v

    def distance(self, p):
        d = p - self.origin
        a, b = d @ self.u, d @ self.v
        nrm = d @ np.cross(self.u, self.v)
        da = np.maximum(np.maximum(-a, a - self.lu), 0.0)
        db = np.maximum(np.maximum(-b, b - self.lv), 0.0)
        return np.sqrt(da * da + db * db + nrm * nrm)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    z_min: float = -np.inf  # keep only the part above this height

    @property
    def area(self):
        r = self.radius
        h = np.clip(self.center[2] + r - self.z_min, 0.0, 2 * r)
        return 2 * np.pi * r * h

    def sample(self, rng, n):
        out = np.empty((0, 3))
        while out.shape[0] < n:
            d = rng.standard_normal((2 * n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            p = self.center + self.radius * d
            out = np.concatenate([out, p[p[:, 2] >= self.z_min]])
        return out[:n]

    def nearest(self, p):
        d = p - self.center
        q = self.center + self.radius * d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        low = q[:, 2] < self.z_min
        if low.any():
            # closest point of the cut rim
            h = self.z_min - self.center[2]
            rim = np.sqrt(max(self.radius**2 - h * h, 0.0))
            xy = d[low, :2]
            xy = rim * xy / np.maximum(np.linalg.norm(xy, axis=1, keepdims=True), 1e-12)
            q[low] = np.column_stack([self.center[0] + xy[:, 0], self.center[1] + xy[:, 1], np.full(low.sum(), self.z_min)])
        return q

    def distance(self, p):
        return np.linalg.norm(p - self.nearest(p), axis=1)


class SurfaceSet:
    """Union of patches sampled proportionally to area."""

    def __init__(self, patches, kind_id):
        self.patches = patches
        self.kind_id = kind_id

    @property
    def area(self):
        return sum(p.area for p in self.patches)

    def sample(self, rng, n):
        areas = np.array([p.area for p in self.patches])
        counts = rng.multinomial(n, areas / areas.sum())
        return np.concatenate([p.sample(rng, c) for p, c in zip(self.patches, counts)])

    def distance(self, p):
        return np.min([pt.distance(p) for pt in self.patches], axis=0)

    def nearest(self, p):
        d = np.stack([pt.distance(p) for pt in self.patches])
        cands = np.stack([pt.nearest(p) for pt in self.patches])
        return cands[d.argmin(axis=0), np.arange(len(p))]


_EX, _EY, _EZ = np.eye(3)


def _floor(half=1.0):
    return SurfaceSet([Rect(np.array([-half, -half, 0.0]), _EX, _EY, 2 * half, 2 * half)], PLANE)


def _trihedral(size, origin):
    o = np.asarray(origin, dtype=np.float64)
    return SurfaceSet(
        [Rect(o, _EX, _EY, size, size), Rect(o, _EY, _EZ, size, size), Rect(o, _EZ, _EX, size, size)],
        CORNER,
    )


def _wall_corner(size, height, origin):
    o = np.asarray(origin, dtype=np.float64)
    # two upright walls meeting at a right angle, standing on z = 0
    return SurfaceSet([Rect(o, _EX, _EZ, size, height), Rect(o, _EY, _EZ, size, height)], CORNER)


def _rotation(rng, full=False):
    if full:
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return q
    a = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def _single(spec, rng):
    if spec.kind == "plane":
        surf = _floor()
    elif spec.kind == "sphere":
        surf = SurfaceSet([Sphere(np.zeros(3), rng.uniform(0.6, 1.0))], SPHERE)
    else:
        size = rng.uniform(1.0, 1.4)
        surf = _trihedral(size, [-size / 2] * 3)
    pos = surf.sample(rng, spec.points)
    pos = pos @ _rotation(rng, full=True).T * rng.uniform(0.9, 1.1)
    pos += spec.noise * rng.standard_normal(pos.shape)
    return pos, np.full(spec.points, surf.kind_id), np.zeros(spec.points, dtype=bool)


def _composite_surfaces(rng):
    floor = _floor()
    if rng.uniform() < 0.5:
        r = rng.uniform(0.35, 0.5)
        c = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), r * rng.uniform(0.2, 0.6)])
        obj = SurfaceSet([Sphere(c, r, z_min=0.0)], SPHERE)
        # floor points hidden inside the sphere are dropped
        hidden = lambda p: np.linalg.norm(p - c, axis=1) < r
    else:
        size, height = rng.uniform(0.8, 1.1), rng.uniform(0.5, 0.8)
        o = np.array([rng.uniform(-0.7, -0.4), rng.uniform(-0.7, -0.4), 0.0])
        obj = _wall_corner(size, height, o)
        hidden = lambda p: np.zeros(len(p), dtype=bool)
    return floor, obj, hidden


def band_mask(positions, labels, surfaces, band):
    """Points within ``band`` of a surface other than their own."""
    mask = np.zeros(len(positions), dtype=bool)
    for surf in surfaces:
        other = labels != surf.kind_id
        if other.any():
            mask[other] |= surf.distance(positions[other]) <= band
    return mask


def _composite(spec, rng):
    floor, obj, hidden = _composite_surfaces(rng)
    n_obj = spec.points // 2
    p_obj = obj.sample(rng, n_obj)
    p_floor = np.empty((0, 3))
    while p_floor.shape[0] < spec.points - n_obj:
        cand = floor.sample(rng, spec.points)
        p_floor = np.concatenate([p_floor, cand[~hidden(cand)]])
    p_floor = p_floor[: spec.points - n_obj]
    pos = np.concatenate([p_floor, p_obj])
    labels = np.concatenate([np.full(len(p_floor), PLANE), np.full(n_obj, obj.kind_id)])
    pos = pos + spec.noise * rng.standard_normal(pos.shape)
    band = band_mask(pos, labels, (floor, obj), spec.band)

    extra = np.zeros(len(pos), dtype=bool)
    band_idx = np.flatnonzero(band)
    free_idx = np.flatnonzero(~band)
    n_extra = min(int(round(spec.contamination * band_idx.size)), free_idx.size)
    if n_extra:
        chosen = np.sort(rng.permutation(band_idx)[:n_extra])
        src = pos[chosen]
        from_floor = labels[chosen] == PLANE
        target = np.empty((n_extra, 3))
        target[from_floor] = obj.nearest(src[from_floor])
        target[~from_floor] = floor.nearest(src[~from_floor])
        target += spec.noise * rng.standard_normal(target.shape)
        r_k = knn(src, pos, CONTAMINATION_K).distances[:, -1]
        gap = np.linalg.norm(target - src, axis=1)
        t = np.minimum(1.0, 0.5 * r_k / np.maximum(gap, 1e-12))
        dropped = rng.permutation(free_idx)[:n_extra]
        keep = np.setdiff1d(np.arange(len(pos)), dropped)
        base_pos, base_labels = pos[keep], labels[keep]
        src_new = np.searchsorted(keep, chosen)
        extra_labels = np.where(from_floor, obj.kind_id, PLANE)
        for _ in range(20):
            extra_pos = src + t[:, None] * (target - src)
            pos = np.concatenate([base_pos, extra_pos])
            labels = np.concatenate([base_labels, extra_labels])
            nb = knn(pos[src_new], pos, CONTAMINATION_K).neighbors
            mixed = (labels[nb] != labels[src_new][:, None]).any(axis=1)
            if mixed.all():
                break
            t[~mixed] *= 0.5
        band = np.concatenate([band[keep], np.zeros(n_extra, dtype=bool)])
        extra = np.concatenate([np.zeros(len(keep), dtype=bool), np.ones(n_extra, dtype=bool)])
    order = rng.permutation(len(pos))
    return pos[order], labels[order], band[order], extra[order]


@dataclass
class Scene:
    cloud: PointCloud
    label: int  # scene class: kind id of the single shape, or of the object
    band: np.ndarray  # original points within the band of the other object
    extra: np.ndarray  # contamination points


def gen_scene(spec: SceneSpec, seed) -> Scene:
    """Deterministic for a fixed (spec, seed)."""
    rng = np.random.default_rng(seed)
    if spec.kind == "composite":
        pos, labels, band, extra = _composite(spec, rng)
        scene_label = int(labels[labels != PLANE][0]) if (labels != PLANE).any() else PLANE
    else:
        pos, labels, band = _single(spec, rng)
        extra = np.zeros(len(pos), dtype=bool)
        scene_label = int(labels[0])
    return Scene(PointCloud(pos, pos.copy(), labels), scene_label, band, extra)


def scene_seed(seed: int, index: int, split: str = "train"):
    """Per-scene seed derived from (run seed, split, scene index)."""
    return [int(seed), sum(map(ord, split)), int(index)]


def gen_dataset(spec_for_index, n, seed, split="train", workers=1):
    """``spec_for_index(i)`` returns the SceneSpec for scene ``i``.

    Scenes depend only on their derived seed, so the result is identical
    for any worker count.
    """
    def one(i):
        return gen_scene(spec_for_index(i), scene_seed(seed, i, split))

    if workers <= 1:
        return [one(i) for i in range(n)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(n)))


def classification_specs(points, noise=0.005):
    kinds = ("plane", "sphere", "corner")
    return lambda i: SceneSpec(kind=kinds[i % 3], points=points, noise=noise)


def augment(positions, rng, rotate=np.pi, scale=(0.9, 1.1)):
    """Random rotation about the vertical axis and uniform scaling."""
    a = rng.uniform(-rotate, rotate)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return positions @ rot.T * rng.uniform(*scale)
