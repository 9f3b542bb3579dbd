"""Voxelization, Morton serialization, grid pooling and synthetic indoor scenes."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError, ParameterError
from .numerics import Tensor, gather_rows, linear

MORTON_BITS = 21
MORTON_LIMIT = 1 << MORTON_BITS
DEFAULT_GRID_SIZE = 0.02

CLASS_NAMES = ("floor", "wall", "box", "sphere", "table")
FLOOR, WALL, BOX, SPHERE, TABLE = range(5)


# --- Morton keys ----------------------------------------------------------------


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits of ``v``."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(x, y=None, z=None):
    """Interleave coordinate bits: bit i of x -> 3i, of y -> 3i+1, of z -> 3i+2.

    Accepts three scalars or arrays, or a single ``(M, 3)`` array. Scalars give a
    Python int, arrays an ``int64`` array.
    """
    if y is None and z is None:
        c = np.asarray(x)
        if c.ndim != 2 or c.shape[1] != 3:
            raise DimensionError(f"expected (M, 3) coordinates, got {c.shape}")
        x, y, z = c[:, 0], c[:, 1], c[:, 2]
    scalar = np.isscalar(x) and np.isscalar(y) and np.isscalar(z)
    xs, ys, zs = (np.asarray(a, dtype=np.int64) for a in (x, y, z))
    for name, a in (("x", xs), ("y", ys), ("z", zs)):
        if a.size and (a.min() < 0 or a.max() >= MORTON_LIMIT):
            raise ParameterError(f"{name} coordinate outside [0, 2^{MORTON_BITS})")
    key = _spread_bits(xs) | (_spread_bits(ys) << np.uint64(1)) | (_spread_bits(zs) << np.uint64(2))
    key = key.astype(np.int64)
    return int(key) if scalar else key


def morton_decode(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    return np.stack(
        [_compact_bits(k), _compact_bits(k >> np.uint64(1)), _compact_bits(k >> np.uint64(2))], axis=-1
    ).astype(np.int64)


# --- containers -------------------------------------------------------------------


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        self.features = np.asarray(self.features)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DimensionError(f"positions must be N x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise DataError("point cloud is empty")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise DimensionError(f"features {self.features.shape} do not match {self.positions.shape[0]} points")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("non-finite point position")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.positions.shape[0],):
                raise DimensionError(f"labels {self.labels.shape} do not match {self.positions.shape[0]} points")
            if self.labels.size and self.labels.min() < -1:
                raise DataError(f"label {self.labels.min()} below -1")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "PointCloud":
        return PointCloud(
            self.positions[mask], self.features[mask], None if self.labels is None else self.labels[mask]
        )


@dataclass
class SerializedVoxels:
    """Occupied voxels in ascending Morton-key order.

    ``counts`` holds the number of source points (or fine voxels) merged into
    each row; ``inverse_map`` sends every original point to its row.
    """

    coords: np.ndarray
    keys: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None
    inverse_map: np.ndarray
    counts: np.ndarray
    grid_size: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return self.keys.shape[0]

    def centers(self) -> np.ndarray:
        """Voxel centres in metres."""
        return self.origin + (self.coords + 0.5) * self.grid_size


@dataclass
class PoolingMap:
    parent: np.ndarray  # fine row -> coarse row
    coarse: SerializedVoxels
    stride: int

    @property
    def num_fine(self) -> int:
        return self.parent.shape[0]

    @property
    def num_coarse(self) -> int:
        return len(self.coarse)


def _majority(rows: np.ndarray, labels: np.ndarray, num_rows: int, weights=None) -> np.ndarray:
    """Most frequent non-negative label per row; ties go to the smallest id, no votes give -1."""
    out = np.full(num_rows, -1, dtype=np.int64)
    keep = labels >= 0
    if not np.any(keep):
        return out
    rows, labels = rows[keep], labels[keep].astype(np.int64)
    w = None if weights is None else np.asarray(weights)[keep]
    K = int(labels.max()) + 1
    votes = np.bincount(rows * K + labels, weights=w, minlength=num_rows * K).reshape(num_rows, K)
    has = votes.sum(axis=1) > 0
    out[has] = np.argmax(votes[has], axis=1)  # argmax returns the first maximum
    return out


def voxelize(pc: PointCloud, grid_size: float = DEFAULT_GRID_SIZE) -> SerializedVoxels:
    """Bin points into a cubic grid and serialize the occupied cells by Morton key."""
    if not grid_size > 0:
        raise ParameterError(f"grid_size must be positive, got {grid_size}")
    if len(pc) == 0:
        raise DataError("cannot voxelize an empty cloud")
    pos = np.asarray(pc.positions, dtype=np.float64)
    origin = pos.min(axis=0)
    coords = np.floor((pos - origin) / grid_size).astype(np.int64)
    keys = morton_encode(coords)
    ukeys, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    M = ukeys.shape[0]
    counts = np.bincount(inverse, minlength=M)
    feats = np.zeros((M, pc.features.shape[1]), dtype=np.float64)
    np.add.at(feats, inverse, np.asarray(pc.features, dtype=np.float64))
    feats /= counts[:, None]
    labels = None
    if pc.labels is not None:
        labels = _majority(inverse, np.asarray(pc.labels), M)
    return SerializedVoxels(
        coords=coords[first],
        keys=ukeys,
        features=feats,
        labels=labels,
        inverse_map=inverse.astype(np.int64),
        counts=counts,
        grid_size=float(grid_size),
        origin=origin,
    )


def grid_pool(v: SerializedVoxels, stride: int = 2) -> tuple[SerializedVoxels, PoolingMap]:
    """Merge voxels sharing ``coords // stride``; features are averaged over fine voxels."""
    if stride < 2:
        raise ParameterError(f"pooling stride must be >= 2, got {stride}")
    pcoords = v.coords // stride
    pkeys = morton_encode(pcoords)
    ukeys, first, parent = np.unique(pkeys, return_index=True, return_inverse=True)
    M = ukeys.shape[0]
    n_children = np.bincount(parent, minlength=M)
    feats = np.zeros((M, v.features.shape[1]), dtype=np.float64)
    np.add.at(feats, parent, v.features)
    feats /= n_children[:, None]
    labels = None if v.labels is None else _majority(parent, v.labels, M, weights=v.counts)
    coarse = SerializedVoxels(
        coords=pcoords[first],
        keys=ukeys,
        features=feats,
        labels=labels,
        inverse_map=parent[v.inverse_map],
        counts=np.bincount(parent, weights=v.counts, minlength=M).astype(np.int64),
        grid_size=v.grid_size * stride,
        origin=v.origin,
    )
    return coarse, PoolingMap(parent=parent.astype(np.int64), coarse=coarse, stride=stride)


def grid_unpool(coarse_features, pmap: PoolingMap, skip_features=None, proj: Tensor | None = None,
                proj_bias: Tensor | None = None) -> Tensor:
    """Broadcast each parent row back to its children and add the encoder skip.

    When ``proj`` is given, coarse features are first projected linearly to the
    skip width.
    """
    coarse = coarse_features if isinstance(coarse_features, Tensor) else Tensor(coarse_features)
    if coarse.shape[0] != pmap.num_coarse:
        raise DimensionError(f"coarse features have {coarse.shape[0]} rows, map expects {pmap.num_coarse}")
    if proj is not None:
        coarse = linear(coarse, proj, proj_bias)
    up = gather_rows(coarse, pmap.parent)
    if skip_features is None:
        return up
    skip = skip_features if isinstance(skip_features, Tensor) else Tensor(skip_features)
    if skip.shape[0] != pmap.num_fine:
        raise DimensionError(f"skip features have {skip.shape[0]} rows, map expects {pmap.num_fine}")
    if skip.shape[1] != up.shape[1]:
        raise DimensionError(f"skip width {skip.shape[1]} != unpooled width {up.shape[1]}; pass proj")
    return up + skip


def crop_to_voxels(pc: PointCloud, grid_size: float, num_voxels: int) -> PointCloud:
    """Keep the points of the first ``num_voxels`` voxels in Morton order (a compact spatial crop)."""
    v = voxelize(pc, grid_size)
    if num_voxels >= len(v):
        return pc
    return pc.subset(v.inverse_map < num_voxels)


# --- synthetic scenes -----------------------------------------------------------


@dataclass
class SceneSpec:
    room_size: tuple[float, float, float] = (3.0, 3.0, 1.5)
    num_points: int = 4096
    object_count: tuple[int, int] = (3, 5)
    color_noise: float = 0.05
    ambiguity_rate: float = 0.1
    num_classes: int = len(CLASS_NAMES)

    def validate(self) -> None:
        if min(self.room_size) <= 0:
            raise ParameterError(f"room extents must be positive, got {self.room_size}")
        if self.num_points < 1:
            raise ParameterError("num_points must be >= 1")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ParameterError(f"invalid object count range {self.object_count}")
        if not 0 <= self.ambiguity_rate <= 1:
            raise ParameterError("ambiguity_rate must lie in [0, 1]")


BASE_COLORS = np.array(
    [
        [0.55, 0.45, 0.35],  # floor
        [0.80, 0.80, 0.75],  # wall
        [0.20, 0.40, 0.75],  # box
        [0.75, 0.25, 0.20],  # sphere
        [0.40, 0.60, 0.30],  # table
    ]
)


@dataclass
class _Surface:
    label: int
    area: float
    sampler: object  # callable(rng, n) -> (n, 3)


def _rect(origin, u, v):
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    area = float(np.linalg.norm(np.cross(u, v)))

    def sample(rng, n):
        a, b = rng.random((n, 1)), rng.random((n, 1))
        return origin + a * u + b * v

    return area, sample


def _box_faces(lo, hi, label, with_bottom=False) -> list[_Surface]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dx, dy, dz = hi - lo
    ex, ey, ez = np.array([dx, 0, 0]), np.array([0, dy, 0]), np.array([0, 0, dz])
    faces = [
        _rect(lo, ex, ez), _rect(lo + ey, ex, ez),
        _rect(lo, ey, ez), _rect(lo + ex, ey, ez),
        _rect(lo + ez, ex, ey),
    ]
    if with_bottom:
        faces.append(_rect(lo, ex, ey))
    return [_Surface(label, a, s) for a, s in faces]


def _sphere_surface(center, radius, label) -> _Surface:
    center = np.asarray(center, float)

    def sample(rng, n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + radius * d

    return _Surface(label, 4 * math.pi * radius**2, sample)


def generate_scene(seed: int, spec: SceneSpec | None = None) -> PointCloud:
    """Sample a labelled synthetic room: floor, four walls and boxes/spheres/tables.

    Deterministic in ``(seed, spec)``. Object types cycle box -> sphere -> table
    from a seed-dependent offset, so three or more objects cover every class.
    A fraction ``ambiguity_rate`` of object points take the wall colour.
    """
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    X, Y, Z = spec.room_size
    surfaces: list[_Surface] = []
    a, s = _rect((0, 0, 0), (X, 0, 0), (0, Y, 0))
    surfaces.append(_Surface(FLOOR, a, s))
    for org, u in (((0, 0, 0), (X, 0, 0)), ((0, Y, 0), (X, 0, 0)), ((0, 0, 0), (0, Y, 0)), ((X, 0, 0), (0, Y, 0))):
        a, s = _rect(org, u, (0, 0, Z))
        surfaces.append(_Surface(WALL, a, s))

    lo, hi = spec.object_count
    n_obj = int(rng.integers(lo, hi + 1))
    kinds = (BOX, SPHERE, TABLE)
    start = int(rng.integers(0, 3))
    footprints: list[tuple[float, float, float, float]] = []
    margin = 0.1
    for i in range(n_obj):
        kind = kinds[(start + i) % 3]
        for _ in range(50):
            if kind == BOX:
                size = rng.uniform([0.2, 0.2, 0.15], [0.6, 0.6, 0.6])
            elif kind == SPHERE:
                r = rng.uniform(0.1, 0.3)
                size = np.array([2 * r, 2 * r, 2 * r])
            else:
                size = rng.uniform([0.5, 0.4, 0.4], [0.9, 0.7, Z * 0.6])
            if size[0] + 2 * margin >= X or size[1] + 2 * margin >= Y:
                size = np.minimum(size, [X / 2, Y / 2, Z / 2])
            x0 = rng.uniform(margin, max(margin, X - margin - size[0]))
            y0 = rng.uniform(margin, max(margin, Y - margin - size[1]))
            fp = (x0, y0, x0 + size[0], y0 + size[1])
            if all(fp[2] < f[0] or f[2] < fp[0] or fp[3] < f[1] or f[3] < fp[1] for f in footprints):
                break
        footprints.append(fp)
        if kind == BOX:
            surfaces += _box_faces((x0, y0, 0), (x0 + size[0], y0 + size[1], size[2]), BOX)
        elif kind == SPHERE:
            r = size[0] / 2
            surfaces.append(_sphere_surface((x0 + r, y0 + r, r), r, SPHERE))
        else:
            top = size[2]
            slab = 0.04
            surfaces += _box_faces((x0, y0, top - slab), (x0 + size[0], y0 + size[1], top), TABLE, with_bottom=True)
            leg = 0.05
            for lx, ly in ((x0, y0), (x0 + size[0] - leg, y0), (x0, y0 + size[1] - leg), (x0 + size[0] - leg, y0 + size[1] - leg)):
                surfaces += [f for f in _box_faces((lx, ly, 0), (lx + leg, ly + leg, top - slab), TABLE)]

    # points proportional to area, with each object class guaranteed a share
    areas = np.array([sf.area for sf in surfaces])
    labels_of = np.array([sf.label for sf in surfaces])
    weights = areas / areas.sum()
    obj = labels_of >= BOX
    if obj.any():
        min_obj_share = 0.35
        share = weights[obj].sum()
        if share < min_obj_share:
            weights[obj] *= min_obj_share / share
            weights[~obj] *= (1 - min_obj_share) / weights[~obj].sum()
    counts = rng.multinomial(spec.num_points, weights)
    pos_parts, lab_parts = [], []
    for sf, n in zip(surfaces, counts):
        if n:
            pos_parts.append(sf.sampler(rng, int(n)))
            lab_parts.append(np.full(int(n), sf.label, dtype=np.int32))
    positions = np.concatenate(pos_parts)
    labels = np.concatenate(lab_parts)
    colors = BASE_COLORS[labels] + rng.normal(scale=spec.color_noise, size=(labels.size, 3))
    if spec.ambiguity_rate > 0:
        confuse = (labels >= BOX) & (rng.random(labels.size) < spec.ambiguity_rate)
        colors[confuse] = BASE_COLORS[WALL] + rng.normal(scale=spec.color_noise, size=(int(confuse.sum()), 3))
    colors = np.clip(colors, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return PointCloud(
        positions[order].astype(np.float32),
        colors[order].astype(np.float32),
        labels[order].astype(np.int32),
    )


# --- MPC1 files -------------------------------------------------------------------

MPC_MAGIC = b"MPC1"
MPC_VERSION = 1
_MPC_HEADER = struct.Struct("<4sIQIB")


def encode_cloud(pc: PointCloud) -> bytes:
    has_labels = pc.labels is not None
    header = _MPC_HEADER.pack(MPC_MAGIC, MPC_VERSION, len(pc), pc.num_channels, int(has_labels))
    parts = [
        header,
        np.ascontiguousarray(pc.positions, dtype="<f4").tobytes(),
        np.ascontiguousarray(pc.features, dtype="<f4").tobytes(),
    ]
    if has_labels:
        parts.append(np.ascontiguousarray(pc.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_cloud(buf: bytes) -> PointCloud:
    if len(buf) < 4 or buf[:4] != MPC_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MPC_MAGIC!r}", offset=0)
    if len(buf) < _MPC_HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, n, c, has_labels = _MPC_HEADER.unpack_from(buf, 0)
    if version != MPC_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels flag must be 0 or 1, got {has_labels}", offset=20)
    off = _MPC_HEADER.size
    sizes = [("positions", n * 3 * 4), ("features", n * c * 4)] + ([("labels", n * 4)] if has_labels else [])
    arrays = {}
    for name, nbytes in sizes:
        if off + nbytes > len(buf):
            raise FormatError(f"truncated {name}: need {nbytes} bytes, have {len(buf) - off}", offset=off)
        arrays[name] = buf[off : off + nbytes]
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off)
    pos = np.frombuffer(arrays["positions"], dtype="<f4").reshape(n, 3).astype(np.float32)
    feats = np.frombuffer(arrays["features"], dtype="<f4").reshape(n, c).astype(np.float32)
    labels = np.frombuffer(arrays["labels"], dtype="<i4").astype(np.int32) if has_labels else None
    return PointCloud(pos, feats, labels)


def write_cloud(pc: PointCloud, path) -> None:
    Path(path).write_bytes(encode_cloud(pc))


def read_cloud(path) -> PointCloud:
    return decode_cloud(Path(path).read_bytes())
