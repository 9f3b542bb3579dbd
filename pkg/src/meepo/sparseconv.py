"""Submanifold sparse 3D convolution over Morton-serialized voxels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimensionError, ParameterError
from .numerics import Tensor, make_op
from .pointcloud import MORTON_LIMIT, SerializedVoxels, morton_encode


@numba.njit(cache=True)
def _slot(key, mask):
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    return np.int64((h >> np.uint64(17)) & np.uint64(mask))


@numba.njit(cache=True)
def _hash_insert(table_keys, table_vals, keys):
    mask = table_keys.shape[0] - 1
    for i in range(keys.shape[0]):
        s = _slot(keys[i], mask)
        while table_keys[s] != -1 and table_keys[s] != keys[i]:
            s = (s + 1) & mask
        table_keys[s] = keys[i]
        table_vals[s] = i


@numba.njit(cache=True)
def _hash_lookup(table_keys, table_vals, queries):
    mask = table_keys.shape[0] - 1
    out = np.full(queries.shape[0], -1, dtype=np.int64)
    for i in range(queries.shape[0]):
        q = queries[i]
        if q < 0:
            continue
        s = _slot(q, mask)
        while table_keys[s] != -1:
            if table_keys[s] == q:
                out[i] = table_vals[s]
                break
            s = (s + 1) & mask
    return out


class KeyIndex:
    """Open-addressing (linear probing) map from 63-bit Morton keys to row indices."""

    def __init__(self, keys: np.ndarray):
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        cap = 1
        while cap < 2 * max(keys.shape[0], 1):
            cap <<= 1
        self.table_keys = np.full(cap, -1, dtype=np.int64)
        self.table_vals = np.full(cap, -1, dtype=np.int64)
        _hash_insert(self.table_keys, self.table_vals, keys)
        self.size = keys.shape[0]

    def lookup(self, keys) -> np.ndarray:
        """Row index per query key, ``-1`` when absent."""
        return _hash_lookup(self.table_keys, self.table_vals, np.ascontiguousarray(keys, dtype=np.int64))

    def __len__(self) -> int:
        return self.size


def kernel_offsets(k: int) -> np.ndarray:
    """All ``k**3`` offsets as (dx, dy, dz) rows, enumerated with z slowest and x fastest."""
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel size must be odd and >= 1, got {k}")
    r = (k - 1) // 2
    rng = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(rng, rng, rng, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)


@dataclass
class KernelMap:
    k: int
    offset_index: np.ndarray
    input_row: np.ndarray
    output_row: np.ndarray
    buckets: list[tuple[int, np.ndarray, np.ndarray]] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return self.offset_index.shape[0]

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.offset_index.tolist(), self.input_row.tolist(), self.output_row.tolist()))


class SparseTensor:
    """Features attached to a fixed set of active voxels.

    The geometry (coords, keys, hash index, kernel maps) is shared between
    tensors derived with :meth:`with_features`.
    """

    def __init__(self, coords: np.ndarray, keys: np.ndarray, features, _geometry: dict | None = None):
        self.coords = np.asarray(coords, dtype=np.int64)
        self.keys = np.asarray(keys, dtype=np.int64)
        self.features = features if isinstance(features, Tensor) else Tensor(features)
        if self.features.shape[0] != self.keys.shape[0]:
            raise DimensionError(f"{self.features.shape[0]} feature rows for {self.keys.shape[0]} voxels")
        self._geometry = _geometry if _geometry is not None else {}

    @classmethod
    def from_voxels(cls, v: SerializedVoxels, features=None) -> "SparseTensor":
        return cls(v.coords, v.keys, v.features if features is None else features)

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def index(self) -> KeyIndex:
        if "index" not in self._geometry:
            self._geometry["index"] = KeyIndex(self.keys)
        return self._geometry["index"]

    def lookup(self, coords) -> np.ndarray:
        """Row index of each coordinate triple, ``-1`` if not active."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        valid = np.all((coords >= 0) & (coords < MORTON_LIMIT), axis=1)
        keys = np.full(coords.shape[0], -1, dtype=np.int64)
        if valid.any():
            keys[valid] = morton_encode(coords[valid])
        return self.index.lookup(keys)

    def kernel_map(self, k: int) -> KernelMap:
        cache = self._geometry.setdefault("kmaps", {})
        if k not in cache:
            cache[k] = build_kernel_map(self, k)
        return cache[k]

    def with_features(self, features: Tensor) -> "SparseTensor":
        return SparseTensor(self.coords, self.keys, features, self._geometry)


def build_kernel_map(st: SparseTensor, k: int) -> KernelMap:
    """Triples ``(offset_index, input_row, output_row)`` with output = input + offset, both active."""
    offsets = kernel_offsets(k)
    M = len(st)
    off_idx, in_rows, out_rows, buckets = [], [], [], []
    src = np.arange(M, dtype=np.int64)
    for o, d in enumerate(offsets):
        dst = st.lookup(st.coords + d)
        hit = dst >= 0
        if not hit.any():
            continue
        i_rows, o_rows = src[hit], dst[hit]
        off_idx.append(np.full(i_rows.shape[0], o, dtype=np.int64))
        in_rows.append(i_rows)
        out_rows.append(o_rows)
        buckets.append((o, i_rows, o_rows))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    return KernelMap(k, cat(off_idx), cat(in_rows), cat(out_rows), buckets)


@dataclass
class ConvKernel3D:
    weight: Tensor  # (k**3, Cin, Cout)
    bias: Tensor | None
    k: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ParameterError(f"kernel size must be odd and >= 1, got {self.k}")
        if self.weight.data.ndim != 3 or self.weight.shape[0] != self.k**3:
            raise DimensionError(f"weight shape {self.weight.shape} does not fit k={self.k}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]


def conv_multiply_count(kmap: KernelMap, cin: int, cout: int) -> int:
    """Scalar multiplies performed by :func:`submanifold_conv` for one layer."""
    return int(len(kmap)) * cin * cout


def submanifold_conv(st: SparseTensor, kern: ConvKernel3D) -> SparseTensor:
    """``out[q] = bias + sum_o W[o]^T in[q - o]`` over active ``q - o``; active set is unchanged."""
    x = st.features
    if x.shape[1] != kern.in_channels:
        raise DimensionError(f"input width {x.shape[1]} != kernel in_channels {kern.in_channels}")
    kmap = st.kernel_map(kern.k)
    W = kern.weight
    out = np.zeros((x.shape[0], kern.out_channels), dtype=x.dtype)
    for o, i_rows, o_rows in kmap.buckets:
        # each output row appears at most once per offset, so plain fancy-index add is safe
        out[o_rows] += x.data[i_rows] @ W.data[o]
    if kern.bias is not None:
        out += kern.bias.data

    def back(g):
        gx = np.zeros_like(x.data)
        gW = np.zeros_like(W.data)
        for o, i_rows, o_rows in kmap.buckets:
            go = g[o_rows]
            gx[i_rows] += go @ W.data[o].T
            gW[o] = x.data[i_rows].T @ go
        grads = [gx, gW]
        if kern.bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, W) if kern.bias is None else (x, W, kern.bias)
    return st.with_features(make_op(out, inputs, back, "submanifold_conv"))
