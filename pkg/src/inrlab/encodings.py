"""Coordinate encoders: Fourier positional encoding, full-resolution key table
and multi-resolution hash grid.

The two table encoders interpolate learnable keys. Their backward pass writes
into the key tables only and returns ``None`` for the coordinate gradient:
indexing a table by position gives the chain rule nothing to differentiate.
``coord_slope`` exposes the within-cell interpolation slope for diagnostics,
it is never used during training.
"""

from __future__ import annotations

import hashlib
import itertools
from collections import OrderedDict

import numpy as np

from .diffcore import DTYPE, ConfigError, DomainError, Parameter

HASH_PRIMES = (1, 2654435761, 805459861)
TABLE_INIT = 1e-4
# Grid positions closer than this to an integer snap onto the node.
_NODE_SNAP = 1e-9


def check_unit_cube(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != d:
        raise ConfigError(f"expected coordinates of shape (n, {d}), got {x.shape}")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise DomainError("coordinates must lie in [0, 1]")
    return x


class PositionalEncoding:
    """gamma(x) = (sin(2^i pi x_k), cos(2^i pi x_k)), dim-major then frequency."""

    coord_gradient = True

    def __init__(self, d_in: int, num_freqs: int = 10):
        if num_freqs < 1:
            raise ConfigError("num_freqs must be >= 1")
        self.d_in = d_in
        self.num_freqs = num_freqs
        self.freqs = (2.0 ** np.arange(num_freqs)) * np.pi

    @property
    def out_width(self) -> int:
        return 2 * self.num_freqs * self.d_in

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ConfigError(f"expected coordinates of shape (n, {self.d_in}), got {x.shape}")
        arg = x[:, :, None] * self.freqs  # (n, d, L)
        out = np.empty(arg.shape + (2,))  # (n, d, L, 2)
        np.sin(arg, out=out[..., 0])
        np.cos(arg, out=out[..., 1])
        return out.reshape(len(x), -1), out

    def backward(self, cache, upstream):
        sc = cache
        g = upstream.reshape(sc.shape)
        dx = (g[..., 0] * sc[..., 1] - g[..., 1] * sc[..., 0]) * self.freqs
        return dx.sum(axis=-1)


def cell_corners(x: np.ndarray, res: np.ndarray, extent=1.0):
    """Corner node indices and d-linear weights of the cell containing each x.

    ``res`` holds the node count per dimension and ``extent`` the coordinate of
    the last node (queries beyond it clamp to the boundary node). Returns
    ``idx`` of shape (2^d, n, d), ``weights`` (2^d, n), ``frac`` (n, d) and
    the corner offsets. Corner ``c`` has offset bit ``(c >> k) & 1`` along
    dimension ``k``.
    """
    u = np.minimum(x * ((res - 1) / extent), res - 1)
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) < _NODE_SNAP, nearest, u)
    base = np.clip(np.floor(u), 0, res - 2).astype(np.int64)
    frac = u - base
    d = x.shape[1]
    offsets = np.array(list(itertools.product((0, 1), repeat=d)))[:, ::-1]  # bit k -> dim k
    idx = base[None, :, :] + offsets[:, None, :]
    factors = (1.0 - frac, frac)
    w = np.empty((len(offsets), len(x)))
    for c, off in enumerate(offsets):
        np.copyto(w[c], factors[off[0]][:, 0])
        for k in range(1, d):
            w[c] *= factors[off[k]][:, k]
    return idx, w, frac, offsets


def row_major(idx: np.ndarray, res: np.ndarray) -> np.ndarray:
    """Flatten integer grid indices with dimension 0 most significant."""
    flat = np.zeros(idx.shape[:-1], dtype=np.int64)
    for k in range(idx.shape[-1]):
        flat = flat * int(res[k]) + idx[..., k]
    return flat


def spatial_hash(grid_index, table_size: int):
    """XOR of per-dimension index times prime, modulo the table size."""
    grid_index = np.asarray(grid_index, dtype=np.uint64)
    d = grid_index.shape[-1]
    if not 1 <= d <= len(HASH_PRIMES):
        raise ConfigError(f"spatial_hash supports 1-3 dimensions, got {d}")
    h = np.zeros(grid_index.shape[:-1], dtype=np.uint64)
    for k in range(d):
        h ^= grid_index[..., k] * np.uint64(HASH_PRIMES[k])
    return (h % np.uint64(table_size)).astype(np.int64)


class _LookupCache:
    """Small LRU of interpolation geometry (slots, weights) keyed by the exact
    bytes of the query batch; full-batch training queries the same points
    every step."""

    def __init__(self, size: int = 4):
        self.size = size
        self._store: OrderedDict = OrderedDict()

    def get(self, x: np.ndarray, compute):
        key = (x.shape, hashlib.blake2b(np.ascontiguousarray(x).tobytes(), digest_size=16).digest())
        hit = self._store.get(key)
        if hit is None:
            hit = compute(x)
            self._store[key] = hit
            if len(self._store) > self.size:
                self._store.popitem(last=False)
        else:
            self._store.move_to_end(key)
        return hit


def _slope(weights_frac, offsets, res, extent=1.0):
    """d(weight_c)/dx_k for every corner: (2^d, n, d)."""
    scale = (res - 1) / np.broadcast_to(extent, res.shape)
    frac = weights_frac
    d = frac.shape[1]
    out = np.empty((len(offsets), len(frac), d))
    for k in range(d):
        parts = np.where(offsets[:, None, :] == 1, frac[None], 1.0 - frac[None])
        parts[:, :, k] = np.where(offsets[:, None, k] == 1, 1.0, -1.0)
        out[:, :, k] = parts.prod(axis=-1) * scale[k]
    return out


def _scatter_add(grads: np.ndarray, flat_idx: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    """grads[flat_idx[c, i]] += weights[c, i] * upstream[i]; repeated slots add."""
    idx = flat_idx.reshape(-1)
    for f in range(grads.shape[1]):
        contrib = (weights * upstream[None, :, f]).reshape(-1)
        grads[:, f] += np.bincount(idx, weights=contrib, minlength=len(grads))


class FullResTable:
    """One learnable F-vector per grid node, read by d-linear interpolation.

    Nodes sit at ``k * extent / (r - 1)``. With ``extent < 1`` the lattice ends
    before the unit boundary and later coordinates read the last node.
    """

    coord_gradient = False

    def __init__(self, resolution, feature_width: int = 2, rng: np.random.Generator | None = None,
                 name: str = "table", extent=1.0):
        self.resolution = np.array(resolution, dtype=np.int64).reshape(-1)
        if np.any(self.resolution < 2):
            raise ConfigError("every table dimension needs at least 2 nodes")
        self.extent = np.broadcast_to(np.asarray(extent, dtype=DTYPE), self.resolution.shape).copy()
        if np.any(self.extent <= 0) or np.any(self.extent > 1):
            raise ConfigError("table extent must lie in (0, 1]")
        if feature_width < 1:
            raise ConfigError("feature_width must be >= 1")
        self.d_in = len(self.resolution)
        self.feature_width = feature_width
        rng = rng or np.random.default_rng(0)
        n_nodes = int(np.prod(self.resolution))
        self.entries = Parameter(
            f"{name}.entries",
            rng.uniform(-TABLE_INIT, TABLE_INIT, size=(n_nodes, feature_width)),
            group="table",
        )
        self._lookups = _LookupCache()

    @property
    def out_width(self) -> int:
        return self.feature_width

    def parameters(self) -> list[Parameter]:
        return [self.entries]

    def forward(self, x):
        x = check_unit_cube(x, self.d_in)
        flat, w = self._lookups.get(x, self._geometry)
        out = np.einsum("cn,cnf->nf", w, self.entries.values[flat])
        return out, (flat, w)

    def _geometry(self, x):
        idx, w, _, _ = cell_corners(x, self.resolution, self.extent)
        return row_major(idx, self.resolution), w

    def backward(self, cache, upstream):
        flat, w = cache
        _scatter_add(self.entries.grads, flat, w, upstream)
        return None

    def coord_slope(self, x):
        """Within-cell d(output)/dx, shape (n, F, d)."""
        x = check_unit_cube(x, self.d_in)
        idx, _, frac, offsets = cell_corners(x, self.resolution, self.extent)
        flat = row_major(idx, self.resolution)
        dw = _slope(frac, offsets, self.resolution, self.extent)
        # clamped region is flat
        dw = dw * (x * ((self.resolution - 1) / self.extent) <= self.resolution - 1)[None]
        return np.einsum("cnk,cnf->nfk", dw, self.entries.values[flat])


class MultiResHashGrid:
    """Per-level interpolated features from spatially hashed tables, concatenated
    coarse to fine. Levels with at most ``2**log2_table_size`` nodes are indexed
    densely and never collide."""

    coord_gradient = False

    def __init__(self, d_in: int, num_levels: int = 8, log2_table_size: int = 14,
                 feature_width: int = 2, base_resolution: int = 16, growth_factor: float = 1.5,
                 rng: np.random.Generator | None = None, name: str = "hashgrid"):
        if not 1 <= d_in <= 3:
            raise ConfigError("hash grid supports 1-3 input dimensions")
        if base_resolution < 2 or num_levels < 1 or feature_width < 1:
            raise ConfigError("invalid hash grid hyperparameters")
        self.d_in = d_in
        self.num_levels = num_levels
        self.table_size = 2 ** log2_table_size
        self.feature_width = feature_width
        self.resolutions = [int(np.floor(base_resolution * growth_factor ** l)) for l in range(num_levels)]
        self.dense = [n ** d_in <= self.table_size for n in self.resolutions]
        rng = rng or np.random.default_rng(0)
        self.levels = []
        for l, n in enumerate(self.resolutions):
            size = min(self.table_size, n ** d_in)
            self.levels.append(Parameter(
                f"{name}.level{l}",
                rng.uniform(-TABLE_INIT, TABLE_INIT, size=(size, feature_width)),
                group="table",
            ))
        self._lookups = _LookupCache()

    @property
    def out_width(self) -> int:
        return self.num_levels * self.feature_width

    def parameters(self) -> list[Parameter]:
        return list(self.levels)

    def level_index(self, level: int, idx: np.ndarray) -> np.ndarray:
        res = np.full(self.d_in, self.resolutions[level])
        if self.dense[level]:
            return row_major(idx, res)
        return spatial_hash(idx, self.table_size)

    def forward(self, x):
        x = check_unit_cube(x, self.d_in)
        caches = self._lookups.get(x, self._geometry)
        feats = [np.einsum("cn,cnf->nf", w, self.levels[l].values[slot]) for l, (slot, w) in enumerate(caches)]
        return np.concatenate(feats, axis=1), caches

    def _geometry(self, x):
        out = []
        for l, n in enumerate(self.resolutions):
            idx, w, _, _ = cell_corners(x, np.full(self.d_in, n))
            out.append((self.level_index(l, idx), w))
        return out

    def backward(self, caches, upstream):
        F = self.feature_width
        for l, (slot, w) in enumerate(caches):
            _scatter_add(self.levels[l].grads, slot, w, upstream[:, l * F:(l + 1) * F])
        return None

    def coord_slope(self, x):
        x = check_unit_cube(x, self.d_in)
        out = []
        for l, n in enumerate(self.resolutions):
            res = np.full(self.d_in, n)
            idx, _, frac, offsets = cell_corners(x, res)
            slot = self.level_index(l, idx)
            dw = _slope(frac, offsets, res)
            out.append(np.einsum("cnk,cnf->nfk", dw, self.levels[l].values[slot]))
        return np.concatenate(out, axis=1)
