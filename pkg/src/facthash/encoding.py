"""Map-reduce parametric encoders.

Every encoder here follows the same pattern: a point ``x`` in the unit cube is
*mapped* to ``G`` lower- or equal-dimensional lattice coordinates per level,
each mapped coordinate is looked up (multilinear interpolation over the
surrounding ``2^d`` lattice vertices) in its own partition of a feature table,
and the ``G`` looked-up vectors are *reduced* into one vector per level.
Levels are always concatenated.

Instantiations:

* :class:`FactHashEncoder` -- tri-plane map, per-plane hash tables, Hadamard reduce.
* :class:`HashGrid3DEncoder` -- identity map, one 3D hash table per level.
* :class:`TriPlaneEncoder` -- Fact-Hash with unbounded (explicit) tables.
* :class:`DenseGridEncoder` -- 3D grid with unbounded (explicit) tables.
* :class:`GeneralEncoder` -- arbitrary map tensor / table partition / reduce.

Lattice conventions: a level of resolution ``N`` has ``N + 1`` vertices per
axis. A partition whose lattice fits in its rows is indexed row-major
(injective); otherwise vertices are hashed with
``xor_i(c_i * PRIMES[i]) mod rows``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np
import torch
from torch import nn

PRIMES = (1, 2654435761, 805459861)
_PRIMES = np.array(PRIMES, dtype=np.int64)
INIT_RANGE = 1e-4
REDUCE_MODES = ("hadamard", "concat", "sum")

# plane id -> (first axis, second axis)
PLANE_AXES = {0: (0, 1), 1: (1, 2), 2: (2, 0)}
PLANE_NAMES = {0: "xy", 1: "yz", 2: "zx"}


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LevelSchedule:
    n_min: int
    n_max: int
    levels: int
    resolutions: Tuple[int, ...]
    growth: Optional[float]


def level_resolutions(n_min: int, n_max: int, levels: int) -> LevelSchedule:
    """Geometric resolution schedule ``N_l = floor(n_min * b**l)``.

    ``b = exp(ln(n_max / n_min) / (levels - 1))``. A single-level schedule
    has no growth factor and resolves to ``[n_min]``.
    """
    if levels < 1:
        raise InvalidConfigError(f"levels must be >= 1, got {levels}")
    if n_min < 1:
        raise InvalidConfigError(f"n_min must be >= 1, got {n_min}")
    if n_max < n_min:
        raise InvalidConfigError(f"n_max ({n_max}) must be >= n_min ({n_min})")
    if levels == 1:
        return LevelSchedule(n_min, n_max, 1, (n_min,), None)
    growth = math.exp(math.log(n_max / n_min) / (levels - 1))
    # the relative nudge keeps exact integer powers (e.g. b**15 == 32) from
    # flooring one below
    res = tuple(
        int(math.floor(n_min * growth**l * (1.0 + 1e-12))) for l in range(levels)
    )
    return LevelSchedule(n_min, n_max, levels, res, growth)


def hash_index(lattice_point: Sequence[int], table_size: int, grid_resolution: int) -> int:
    """Scalar reference for the vertex -> row mapping of one table."""
    d = len(lattice_point)
    side = grid_resolution + 1
    if side**d <= table_size:
        idx, stride = 0, 1
        for c in lattice_point:
            idx += int(c) * stride
            stride *= side
        return idx
    h = 0
    for c, p in zip(lattice_point, PRIMES):
        h ^= int(c) * p
    return h % table_size


def _lattice_rows(dims: Sequence[int]) -> int:
    return int(np.prod([int(n) for n in dims], dtype=object))


def partition_rows(dims: Sequence[int], table_size: Optional[int]) -> int:
    """Rows used by one lookup partition with lattice vertex counts ``dims``."""
    full = _lattice_rows(dims)
    return full if table_size is None else min(table_size, full)


def cell_corners(u: torch.Tensor, extents: torch.Tensor):
    """Corner lattice coordinates and multilinear weights of ``2^d`` vertices.

    ``u`` holds scaled coordinates ``(..., d)`` and ``extents`` the per-axis
    cell counts broadcastable to ``u``. Corner ``c`` uses the upper vertex on
    axis ``j`` iff bit ``j`` of ``c`` is set. Axes of extent 0 collapse onto
    vertex 0 with zero weight on the (clamped) upper corner.

    Returns ``(coords (..., 2^d, d) int64, weights (..., 2^d))``.
    """
    d = u.shape[-1]
    ext = extents.to(torch.int64)
    lo = torch.floor(u).to(torch.int64)
    lo = torch.minimum(torch.clamp(lo, min=0), torch.clamp(ext - 1, min=0))
    frac = u - lo.to(u.dtype)
    hi = torch.minimum(lo + 1, ext)
    coords, weights = [], []
    for c in range(2**d):
        cc, w = [], None
        for j in range(d):
            if (c >> j) & 1:
                cc.append(hi[..., j])
                wj = frac[..., j]
            else:
                cc.append(lo[..., j])
                wj = 1.0 - frac[..., j]
            w = wj if w is None else w * wj
        coords.append(torch.stack(cc, dim=-1))
        weights.append(w)
    return torch.stack(coords, dim=-2), torch.stack(weights, dim=-1)


def lattice_to_rows(coords: torch.Tensor, dims: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`hash_index` with per-lookup lattice dims and row counts.

    ``coords`` is ``(..., d)``; ``dims`` (vertex counts) and ``rows`` broadcast
    against ``coords[..., :]`` and ``coords[..., 0]`` respectively.
    """
    d = coords.shape[-1]
    dims = dims.to(torch.int64)
    rows = rows.to(torch.int64)
    direct = torch.zeros_like(coords[..., 0])
    stride = torch.ones_like(direct)
    hashed = torch.zeros_like(direct)
    for j in range(d):
        direct = direct + coords[..., j] * stride
        stride = stride * dims[..., j]
        hashed = torch.bitwise_xor(hashed, coords[..., j] * PRIMES[j])
    fits = stride <= rows
    return torch.where(fits, direct, torch.remainder(hashed, rows))


def interpolate_cell(
    point: torch.Tensor,
    table: torch.Tensor,
    grid_resolution: int,
    table_size: Optional[int] = None,
) -> torch.Tensor:
    """Multilinearly interpolate ``table`` at scaled points ``(P, d)``.

    ``point`` is already multiplied by ``grid_resolution``. ``table`` must have
    :func:`partition_rows` rows for the lattice.
    """
    point = torch.as_tensor(point, dtype=table.dtype)
    squeeze = point.ndim == 1
    if squeeze:
        point = point[None]
    d = point.shape[-1]
    ext = torch.full((d,), grid_resolution, dtype=torch.int64)
    coords, w = cell_corners(point, ext)
    rows = torch.tensor(partition_rows([grid_resolution + 1] * d, table_size))
    idx = lattice_to_rows(coords, ext + 1, rows)
    feats = table[idx]
    out = feats[..., 0, :] * w[..., 0, None]
    for c in range(1, w.shape[-1]):
        out = out + feats[..., c, :] * w[..., c, None]
    return out[0] if squeeze else out


def map_project(map_tensor: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Contract ``x (..., D)`` with ``M (D, G, D)`` over its first axis -> ``(..., G, D)``."""
    m = torch.as_tensor(map_tensor, dtype=x.dtype)
    return torch.einsum("...i,igj->...gj", x, m)


def reduce_features(per_group: Sequence[torch.Tensor], mode: str) -> torch.Tensor:
    """Combine group features in group order (left-to-right for products and sums)."""
    if mode not in REDUCE_MODES:
        raise InvalidConfigError(f"unknown reduce mode {mode!r}")
    if mode == "concat":
        return torch.cat(list(per_group), dim=-1)
    sizes = {t.shape[-1] for t in per_group}
    if len(sizes) != 1:
        raise ValueError(f"{mode} reduce needs equal feature lengths, got {sorted(sizes)}")
    out = per_group[0]
    for t in per_group[1:]:
        out = out * t if mode == "hadamard" else out + t
    return out


class HashTableSet(nn.Module):
    """Learnable tables keyed by ``(plane_id, level)``, stored in one flat parameter.

    Every key owns a disjoint ``[offset, offset + rows)`` slice of ``data``;
    ``table_size`` caps the rows of each slice (``None`` = explicit grid).
    """

    def __init__(
        self,
        lattice_dims: Dict[Tuple[int, int], Tuple[int, ...]],
        table_size: Optional[int],
        feature_dim: int,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if table_size is not None and table_size < 1:
            raise InvalidConfigError(f"table_size must be >= 1, got {table_size}")
        if feature_dim < 1:
            raise InvalidConfigError(f"feature_dim must be >= 1, got {feature_dim}")
        self.table_size = table_size
        self.feature_dim = feature_dim
        self.slots: Dict[Tuple[int, int], Tuple[int, int]] = {}
        offset = 0
        for key, dims in lattice_dims.items():
            n = partition_rows(dims, table_size)
            self.slots[key] = (offset, n)
            offset += n
        init = torch.rand(offset, feature_dim, generator=generator, dtype=torch.float64)
        self.data = nn.Parameter((init * 2.0 - 1.0).mul_(INIT_RANGE).to(dtype))

    @property
    def total_rows(self) -> int:
        return self.data.shape[0]

    def table(self, plane_id: int, level: int) -> torch.Tensor:
        off, n = self.slots[(plane_id, level)]
        return self.data[off : off + n]


@dataclass
class _Plan:
    """Static per-lookup geometry for a (group, level) grid of lookups."""

    extents: torch.Tensor  # (G, L, d) cells per axis
    offsets: torch.Tensor  # (G, L)
    rows: torch.Tensor  # (G, L)

    def __post_init__(self):
        dims = self.extents + 1
        strides = torch.ones_like(dims)
        strides[..., 1:] = torch.cumprod(dims[..., :-1], dim=-1)
        self.strides = strides
        self.fits = (strides[..., -1] * dims[..., -1]) <= self.rows


@dataclass
class _Trace:
    u: torch.Tensor  # (P, G, L, d) scaled lattice coordinates
    feats: torch.Tensor  # (P, G, L, F) interpolated group features


# Both kernels walk points, groups, levels and the 2^d corners in the same
# fixed order; corner c takes the upper vertex on axis j iff bit j is set.


@numba.njit(cache=True)
def _lookup_fwd(u, ext, strides, fits, offsets, rows, data, out):
    n_p, n_g, n_l, d = u.shape
    n_f = data.shape[1]
    lo = np.zeros(3, dtype=np.int64)
    fr = np.zeros(3, dtype=np.float64)
    for p in range(n_p):
        for g in range(n_g):
            for l in range(n_l):
                for j in range(d):
                    x = u[p, g, l, j]
                    top = max(ext[g, l, j] - 1, 0)
                    lo[j] = min(max(int(np.floor(x)), 0), top)
                    fr[j] = x - lo[j]
                fit = fits[g, l]
                n_rows = rows[g, l]
                off = offsets[g, l]
                for c in range(1 << d):
                    wgt = 1.0
                    direct = 0
                    hashed = 0
                    for j in range(d):
                        if (c >> j) & 1:
                            v = min(lo[j] + 1, ext[g, l, j])
                            wj = fr[j]
                        else:
                            v = lo[j]
                            wj = 1.0 - fr[j]
                        wgt = wgt * wj
                        direct += v * strides[g, l, j]
                        hashed ^= v * _PRIMES[j]
                    row = off + (direct if fit else hashed % n_rows)
                    for f in range(n_f):
                        out[p, g, l, f] += wgt * data[row, f]


@numba.njit(cache=True)
def _lookup_bwd(u, ext, strides, fits, offsets, rows, grad_feats, grad_data):
    n_p, n_g, n_l, d = u.shape
    n_f = grad_data.shape[1]
    lo = np.zeros(3, dtype=np.int64)
    fr = np.zeros(3, dtype=np.float64)
    for p in range(n_p):
        for g in range(n_g):
            for l in range(n_l):
                for j in range(d):
                    x = u[p, g, l, j]
                    top = max(ext[g, l, j] - 1, 0)
                    lo[j] = min(max(int(np.floor(x)), 0), top)
                    fr[j] = x - lo[j]
                fit = fits[g, l]
                n_rows = rows[g, l]
                off = offsets[g, l]
                for c in range(1 << d):
                    wgt = 1.0
                    direct = 0
                    hashed = 0
                    for j in range(d):
                        if (c >> j) & 1:
                            v = min(lo[j] + 1, ext[g, l, j])
                            wj = fr[j]
                        else:
                            v = lo[j]
                            wj = 1.0 - fr[j]
                        wgt = wgt * wj
                        direct += v * strides[g, l, j]
                        hashed ^= v * _PRIMES[j]
                    row = off + (direct if fit else hashed % n_rows)
                    for f in range(n_f):
                        grad_data[row, f] += wgt * grad_feats[p, g, l, f]


def _plan_arrays(plan: _Plan):
    return (plan.extents.numpy(), plan.strides.numpy(), plan.fits.numpy(),
            plan.offsets.numpy(), plan.rows.numpy())


def _gather(u: torch.Tensor, plan: _Plan, data: torch.Tensor) -> _Trace:
    u = u.detach().contiguous()
    tab = data.detach().numpy()
    out = np.zeros(tuple(u.shape[:-1]) + (tab.shape[1],), dtype=tab.dtype)
    _lookup_fwd(u.numpy(), *_plan_arrays(plan), tab, out)
    return _Trace(u, torch.from_numpy(out))


def _reduce_groups(feats: torch.Tensor, mode: str) -> torch.Tensor:
    """(P, G, L, F) -> (P, L * out) with levels outermost."""
    per_group = [feats[:, g] for g in range(feats.shape[1])]
    out = reduce_features(per_group, mode)  # (P, L, F or G*F)
    return out.reshape(out.shape[0], -1)


def _group_upstream(feats: torch.Tensor, upstream: torch.Tensor, mode: str) -> torch.Tensor:
    """d(reduced)/d(group feature) contracted with ``upstream``; returns (P, G, L, F)."""
    p, g, l, f = feats.shape
    if mode == "concat":
        return upstream.reshape(p, l, g, f).permute(0, 2, 1, 3)
    up = upstream.reshape(p, l, f)
    if mode == "sum":
        return up[:, None].expand(p, g, l, f)
    # product of all other groups via prefix/suffix products (no division)
    ones = torch.ones_like(feats[:, 0])
    prefix, acc = [], ones
    for k in range(g):
        prefix.append(acc)
        acc = acc * feats[:, k]
    suffix, acc = [None] * g, ones
    for k in reversed(range(g)):
        suffix[k] = acc
        acc = acc * feats[:, k]
    return torch.stack([up * prefix[k] * suffix[k] for k in range(g)], dim=1)


def _scatter(trace: _Trace, group_grad: torch.Tensor, plan: _Plan, total_rows: int) -> torch.Tensor:
    gg = group_grad.detach().to(trace.feats.dtype).contiguous().numpy()
    out = np.zeros((total_rows, gg.shape[-1]), dtype=gg.dtype)
    _lookup_bwd(trace.u.numpy(), *_plan_arrays(plan), gg, out)
    return torch.from_numpy(out)


class _EncodeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, data, encoder):
        trace = encoder._trace(x, data)
        ctx.encoder = encoder
        ctx.trace = trace
        ctx.total_rows = data.shape[0]
        return _reduce_groups(trace.feats, encoder.reduce_mode)

    @staticmethod
    def backward(ctx, grad_out):
        trace = ctx.trace
        gg = _group_upstream(trace.feats, grad_out, ctx.encoder.reduce_mode)
        return None, _scatter(trace, gg, ctx.encoder.plan, ctx.total_rows), None


class _GridEncoder(nn.Module):
    """Shared machinery: subclasses define ``_scaled_coords`` and the plan."""

    reduce_mode = "hadamard"
    kind = "grid"

    def _setup(self, extents: np.ndarray, table_size, feature_dim, dtype, generator):
        g, l, _ = extents.shape
        dims = {(gi, li): tuple(int(e) + 1 for e in extents[gi, li]) for gi in range(g) for li in range(l)}
        self.tables = HashTableSet(dims, table_size, feature_dim, dtype, generator)
        offsets = np.zeros((g, l), dtype=np.int64)
        rows = np.zeros((g, l), dtype=np.int64)
        for (gi, li), (off, n) in self.tables.slots.items():
            offsets[gi, li], rows[gi, li] = off, n
        self.plan = _Plan(torch.as_tensor(extents, dtype=torch.int64), torch.as_tensor(offsets), torch.as_tensor(rows))
        self.feature_dim = feature_dim
        self.table_size = table_size

    @property
    def n_levels(self) -> int:
        return self.plan.offsets.shape[1]

    @property
    def output_dim(self) -> int:
        g = self.plan.offsets.shape[0]
        per = self.feature_dim * (g if self.reduce_mode == "concat" else 1)
        return self.n_levels * per

    def param_count(self) -> int:
        return self.tables.data.numel()

    def _check_inside(self, x: torch.Tensor):
        if x.ndim != 2 or x.shape[-1] != self.input_dim:
            raise ValueError(f"expected points of shape (P, {self.input_dim}), got {tuple(x.shape)}")
        if x.numel() and (x.min() < 0 or x.max() > 1 or not torch.isfinite(x).all()):
            raise ValueError("encoder input must lie inside the unit cube")

    def _trace(self, x: torch.Tensor, data: torch.Tensor) -> _Trace:
        return _gather(self._scaled_coords(x.to(data.dtype)), self.plan, data)

    def forward(self, x: torch.Tensor, check: bool = True) -> torch.Tensor:
        if check:
            self._check_inside(x)
        return _EncodeFn.apply(x, self.tables.data, self)

    def backward_tables(self, x: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
        """Dense gradient of ``<upstream, forward(x)>`` w.r.t. the flat table."""
        with torch.no_grad():
            trace = self._trace(x, self.tables.data)
            gg = _group_upstream(trace.feats, upstream.to(trace.feats.dtype), self.reduce_mode)
            return _scatter(trace, gg, self.plan, self.tables.total_rows)


class FactHashEncoder(_GridEncoder):
    """Tri-plane projection, one (hashed) table per plane per level, Hadamard reduce."""

    kind = "facthash"
    input_dim = 3
    reduce_mode = "hadamard"

    def __init__(self, schedule: LevelSchedule, table_size: Optional[int], feature_dim: int = 2,
                 dtype: torch.dtype = torch.float32, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.schedule = schedule
        res = np.asarray(schedule.resolutions, dtype=np.int64)
        extents = np.broadcast_to(res[None, :, None], (3, len(res), 2)).copy()
        self._setup(extents, table_size, feature_dim, dtype, generator)
        self._res = torch.as_tensor(res)

    def _scaled_coords(self, x: torch.Tensor) -> torch.Tensor:
        planes = torch.stack([x[:, list(PLANE_AXES[p])] for p in range(3)], dim=1)  # (P, 3, 2)
        return planes[:, :, None, :] * self._res.to(x.dtype)[None, None, :, None]


class TriPlaneEncoder(FactHashEncoder):
    kind = "triplane"

    def __init__(self, schedule, feature_dim=2, dtype=torch.float32, generator=None):
        super().__init__(schedule, None, feature_dim, dtype, generator)


class HashGrid3DEncoder(_GridEncoder):
    """One 3D (hashed) table per level, levels concatenated."""

    kind = "hashgrid3d"
    input_dim = 3
    reduce_mode = "hadamard"  # single group: any reduce is the identity

    def __init__(self, schedule: LevelSchedule, table_size: Optional[int], feature_dim: int = 2,
                 dtype: torch.dtype = torch.float32, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.schedule = schedule
        res = np.asarray(schedule.resolutions, dtype=np.int64)
        extents = np.broadcast_to(res[None, :, None], (1, len(res), 3)).copy()
        self._setup(extents, table_size, feature_dim, dtype, generator)
        self._res = torch.as_tensor(res)

    def _scaled_coords(self, x: torch.Tensor) -> torch.Tensor:
        return x[:, None, None, :] * self._res.to(x.dtype)[None, None, :, None]


class DenseGridEncoder(HashGrid3DEncoder):
    kind = "densegrid"

    def __init__(self, schedule, feature_dim=2, dtype=torch.float32, generator=None):
        super().__init__(schedule, None, feature_dim, dtype, generator)


@dataclass
class GeneralEncoderConfig:
    """Map tensor ``M (D, G, D)``, per-group table partition, reduce mode.

    ``hash_mask`` is the ``(G, T)`` boolean mask restricting each group to a
    contiguous block of rows of one logical per-level table of ``T`` rows. It
    defaults to consecutive disjoint blocks sized to each group's lattice
    (capped at ``table_size``). Mapped coordinates are further multiplied by
    the level resolution from ``schedule``.
    """

    map_tensor: np.ndarray
    schedule: LevelSchedule
    feature_dim: int = 2
    table_size: Optional[int] = None
    reduce_mode: str = "hadamard"
    hash_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        m = np.asarray(self.map_tensor, dtype=np.float64)
        if m.ndim != 3 or m.shape[0] != m.shape[2]:
            raise InvalidConfigError(f"map tensor must be (D, G, D), got {m.shape}")
        if not np.isfinite(m).all() or (m < 0).any():
            raise InvalidConfigError("map tensor entries must be finite and nonnegative")
        if self.reduce_mode not in REDUCE_MODES:
            raise InvalidConfigError(f"unknown reduce mode {self.reduce_mode!r}")
        self.map_tensor = m
        if self.hash_mask is not None:
            b = np.asarray(self.hash_mask, dtype=bool)
            if b.shape[0] != self.group_count:
                raise InvalidConfigError("hash_mask needs one row per group")
            if not b.any(axis=1).all():
                raise InvalidConfigError("every hash_mask row needs at least one true entry")
            self.hash_mask = b

    @property
    def input_dim(self) -> int:
        return self.map_tensor.shape[0]

    @property
    def group_count(self) -> int:
        return self.map_tensor.shape[1]

    def extents(self) -> np.ndarray:
        """Cells per mapped axis, (G, L, D): the unit cube's image scaled by ``N_l``."""
        reach = self.map_tensor.sum(axis=0)  # (G, D)
        res = np.asarray(self.schedule.resolutions, dtype=np.float64)
        return np.ceil(reach[:, None, :] * res[None, :, None] - 1e-9).astype(np.int64)

    def partitions(self) -> List[Tuple[int, int]]:
        """(offset, length) of each group's block inside the logical table."""
        if self.hash_mask is None:
            return []
        out = []
        for row in self.hash_mask:
            on = np.flatnonzero(row)
            if on[-1] - on[0] + 1 != on.size:
                raise InvalidConfigError("hash_mask rows must be contiguous blocks")
            out.append((int(on[0]), int(on.size)))
        return out


def triplane_map_tensor() -> np.ndarray:
    """M with slices sending (x, y, z) to (x, y, 0), (y, z, 0), (z, x, 0)."""
    m = np.zeros((3, 3, 3))
    for g, (a, b) in PLANE_AXES.items():
        m[a, g, 0] = 1.0
        m[b, g, 1] = 1.0
    return m


def vector_matrix_map_tensor() -> np.ndarray:
    """Six-slice M: (x,y,0), (0,0,z), (0,y,z), (x,0,0), (x,0,z), (0,y,0)."""
    keep = [(0, 1), (2,), (1, 2), (0,), (0, 2), (1,)]
    m = np.zeros((3, 6, 3))
    for g, axes in enumerate(keep):
        for a in axes:
            m[a, g, a] = 1.0
    return m


def diagonal_levels_map_tensor(resolutions: Sequence[int], dim: int = 3) -> np.ndarray:
    """M with slice ``l`` = ``N_l * I``: one group per resolution level."""
    m = np.zeros((dim, len(resolutions), dim))
    for l, n in enumerate(resolutions):
        m[np.arange(dim), l, np.arange(dim)] = float(n)
    return m


class GeneralEncoder(_GridEncoder):
    kind = "general"

    def __init__(self, config: GeneralEncoderConfig, dtype: torch.dtype = torch.float32,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.input_dim = config.input_dim
        self.reduce_mode = config.reduce_mode
        extents = config.extents()
        self._setup(extents, config.table_size, config.feature_dim, dtype, generator)
        parts = config.partitions()
        if parts:
            # explicit mask: groups share one logical table per level, each
            # group confined to its block
            width = config.hash_mask.shape[1]
            offsets = np.zeros_like(self.plan.offsets.numpy())
            rows = np.zeros_like(offsets)
            for li in range(extents.shape[1]):
                for gi, (start, length) in enumerate(parts):
                    offsets[gi, li] = li * width + start
                    rows[gi, li] = length
            self.plan = _Plan(self.plan.extents, torch.as_tensor(offsets), torch.as_tensor(rows))
            total = width * extents.shape[1]
            init = torch.rand(total, config.feature_dim, generator=generator, dtype=torch.float64)
            self.tables.data = nn.Parameter((init * 2.0 - 1.0).mul_(INIT_RANGE).to(dtype))
            self.tables.slots = {(gi, li): (int(offsets[gi, li]), int(rows[gi, li]))
                                 for gi in range(len(parts)) for li in range(extents.shape[1])}
        self._map = torch.as_tensor(config.map_tensor)
        self._res = torch.as_tensor(np.asarray(config.schedule.resolutions, dtype=np.int64))

    def _scaled_coords(self, x: torch.Tensor) -> torch.Tensor:
        mapped = map_project(self._map, x)  # (P, G, D)
        return mapped[:, :, None, :] * self._res.to(x.dtype)[None, None, :, None]


def encode_facthash(x: torch.Tensor, encoder: FactHashEncoder) -> torch.Tensor:
    """Fact-Hash features ``(P, L*F)`` for points in the unit cube."""
    return encoder(torch.as_tensor(x, dtype=encoder.tables.data.dtype))


def encode_hashgrid3d(x: torch.Tensor, encoder: HashGrid3DEncoder) -> torch.Tensor:
    return encoder(torch.as_tensor(x, dtype=encoder.tables.data.dtype))


def encode_backward(x: torch.Tensor, encoder: _GridEncoder, upstream: torch.Tensor) -> torch.Tensor:
    """Scatter ``upstream (P, out)`` onto the table rows touched by ``x``.

    Returns a dense gradient shaped like the flat table; rows no point touched
    are exactly zero.
    """
    x = torch.as_tensor(x, dtype=encoder.tables.data.dtype)
    encoder._check_inside(x)
    return encoder.backward_tables(x, torch.as_tensor(upstream))


def encoder_param_count(kind: str, schedule: LevelSchedule, feature_dim: int,
                        table_size: Optional[int] = None, planes: int = 3) -> int:
    """Learnable table entries for an encoder kind (MLP weights excluded)."""
    res = schedule.resolutions
    if kind == "facthash":
        return planes * sum(min(table_size, (n + 1) ** 2) for n in res) * feature_dim
    if kind == "triplane":
        return planes * sum((n + 1) ** 2 for n in res) * feature_dim
    if kind == "hashgrid3d":
        return sum(min(table_size, (n + 1) ** 3) for n in res) * feature_dim
    if kind == "densegrid":
        return sum((n + 1) ** 3 for n in res) * feature_dim
    raise InvalidConfigError(f"unknown encoder kind {kind!r}")


GENERAL_MAPS = {"triplane": triplane_map_tensor, "vector_matrix": vector_matrix_map_tensor}


def build_encoder(kind: str, schedule: LevelSchedule, feature_dim: int, table_size: Optional[int],
                  dtype: torch.dtype = torch.float32, generator: Optional[torch.Generator] = None,
                  map_name: str = "triplane", reduce_mode: str = "hadamard") -> _GridEncoder:
    if kind == "facthash":
        return FactHashEncoder(schedule, table_size, feature_dim, dtype, generator)
    if kind == "hashgrid3d":
        return HashGrid3DEncoder(schedule, table_size, feature_dim, dtype, generator)
    if kind == "triplane":
        return TriPlaneEncoder(schedule, feature_dim, dtype, generator)
    if kind == "densegrid":
        return DenseGridEncoder(schedule, feature_dim, dtype, generator)
    if kind == "general":
        if map_name not in GENERAL_MAPS:
            raise InvalidConfigError(f"unknown general map {map_name!r}")
        cfg = GeneralEncoderConfig(GENERAL_MAPS[map_name](), schedule, feature_dim, table_size, reduce_mode)
        return GeneralEncoder(cfg, dtype, generator)
    raise InvalidConfigError(f"unknown encoder kind {kind!r}")
