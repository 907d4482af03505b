"""Pinhole rays, occupancy-gated ray marching and alpha compositing.

Camera convention follows the NeRF-synthetic (OpenGL) layout: the camera looks
down its local ``-z`` axis with ``+y`` up, and pixel ``(u, v)`` (column, row)
is sampled through its center ``(u + 0.5, v + 0.5)``.

Samples along a ray sit at ``t_k = t_near + k * step``. Each sample owns the
interval ``[t_k, t_k + delta_k)`` with ``delta_k = min(step, t_far - t_k)``,
whether or not its neighbours survive occupancy filtering, so skipped empty
space is never integrated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

TERMINATION_THRESHOLD = 1e-4


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4, 4) camera-to-world

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.isfinite(self.c2w).all():
            raise ValueError("camera pose must be finite")
        check_rotation(self.c2w[:3, :3])

    @classmethod
    def from_fov(cls, camera_angle_x: float, width: int, height: int, c2w) -> "Camera":
        f = 0.5 * width / np.tan(0.5 * camera_angle_x)
        return cls(f, f, 0.5 * width, 0.5 * height, width, height, c2w)

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]


def check_rotation(r: np.ndarray, tol: float = 1e-5) -> None:
    if np.abs(r @ r.T - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("pose rotation is not orthonormal with determinant +1")


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
    return c2w


def all_pixels(camera: Camera) -> np.ndarray:
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions (float64) for ``(N, 2)`` pixel ``(u, v)``."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if (u < 0).any() or (v < 0).any() or (u >= camera.width).any() or (v >= camera.height).any():
        raise ValueError("pixel outside the image")
    d_cam = np.stack(
        [
            (u + 0.5 - camera.cx) / camera.fx,
            -(v + 0.5 - camera.cy) / camera.fy,
            -np.ones(len(u)),
        ],
        axis=-1,
    )
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return o, d


def ray_aabb(origins, dirs, aabb):
    """Slab test. Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped to 0."""
    o = torch.as_tensor(origins, dtype=torch.float64)
    d = torch.as_tensor(dirs, dtype=torch.float64)
    box = torch.as_tensor(aabb, dtype=torch.float64).reshape(2, 3)
    inv = 1.0 / d
    t0 = (box[0] - o) * inv
    t1 = (box[1] - o) * inv
    # 0 * inf for origins on a slab plane of a parallel ray
    t0 = torch.nan_to_num(t0, nan=-float("inf"))
    t1 = torch.nan_to_num(t1, nan=float("inf"))
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp(min=0.0)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def alpha_from_density(sigma, delta):
    sigma = torch.as_tensor(sigma)
    return 1.0 - torch.exp(-sigma * torch.as_tensor(delta, dtype=sigma.dtype))


@dataclass
class Composite:
    color: torch.Tensor  # (R, 3) without background
    weights: torch.Tensor  # (R, K)
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor  # (R,)


def _composite(alphas, colors, t, trans, threshold):
    live = trans >= threshold if threshold > 0 else torch.ones_like(trans, dtype=torch.bool)
    w = torch.where(live, alphas * trans, torch.zeros_like(alphas))
    opacity = w.sum(dim=-1)
    color = (w[..., None] * colors).sum(dim=-2)
    depth = (w * t).sum(dim=-1) / opacity.clamp(min=1e-10)
    return Composite(color, w, opacity, depth)


def composite(alphas, colors, t, termination_threshold: float = TERMINATION_THRESHOLD) -> Composite:
    """Front-to-back compositing ``w_k = alpha_k * prod_{l<k} (1 - alpha_l)``.

    Inputs are padded ``(R, K)`` / ``(R, K, 3)`` arrays sorted by ``t`` (pad
    with ``alpha = 0``). A sample is dropped once the transmittance in front
    of it falls below ``termination_threshold``.
    """
    alphas = torch.as_tensor(alphas)
    colors = torch.as_tensor(colors, dtype=alphas.dtype)
    t = torch.as_tensor(t, dtype=alphas.dtype)
    if alphas.ndim == 1:
        out = composite(alphas[None], colors[None], t[None], termination_threshold)
        return Composite(out.color[0], out.weights[0], out.opacity[0], out.depth[0])
    keep = torch.cumprod(1.0 - alphas, dim=-1)
    trans = torch.cat([torch.ones_like(keep[..., :1]), keep[..., :-1]], dim=-1)
    return _composite(alphas, colors, t, trans, termination_threshold)


class OccupancyBitfield:
    """Boolean ``R^3`` voxel grid over ``aabb`` gating sample generation."""

    def __init__(self, resolution: int, aabb, threshold: float = 0.01, decay: float = 0.95):
        self.resolution = int(resolution)
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.threshold = float(threshold)
        self.decay = float(decay)
        r = self.resolution
        # bits always equal cache > threshold; a fresh cache is empty
        self.density_cache = torch.zeros((r, r, r), dtype=torch.float32)
        self.bits = self.density_cache > self.threshold

    def voxel_index(self, pts: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.aabb[0])
        hi = torch.as_tensor(self.aabb[1])
        g = ((pts.to(torch.float64) - lo) / (hi - lo) * self.resolution).floor().long()
        return g.clamp(0, self.resolution - 1)

    def occupied(self, pts: torch.Tensor) -> torch.Tensor:
        ijk = self.voxel_index(pts)
        return self.bits[ijk[..., 0], ijk[..., 1], ijk[..., 2]]

    def voxel_centers(self, jitter: Optional[torch.Tensor] = None) -> torch.Tensor:
        r = self.resolution
        ar = torch.arange(r, dtype=torch.float64)
        grid = torch.stack(torch.meshgrid(ar, ar, ar, indexing="ij"), dim=-1).reshape(-1, 3)
        offs = 0.5 if jitter is None else jitter
        lo = torch.as_tensor(self.aabb[0])
        hi = torch.as_tensor(self.aabb[1])
        return lo + (grid + offs) / r * (hi - lo)

    def set_all(self, value: bool) -> None:
        self.bits.fill_(value)

    def occupancy_fraction(self) -> float:
        return float(self.bits.float().mean())


def update_bitfield(bitfield: OccupancyBitfield, density_fn, decay: Optional[float] = None,
                    threshold: Optional[float] = None, generator: Optional[torch.Generator] = None,
                    chunk: int = 1 << 16) -> OccupancyBitfield:
    """One EMA update: ``cache = max(decay * cache, sigma(jittered point))``; ``bits = cache > threshold``."""
    decay = bitfield.decay if decay is None else decay
    threshold = bitfield.threshold if threshold is None else threshold
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    n = bitfield.resolution**3
    jitter = torch.rand(n, 3, generator=generator, dtype=torch.float64)
    pts = bitfield.voxel_centers(jitter)
    sig = torch.empty(n, dtype=torch.float32)
    with torch.no_grad():
        for s in range(0, n, chunk):
            sig[s : s + chunk] = density_fn(pts[s : s + chunk]).float()
    cache = bitfield.density_cache.reshape(-1)
    cache = torch.maximum(cache * decay, sig.clamp(min=0.0))
    bitfield.density_cache = cache.reshape(bitfield.bits.shape)
    bitfield.bits = bitfield.density_cache > threshold
    return bitfield


@dataclass
class SampleBatch:
    """Packed samples sorted by (ray, t). ``rank`` is the position within the ray."""

    ray: torch.Tensor  # (S,) int64
    rank: torch.Tensor  # (S,)
    t: torch.Tensor  # (S,) float64
    delta: torch.Tensor  # (S,)
    positions: torch.Tensor  # (S, 3)
    t_near: torch.Tensor  # (R,)
    t_far: torch.Tensor  # (R,)
    counts: torch.Tensor  # (R,) retained samples per ray

    @property
    def n_rays(self) -> int:
        return self.t_near.shape[0]

    @property
    def width(self) -> int:
        return int(self.counts.max()) if self.counts.numel() else 0


def march_samples(origins, dirs, bitfield: Optional[OccupancyBitfield], step: float,
                  aabb=None, offsets: Optional[torch.Tensor] = None) -> SampleBatch:
    """Uniform steps through the AABB, dropping samples in unoccupied voxels.

    ``offsets`` (per ray, in units of ``step``, in ``[0, 1)``) shifts the
    sample comb for stratified training; samples past ``t_far`` are dropped.
    """
    o = torch.as_tensor(origins, dtype=torch.float64)
    d = torch.as_tensor(dirs, dtype=torch.float64)
    box = bitfield.aabb if aabb is None else aabb
    t_near, t_far, hit = ray_aabb(o, d, box)
    n = torch.where(hit, torch.ceil((t_far - t_near) / step), torch.zeros_like(t_near)).long()
    k_max = int(n.max()) if n.numel() else 0
    k = torch.arange(k_max, dtype=torch.float64)
    start = t_near if offsets is None else t_near + offsets.to(torch.float64) * step
    t = start[:, None] + k[None, :] * step
    keep = (torch.arange(k_max)[None, :] < n[:, None]) & (t < t_far[:, None])
    ray, kk = torch.nonzero(keep, as_tuple=True)
    ts = t[ray, kk]
    pos = o[ray] + ts[:, None] * d[ray]
    if bitfield is not None and len(ts):
        occ = bitfield.occupied(pos)
        ray, ts, pos = ray[occ], ts[occ], pos[occ]
    delta = torch.minimum(torch.full_like(ts, step), t_far[ray] - ts)
    counts = torch.bincount(ray, minlength=len(t_near))
    starts = torch.cumsum(counts, 0) - counts
    rank = torch.arange(len(ray)) - starts[ray]
    return SampleBatch(ray, rank, ts, delta, pos, t_near, t_far, counts)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (R, 3) with background
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, K) padded
    alphas: torch.Tensor  # (R, K)
    live: torch.Tensor  # (R, K) bool: evaluated and not terminated
    s_mid: torch.Tensor  # (R, K) normalized interval midpoints
    s_width: torch.Tensor  # (R, K) normalized interval widths
    n_samples: int


def render_rays(field, origins, dirs, bitfield: Optional[OccupancyBitfield], step: float,
                background=(1.0, 1.0, 1.0), threshold: float = TERMINATION_THRESHOLD,
                aabb=None, offsets=None, chunk_rank: int = 32) -> RenderOutput:
    """Differentiable march + composite for a ray batch.

    Samples are evaluated in rank chunks; rays whose transmittance has
    dropped below ``threshold`` are not evaluated further.
    """
    dtype = field.dtype
    box = field.aabb.numpy() if aabb is None else aabb
    sb = march_samples(origins, dirs, bitfield, step, aabb=box, offsets=offsets)
    r, width = sb.n_rays, max(sb.width, 1)
    d = torch.as_tensor(dirs, dtype=torch.float64)
    flat = sb.ray * width + sb.rank
    od_running = torch.zeros(r, dtype=torch.float64)
    log_thr = -np.log(threshold) if threshold > 0 else np.inf
    sig_parts, rgb_parts, idx_parts = [], [], []
    for r0 in range(0, width, chunk_rank):
        sel = (sb.rank >= r0) & (sb.rank < r0 + chunk_rank)
        sel &= od_running[sb.ray] <= log_thr
        ids = torch.nonzero(sel, as_tuple=True)[0]
        if len(ids) == 0:
            continue
        sigma, rgb = field(sb.positions[ids], d[sb.ray[ids]])
        sd = sigma.detach().to(torch.float64) * sb.delta[ids]
        od_running.index_add_(0, sb.ray[ids], sd)
        sig_parts.append(sigma)
        rgb_parts.append(rgb)
        idx_parts.append(flat[ids])
    n_eval = sum(len(i) for i in idx_parts)
    sigma_dense = torch.zeros(r * width, dtype=dtype)
    rgb_dense = torch.zeros(r * width, 3, dtype=dtype)
    delta_dense = torch.zeros(r * width, dtype=dtype)
    t_dense = torch.zeros(r * width, dtype=dtype)
    evaluated = torch.zeros(r * width, dtype=torch.bool)
    if idx_parts:
        idx = torch.cat(idx_parts)
        sigma_dense = sigma_dense.index_put((idx,), torch.cat(sig_parts))
        rgb_dense = rgb_dense.index_put((idx,), torch.cat(rgb_parts))
        evaluated[idx] = True
    delta_dense[flat] = sb.delta.to(dtype)
    t_dense[flat] = sb.t.to(dtype)
    sigma_dense, rgb_dense = sigma_dense.reshape(r, width), rgb_dense.reshape(r, width, 3)
    delta_dense, t_dense = delta_dense.reshape(r, width), t_dense.reshape(r, width)
    evaluated = evaluated.reshape(r, width)

    od = sigma_dense * delta_dense
    alphas = 1.0 - torch.exp(-od)
    cum = torch.cumsum(od, dim=-1)
    trans = torch.exp(-(cum - od))
    comp = _composite(alphas, rgb_dense, t_dense, trans, threshold)
    live = evaluated & (comp.weights > 0) if threshold <= 0 else evaluated & (trans >= threshold)
    bg = torch.as_tensor(background, dtype=dtype)
    rgb = comp.color + (1.0 - comp.opacity)[:, None] * bg

    span = (sb.t_far - sb.t_near).clamp(min=1e-12).to(dtype)[:, None]
    s_mid = ((t_dense + 0.5 * delta_dense - sb.t_near.to(dtype)[:, None]) / span).clamp(0.0, 1.0)
    s_mid = torch.where(evaluated, s_mid, torch.ones_like(s_mid))
    s_width = delta_dense / span
    return RenderOutput(rgb, comp.opacity, comp.depth, comp.weights, alphas, live, s_mid, s_width, n_eval)


def render_image(camera: Camera, field, bitfield: Optional[OccupancyBitfield], step: float,
                 background=(1.0, 1.0, 1.0), threshold: float = TERMINATION_THRESHOLD,
                 chunk: int = 4096, stats: Optional[dict] = None):
    """Full-frame render. Returns ``(rgb (H, W, 3), depth (H, W), opacity (H, W))`` numpy arrays."""
    o, d = generate_rays(camera, all_pixels(camera))
    rgb, depth, acc = [], [], []
    n_samples = 0
    with torch.no_grad():
        for s in range(0, len(o), chunk):
            out = render_rays(field, o[s : s + chunk], d[s : s + chunk], bitfield, step,
                              background=background, threshold=threshold)
            rgb.append(out.rgb.double())
            depth.append(out.depth.double())
            acc.append(out.opacity.double())
            n_samples += out.n_samples
    h, w = camera.height, camera.width
    if stats is not None:
        stats["samples"] = n_samples
        stats["rays"] = len(o)
    return (torch.cat(rgb).reshape(h, w, 3).numpy(), torch.cat(depth).reshape(h, w).numpy(),
            torch.cat(acc).reshape(h, w).numpy())
