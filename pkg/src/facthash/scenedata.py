"""Analytic desk scenes, their ground-truth renders, and NeRF-synthetic style datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .renderer import Camera, all_pixels, check_rotation, generate_rays, look_at, ray_aabb

DEFAULT_AABB = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
DEPTH_SCALE = 1000.0  # 16-bit depth PNG value = round(depth * DEPTH_SCALE)


class DatasetError(Exception):
    pass


class ManifestMissingError(DatasetError):
    pass


class MalformedPoseError(DatasetError):
    pass


class ImageMissingError(DatasetError):
    pass


@dataclass
class Primitive:
    kind: str  # "sphere" (size = radius) or "box" (size = half extent per axis)
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray
    density: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if (self.size <= 0).any() or self.density < 0:
            raise ValueError("primitive size must be positive and density nonnegative")

    def bounds(self):
        ext = np.full(3, self.size[0]) if self.kind == "sphere" else self.size
        return self.center - ext, self.center + ext

    def contains(self, pts: np.ndarray) -> np.ndarray:
        q = pts - self.center
        if self.kind == "sphere":
            return (q * q).sum(-1) < self.size[0] ** 2
        return (np.abs(q) < self.size).all(-1)

    def interval(self, o: np.ndarray, d: np.ndarray):
        """Entry/exit distances along unit rays (NaN-free; empty => a >= b)."""
        if self.kind == "sphere":
            oc = o - self.center
            b = (oc * d).sum(-1)
            c = (oc * oc).sum(-1) - self.size[0] ** 2
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            a, e = -b - root, -b + root
            miss = disc <= 0
            return np.where(miss, 0.0, a), np.where(miss, 0.0, e)
        lo, hi = self.bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = np.nan_to_num((lo - o) * inv, nan=-np.inf)
            t1 = np.nan_to_num((hi - o) * inv, nan=np.inf)
        return np.minimum(t0, t1).max(-1), np.maximum(t0, t1).min(-1)


@dataclass
class AnalyticScene:
    primitives: List[Primitive]
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    aabb: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_AABB))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        for p in self.primitives:
            lo, hi = p.bounds()
            if (lo < self.aabb[0] - 1e-12).any() or (hi > self.aabb[1] + 1e-12).any():
                raise ValueError("primitive extends outside the scene AABB")

    def density(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        out = np.zeros(pts.shape[:-1])
        for p in self.primitives:
            out += np.where(p.contains(pts), p.density, 0.0)
        return out

    def to_dict(self) -> dict:
        return {
            "background": self.background.tolist(),
            "aabb": self.aabb.tolist(),
            "primitives": [
                {"kind": p.kind, "center": p.center.tolist(), "size": p.size.tolist(),
                 "albedo": p.albedo.tolist(), "density": p.density}
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        prims = [Primitive(q["kind"], q["center"], q["size"], q["albedo"], q["density"]) for q in d["primitives"]]
        return cls(prims, d.get("background", (1.0, 1.0, 1.0)), d.get("aabb", DEFAULT_AABB))


def generate_scene(spec: Sequence[dict], seed: int, aabb=DEFAULT_AABB, density: float = 40.0,
                   background=(1.0, 1.0, 1.0), max_tries: int = 1000) -> AnalyticScene:
    """Build a scene from per-primitive requests; unspecified fields are drawn from ``seed``.

    Each request may fix ``kind``, ``center``, ``size``, ``albedo``, ``density``.
    Random primitives are placed fully inside ``aabb`` without overlapping
    earlier primitives' bounding boxes.
    """
    if not spec:
        raise ValueError("scene spec needs at least one primitive")
    rng = np.random.default_rng(seed)
    box = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    span = box[1] - box[0]
    prims: List[Primitive] = []
    for req in spec:
        for _ in range(max_tries):
            kind = req.get("kind") or ("sphere" if rng.random() < 0.5 else "box")
            if "size" in req:
                size = req["size"]
            elif kind == "sphere":
                size = rng.uniform(0.08, 0.2) * span.min()
            else:
                size = rng.uniform(0.06, 0.16, size=3) * span.min()
            ext = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
            ext = np.full(3, ext[0]) if kind == "sphere" else ext
            center = req.get("center")
            if center is None:
                center = rng.uniform(box[0] + ext, box[1] - ext)
            albedo = req.get("albedo")
            if albedo is None:
                albedo = rng.uniform(0.05, 0.95, size=3)
            cand = Primitive(kind, center, size, albedo, float(req.get("density", density)))
            lo, hi = cand.bounds()
            fixed = "center" in req
            clash = any((lo < q.bounds()[1]).all() and (hi > q.bounds()[0]).all() for q in prims)
            if fixed or not clash:
                prims.append(cand)
                break
        else:
            raise ValueError("could not place primitive without overlap")
    return AnalyticScene(prims, background, box)


def desk_scene() -> AnalyticScene:
    """The fixed 3-primitive scene used by the desk-scale experiments."""
    spec = [
        {"kind": "sphere", "center": (-0.35, -0.1, 0.05), "size": 0.32, "albedo": (0.85, 0.2, 0.15)},
        {"kind": "box", "center": (0.38, 0.22, -0.15), "size": (0.22, 0.25, 0.3), "albedo": (0.15, 0.65, 0.25)},
        {"kind": "sphere", "center": (0.25, -0.5, 0.35), "size": 0.2, "albedo": (0.2, 0.3, 0.9)},
    ]
    return generate_scene(spec, seed=0)


def oracle_render(scene: AnalyticScene, camera: Camera, step: float, chunk: int = 2048):
    """Ground-truth RGB and depth by fine uniform marching.

    Each step's optical depth is the exact integral of the piecewise-constant
    density over that step, and its color the density-weighted mean albedo;
    the steps are then composited front to back.
    """
    o, d = generate_rays(camera, all_pixels(camera))
    rgb = np.empty((len(o), 3))
    depth = np.empty(len(o))
    t_near, t_far, hit = (a.numpy() for a in ray_aabb(o, d, scene.aabb))
    for s in range(0, len(o), chunk):
        sl = slice(s, s + chunk)
        rgb[sl], depth[sl] = _oracle_rays(scene, o[sl], d[sl], t_near[sl], np.where(hit[sl], t_far[sl], t_near[sl]), step)
    return rgb.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)


def _oracle_rays(scene, o, d, t_near, t_far, step):
    n = len(o)
    if not scene.primitives:
        return np.broadcast_to(scene.background, (n, 3)).copy(), np.zeros(n)
    ivals = [p.interval(o, d) for p in scene.primitives]
    # only march where some primitive is crossed
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for a, b in ivals:
        ok = b > a
        lo = np.where(ok, np.minimum(lo, a), lo)
        hi = np.where(ok, np.maximum(hi, b), hi)
    lo = np.maximum(lo, t_near)
    hi = np.minimum(hi, t_far)
    active = hi > lo
    color = np.zeros((n, 3))
    acc = np.zeros(n)
    dsum = np.zeros(n)
    if active.any():
        k_max = int(np.ceil(((hi - lo)[active] / step).max())) + 1
        k = np.arange(k_max)
        lo = np.where(active, lo, 0.0)
        hi = np.where(active, hi, 0.0)
        t0 = lo[:, None] + k[None, :] * step  # (n, K)
        t1 = np.minimum(t0 + step, hi[:, None])
        valid = active[:, None] & (t0 < hi[:, None])
        tau = np.zeros_like(t0)
        col = np.zeros(t0.shape + (3,))
        for p, (a, b) in zip(scene.primitives, ivals):
            ov = np.clip(np.minimum(b[:, None], t1) - np.maximum(a[:, None], t0), 0.0, None)
            ov = np.where(valid, ov, 0.0)
            tau += p.density * ov
            col += (p.density * ov)[..., None] * p.albedo
        col = np.where(tau[..., None] > 0, col / np.maximum(tau, 1e-300)[..., None], 0.0)
        alpha = 1.0 - np.exp(-tau)
        trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
        w = alpha * trans
        color = (w[..., None] * col).sum(1)
        acc = w.sum(1)
        dsum = (w * 0.5 * (t0 + t1)).sum(1)
    rgb = color + (1.0 - acc)[:, None] * scene.background
    depth = np.where(acc > 0, dsum / np.maximum(acc, 1e-12), 0.0)
    return rgb, depth


def orbit_cameras(count: int, radius: float, camera_angle_x: float, width: int, height: int,
                  phase: float = 0.0) -> List[Camera]:
    """Cameras on a Fibonacci sphere looking at the origin (z up)."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(max(0.0, 1.0 - z * z))
        th = golden * i + phase
        eye = radius * np.array([r * np.cos(th), r * np.sin(th), z])
        cams.append(Camera.from_fov(camera_angle_x, width, height, look_at(eye)))
    return cams


@dataclass
class Dataset:
    cameras: List[Camera]
    images: List[np.ndarray]  # (H, W, 3) float in [0, 1]
    split: str
    aabb: np.ndarray
    camera_angle_x: Optional[float] = None
    names: Optional[List[str]] = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera required")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"images differ in size: {sorted(shapes)}")
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.cameras)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def build_dataset(scene: AnalyticScene, cameras: List[Camera], split: str, step: float,
                  camera_angle_x: Optional[float] = None) -> Dataset:
    """Oracle-render every camera; images are 8-bit quantized like files on disk."""
    imgs = [quantize(oracle_render(scene, c, step)[0]).astype(np.float64) / 255.0 for c in cameras]
    return Dataset(cameras, imgs, split, scene.aabb, camera_angle_x,
                   [f"./{split}/r_{i}" for i in range(len(cameras))])


def subsample_views(dataset: Dataset, count: int) -> Dataset:
    n = len(dataset)
    if not 1 <= count <= n:
        raise ValueError(f"view count must be in [1, {n}], got {count}")
    idx = [i * n // count for i in range(count)]
    names = [dataset.names[i] for i in idx] if dataset.names else None
    return Dataset([dataset.cameras[i] for i in idx], [dataset.images[i] for i in idx],
                   dataset.split, dataset.aabb, dataset.camera_angle_x, names)


def write_dataset(dataset: Dataset, root: str) -> str:
    """Write ``transforms_<split>.json`` plus 8-bit RGB PNGs under ``root``."""
    if dataset.camera_angle_x is None:
        raise ValueError("writing a manifest needs camera_angle_x")
    os.makedirs(os.path.join(root, dataset.split), exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        rel = f"./{dataset.split}/r_{i}"
        Image.fromarray(quantize(img), "RGB").save(os.path.join(root, rel + ".png"))
        frames.append({"file_path": rel, "transform_matrix": cam.c2w.tolist()})
    manifest = {"camera_angle_x": dataset.camera_angle_x, "aabb": dataset.aabb.tolist(), "frames": frames}
    path = os.path.join(root, f"transforms_{dataset.split}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_dataset(path: str, split: str = "train", background=(1.0, 1.0, 1.0),
                 aabb=None) -> Dataset:
    """Load a NeRF-synthetic layout directory (or a manifest file path directly)."""
    manifest = path if os.path.isfile(path) else os.path.join(path, f"transforms_{split}.json")
    if not os.path.isfile(manifest):
        raise ManifestMissingError(f"no manifest at {manifest}")
    root = os.path.dirname(manifest)
    with open(manifest) as fh:
        meta = json.load(fh)
    fov = float(meta["camera_angle_x"])
    bg = np.asarray(background, dtype=np.float64)
    cams, imgs, names = [], [], []
    for fr in meta["frames"]:
        m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4) or not np.isfinite(m).all():
            raise MalformedPoseError(f"{fr['file_path']}: transform must be a finite 4x4 matrix")
        try:
            check_rotation(m[:3, :3])
        except ValueError as exc:
            raise MalformedPoseError(f"{fr['file_path']}: {exc}") from None
        rel = fr["file_path"]
        fp = os.path.join(root, rel)
        if not os.path.splitext(fp)[1]:
            fp += ".png"
        if not os.path.isfile(fp):
            raise ImageMissingError(f"missing image {fp}")
        with Image.open(fp) as im:
            arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
        img = arr[..., :3].astype(np.float64) / 255.0
        if arr.shape[-1] == 4:
            a = arr[..., 3:].astype(np.float64) / 255.0
            img = img * a + bg * (1.0 - a)
        h, w = img.shape[:2]
        cams.append(Camera.from_fov(fov, w, h, m))
        imgs.append(img)
        names.append(rel)
    box = meta.get("aabb", DEFAULT_AABB) if aabb is None else aabb
    return Dataset(cams, imgs, split, np.asarray(box), fov, names)


def save_png(path: str, rgb: np.ndarray) -> None:
    Image.fromarray(quantize(rgb), "RGB").save(path)


def save_depth_png(path: str, depth: np.ndarray) -> None:
    """16-bit grayscale, value = round(depth * DEPTH_SCALE) clipped to 65535."""
    v = np.clip(np.round(np.asarray(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(v).save(path)


def load_depth_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / DEPTH_SCALE
