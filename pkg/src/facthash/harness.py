"""Experiment plumbing shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import statistics
import time
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .checkpoint import Checkpoint, restore_state, snapshot
from .config import RunConfig, model_train_configs
from .encoding import encoder_param_count, level_resolutions
from .metrics import psnr, ssim
from .renderer import Camera, OccupancyBitfield, render_image
from .scenedata import (
    AnalyticScene,
    Dataset,
    build_dataset,
    desk_scene,
    load_dataset,
    orbit_cameras,
    subsample_views,
)
from .training import TrainState, init_state, march_step, train

ORACLE_CACHE: Dict[str, Tuple[Dataset, Dataset]] = {}


def load_scene(cfg: RunConfig) -> AnalyticScene:
    if cfg.dataset.scene == "desk":
        return desk_scene()
    with open(cfg.dataset.scene) as fh:
        return AnalyticScene.from_dict(json.load(fh))


def scene_cameras(cfg: RunConfig, split: str) -> List[Camera]:
    d = cfg.dataset
    count = d.train_views if split == "train" else d.test_views
    phase = 0.0 if split == "train" else 1.0  # test views interleave the training orbit
    return orbit_cameras(count, d.radius, d.fov, d.width, d.height, phase)


def oracle_step(cfg: RunConfig, aabb) -> float:
    return march_step(aabb, cfg.train.step_divisor) / cfg.dataset.oracle_factor


def load_splits(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """Full train and test splits. Oracle renders are memoized per process."""
    d = cfg.dataset
    if d.path:
        bg = cfg.train.background
        return load_dataset(d.path, "train", bg), load_dataset(d.path, "test", bg)
    key = json.dumps([dataclasses.asdict(d), cfg.train.step_divisor], sort_keys=True)
    if key not in ORACLE_CACHE:
        scene = load_scene(cfg)
        step = oracle_step(cfg, scene.aabb)
        ORACLE_CACHE[key] = (
            build_dataset(scene, scene_cameras(cfg, "train"), "train", step, d.fov),
            build_dataset(scene, scene_cameras(cfg, "test"), "test", step, d.fov),
        )
    return ORACLE_CACHE[key]


def training_split(cfg: RunConfig, full: Dataset) -> Dataset:
    return subsample_views(full, cfg.dataset.few_shot) if cfg.dataset.few_shot else full


def first_views(ds: Dataset, count: Optional[int]) -> Dataset:
    if not count or count >= len(ds):
        return ds
    return Dataset(ds.cameras[:count], ds.images[:count], ds.split, ds.aabb, ds.camera_angle_x,
                   ds.names[:count] if ds.names else None)


def run_training(cfg: RunConfig, log_path: Optional[str] = None, timing_path: Optional[str] = None,
                 splits: Optional[Tuple[Dataset, Dataset]] = None, evaluate: bool = True):
    full, test = splits if splits is not None else load_splits(cfg)
    model_cfg, train_cfg = model_train_configs(cfg)
    return train(model_cfg, train_cfg, training_split(cfg, full), test if evaluate else None,
                 log_path=log_path, timing_path=timing_path)


def state_from_checkpoint(ckpt: Checkpoint) -> Tuple[TrainState, RunConfig]:
    cfg = RunConfig.from_dict(ckpt.config)
    model_cfg, train_cfg = model_train_configs(cfg)
    aabb = ckpt.arrays["field.aabb"]
    state = init_state(model_cfg, train_cfg, aabb)
    restore_state(state, ckpt)
    return state, cfg


def checkpoint_of(state: TrainState, cfg: RunConfig) -> Checkpoint:
    return snapshot(state, cfg.to_dict())


def param_count(cfg: RunConfig) -> int:
    m = cfg.model
    if m.encoder == "general":
        return -1
    sched = level_resolutions(m.n_min, m.n_max, m.levels)
    return encoder_param_count(m.encoder, sched, m.feature_dim, m.table_size)


def render_view(state: TrainState, cam: Camera, stats: Optional[dict] = None):
    return render_image(cam, state.field, state.bitfield, state.march_step,
                        background=state.config.background, threshold=state.config.termination,
                        stats=stats)


def evaluate(state: TrainState, dataset: Dataset) -> List[dict]:
    """Per-view PSNR/SSIM records against ``dataset`` images."""
    rows = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        rgb, _, _ = render_view(state, cam)
        rgb = np.clip(rgb, 0.0, 1.0)
        if rgb.shape != img.shape:
            raise ValueError(f"view {i}: rendered {rgb.shape} vs reference {img.shape}")
        name = dataset.names[i] if dataset.names else str(i)
        rows.append({"view": i, "name": name, "psnr": psnr(rgb, img), "ssim": ssim(rgb, img)})
    return rows


def bench(state: TrainState, cameras: List[Camera], repetitions: int,
          clock: Callable[[], float] = time.perf_counter) -> dict:
    """Wall time per view, repeated; samples-per-ray statistics and table memory."""
    per_view = []
    for i, cam in enumerate(cameras):
        times, spr = [], None
        for _ in range(repetitions):
            stats: dict = {}
            t0 = clock()
            render_view(state, cam, stats)
            times.append(clock() - t0)
            spr = stats["samples"] / max(stats["rays"], 1)
        if times:
            per_view.append({"view": i, "median_s": statistics.median(times),
                             "min_s": min(times), "max_s": max(times), "samples_per_ray": spr})
    tables = sum(p.numel() * p.element_size() for p in state.field.encoder.parameters())
    mlp = sum(p.numel() * p.element_size() for p in state.field.mlp.parameters())
    summary = {"views": len(per_view), "repetitions": repetitions,
               "table_bytes": tables, "mlp_bytes": mlp}
    if per_view:
        med = [v["median_s"] for v in per_view]
        summary.update({
            "median_s": statistics.median(med),
            "spread_s": max(med) - min(med),
            "total_s": sum(med),
            "mean_samples_per_ray": float(np.mean([v["samples_per_ray"] for v in per_view])),
        })
    return {"views": per_view, "summary": summary}


def _touch_matrix(voxels: int, n: int) -> np.ndarray:
    """``A[v, i]`` true when lattice vertex ``i`` of a resolution-``n`` grid bounds a cell meeting voxel ``v``."""
    a = np.zeros((voxels, n + 1), dtype=np.float64)
    for v in range(voxels):
        lo = math.floor(v * n / voxels)
        hi = math.ceil((v + 1) * n / voxels)
        a[v, lo : hi + 1] = 1.0
    return a


def occupied_lattice_points(bits: np.ndarray, n: int, axes: Iterable[int]) -> int:
    """Lattice vertices (resolution ``n``) reachable from occupied voxels, over ``axes``.

    The count does not depend on axis order, so planes are taken as plain projections.
    """
    axes = tuple(axes)
    b = np.asarray(bits, dtype=bool)
    drop = tuple(i for i in range(3) if i not in axes)
    proj = b.any(axis=drop) if drop else b
    a = _touch_matrix(b.shape[0], n)
    out = proj.astype(np.float64)
    for ax in range(out.ndim):
        out = np.moveaxis(np.tensordot(out, a, axes=([ax], [0])), -1, ax)
    return int((out > 0).sum())


def collision_estimate(bitfield: OccupancyBitfield, encoder: str, resolutions, table_size: int) -> List[float]:
    """Per level, occupied lattice points / T (max over planes for Fact-Hash)."""
    bits = bitfield.bits.numpy()
    out = []
    for n in resolutions:
        if encoder == "facthash":
            count = max(occupied_lattice_points(bits, n, ax) for ax in ((0, 1), (1, 2), (2, 0)))
        else:
            count = occupied_lattice_points(bits, n, (0, 1, 2))
        out.append(count / table_size)
    return out


def ablate_collision(cfg: RunConfig, on_row: Optional[Callable[[dict], None]] = None,
                     splits: Optional[Tuple[Dataset, Dataset]] = None) -> List[dict]:
    """Train one model per (encoder, T); failures are recorded and the sweep continues."""
    splits = splits if splits is not None else load_splits(cfg)
    rows = []
    for enc in cfg.ablation.encoders:
        for t in cfg.ablation.table_sizes:
            run = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, encoder=enc, table_size=t))
            row = {"encoder": enc, "table_size": t, "param_count": param_count(run)}
            try:
                res = run_training(run, splits=splits)
                sched = level_resolutions(run.model.n_min, run.model.n_max, run.model.levels)
                coll = collision_estimate(res.state.bitfield, enc, sched.resolutions, t)
                row.update({"collision_per_level": coll, "collision_max": max(coll),
                            "psnr": res.test_psnr, "seconds": res.seconds, "error": None})
            except Exception as exc:  # keep sweeping; the row carries the failure
                row.update({"psnr": None, "error": f"{type(exc).__name__}: {exc}"})
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


def psnr_spread(rows: List[dict]) -> Dict[str, float]:
    """Population variance of final PSNR across the sweep, per encoder."""
    out = {}
    for enc in sorted({r["encoder"] for r in rows}):
        vals = [r["psnr"] for r in rows if r["encoder"] == enc and r["psnr"] is not None]
        out[enc] = float(np.var(vals)) if vals else float("nan")
    return out


def write_scene_dataset(cfg: RunConfig, scene: AnalyticScene, root: str) -> Dict[str, str]:
    """Oracle-render both splits of ``scene`` into a NeRF-synthetic style folder with depth maps."""
    from .scenedata import oracle_render, quantize, save_depth_png, write_dataset

    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "scene.json"), "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2)
    step = oracle_step(cfg, scene.aabb)
    written = {"scene": os.path.join(root, "scene.json")}
    for split in ("train", "test"):
        cams = scene_cameras(cfg, split)
        imgs, depths = [], []
        for cam in cams:
            rgb, depth = oracle_render(scene, cam, step)
            imgs.append(quantize(rgb).astype(np.float64) / 255.0)
            depths.append(depth)
        ds = Dataset(cams, imgs, split, scene.aabb, cfg.dataset.fov)
        written[split] = write_dataset(ds, root)
        for i, depth in enumerate(depths):
            save_depth_png(os.path.join(root, split, f"r_{i}_depth.png"), depth)
    return written
