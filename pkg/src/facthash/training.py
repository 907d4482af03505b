"""Optimization loop: batched ray rendering, loss stack, Adam updates, bitfield upkeep."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .encoding import build_encoder, level_resolutions
from .field import MlpParams, RadianceField
from .losses import LossWeights, loss_distortion, loss_opacity, loss_rgb, loss_total
from .renderer import (
    TERMINATION_THRESHOLD,
    OccupancyBitfield,
    all_pixels,
    generate_rays,
    render_image,
    render_rays,
    update_bitfield,
)

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    encoder: str = "facthash"
    levels: int = 8
    n_min: int = 16
    n_max: int = 128
    feature_dim: int = 2
    table_size: Optional[int] = 2**14
    geo_dim: int = 15
    density_hidden: int = 64
    color_hidden: int = 64
    color_layers: int = 2
    dtype: str = "float32"
    general_map: str = "triplane"  # only for encoder = "general"
    general_reduce: str = "hadamard"


@dataclass
class TrainConfig:
    batch_rays: int = 4096
    iterations: int = 30000
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    lambda_op: float = 1e-3
    lambda_dist: float = 1e-2
    step_divisor: float = 512.0  # march step = AABB diagonal / step_divisor
    termination: float = TERMINATION_THRESHOLD
    bitfield_resolution: int = 128
    bitfield_opacity: float = 0.01  # density threshold = bitfield_opacity / step
    bitfield_decay: float = 0.95
    bitfield_warmup: int = 256
    bitfield_every: int = 16
    stratified: bool = True
    background: Sequence[float] = (1.0, 1.0, 1.0)
    eval_every: int = 0  # 0: evaluate only after the last step
    seed: int = 0

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def march_step(aabb, divisor: float) -> float:
    box = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    return float(np.linalg.norm(box[1] - box[0]) / divisor)


def build_field(cfg: ModelConfig, aabb, seed: int = 0) -> RadianceField:
    gen = torch.Generator().manual_seed(seed)
    dtype = _DTYPES[cfg.dtype]
    sched = level_resolutions(cfg.n_min, cfg.n_max, cfg.levels)
    enc = build_encoder(cfg.encoder, sched, cfg.feature_dim, cfg.table_size, dtype, gen,
                        cfg.general_map, cfg.general_reduce)
    mlp = MlpParams(enc.output_dim, cfg.geo_dim, cfg.density_hidden, cfg.color_hidden,
                    cfg.color_layers, dtype, gen)
    return RadianceField(enc, mlp, torch.as_tensor(np.asarray(aabb, dtype=np.float64)))


@dataclass
class TrainState:
    field: RadianceField
    optimizer: torch.optim.Optimizer
    bitfield: OccupancyBitfield
    config: TrainConfig
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    @property
    def march_step(self) -> float:
        return march_step(self.field.aabb.numpy(), self.config.step_divisor)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.config.lambda_op, self.config.lambda_dist)


def make_optimizer(fld: RadianceField, cfg: TrainConfig) -> torch.optim.Adam:
    groups = [
        {"params": list(fld.encoder.parameters()), "lr": cfg.lr_tables, "base_lr": cfg.lr_tables},
        {"params": list(fld.mlp.parameters()), "lr": cfg.lr_mlp, "base_lr": cfg.lr_mlp},
    ]
    return torch.optim.Adam(groups, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, aabb) -> TrainState:
    fld = build_field(model_cfg, aabb, cfg.seed)
    step = march_step(aabb, cfg.step_divisor)
    bf = OccupancyBitfield(cfg.bitfield_resolution, aabb, cfg.bitfield_opacity / step, cfg.bitfield_decay)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(fld, make_optimizer(fld, cfg), bf, cfg, 0, gen)


def cosine_factor(step: int, total: int) -> float:
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def compute_losses(state: TrainState, origins, dirs, target, offsets=None, bitfield="state"):
    bf = state.bitfield if bitfield == "state" else bitfield
    out = render_rays(state.field, origins, dirs, bf, state.march_step,
                      background=state.config.background, threshold=state.config.termination,
                      offsets=offsets)
    l_rgb = loss_rgb(out.rgb, target)
    l_op = loss_opacity(out.alphas, out.live)
    l_dist = loss_distortion(out.weights, out.s_mid, out.s_width, efficient=True, check=False)
    total = loss_total(l_rgb, l_op, l_dist, state.weights)
    return total, {"rgb": l_rgb, "op": l_op, "dist": l_dist}, out


def train_step(state: TrainState, origins, dirs, target) -> Dict[str, float]:
    """One Adam step on a ray batch. Mutates ``state`` and returns the loss report."""
    cfg = state.config
    f = cosine_factor(state.step, cfg.iterations)
    for g in state.optimizer.param_groups:
        g["lr"] = g["base_lr"] * f
    offsets = None
    if cfg.stratified:
        offsets = torch.rand(len(origins), generator=state.generator, dtype=torch.float64)
    total, parts, out = compute_losses(state, origins, dirs, target, offsets)
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: "
            + ", ".join(f"{k}={float(v)}" for k, v in parts.items())
            + f", samples={out.n_samples}"
        )
    state.optimizer.zero_grad(set_to_none=False)
    if total.requires_grad:  # False only when every ray missed the occupied voxels
        total.backward()
        state.optimizer.step()
    state.step += 1
    mse = float(((out.rgb.detach() - torch.as_tensor(target, dtype=out.rgb.dtype)) ** 2).mean())
    return {
        "loss": float(total.detach()),
        "loss_rgb": float(parts["rgb"].detach()),
        "loss_op": float(parts["op"].detach()),
        "loss_dist": float(parts["dist"].detach()),
        "batch_psnr": -10.0 * math.log10(max(mse, 1e-10)),
        "samples_per_ray": out.n_samples / max(len(origins), 1),
    }


def maybe_update_bitfield(state: TrainState) -> bool:
    cfg = state.config
    if state.step < cfg.bitfield_warmup:
        state.bitfield.set_all(True)
        return False
    if (state.step - cfg.bitfield_warmup) % cfg.bitfield_every:
        return False
    update_bitfield(state.bitfield, state.field.density, generator=state.generator)
    return True


def finite_difference_audit(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_params: int,
    eps: float = 1e-6,
    generator: Optional[torch.Generator] = None,
    analytic: Optional[Sequence[torch.Tensor]] = None,
    floor: float = 0.0,
) -> dict:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    ``n_params`` scalar entries are drawn uniformly over all of ``params``,
    which are perturbed in place. If ``analytic`` is given it supplies the
    gradients to check (e.g. from a float32 model whose float64 twin is
    ``params``); otherwise ``loss_fn`` is backpropagated once.

    Relative error per entry is ``|g - fd| / max(|g|, |fd|, floor)``; entries
    where both are exactly zero count as exact.
    """
    if analytic is None:
        for p in params:
            p.grad = None
        loss = loss_fn()
        loss.backward()
        analytic = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        loss_value = float(loss.detach())
    else:
        with torch.no_grad():
            loss_value = float(loss_fn())
    grads = [g.detach().to(torch.float64).clone() for g in analytic]
    sizes = torch.tensor([p.numel() for p in params])
    cum = torch.cumsum(sizes, 0)
    picks = torch.randint(int(cum[-1]), (n_params,), generator=generator)
    worst, rows = 0.0, []

    def evaluate() -> float:
        with torch.no_grad():
            return float(loss_fn())

    for flat in picks.tolist():
        which = int(torch.searchsorted(cum, torch.tensor(flat), right=True))
        local = flat - (int(cum[which - 1]) if which else 0)
        view = params[which].data.view(-1)
        orig = view[local].item()
        view[local] = orig + eps
        up = evaluate()
        view[local] = orig - eps
        down = evaluate()
        view[local] = orig
        fd = (up - down) / (2.0 * eps)
        g = float(grads[which].view(-1)[local])
        denom = max(abs(g), abs(fd), floor)
        rel = abs(g - fd) / denom if denom > 0 else 0.0
        worst = max(worst, rel)
        rows.append({"tensor": which, "index": local, "analytic": g, "numeric": fd, "rel": rel})
    return {"max_rel_error": worst, "loss": loss_value, "entries": rows}


AUDIT_ENCODERS = ("facthash", "hashgrid3d", "triplane", "densegrid")


def _audit_problem(seed: int, dtype: str):
    rng = np.random.default_rng(seed)
    enc = AUDIT_ENCODERS[seed % len(AUDIT_ENCODERS)]
    levels = int(rng.integers(2, 5))
    n_min = int(rng.integers(2, 6))
    model = ModelConfig(encoder=enc, levels=levels, n_min=n_min, n_max=n_min * int(rng.integers(2, 5)),
                        feature_dim=int(rng.integers(1, 4)),
                        table_size=None if enc == "densegrid" else 2 ** int(rng.integers(6, 10)),
                        geo_dim=7, density_hidden=16, color_hidden=16, color_layers=2, dtype=dtype)
    aabb = np.array([[-1.0, -1, -1], [1, 1, 1]])
    fld = build_field(model, aabb, seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for t in fld.encoder.parameters():
            t.copy_(torch.randn(t.shape, generator=g, dtype=torch.float64) * 0.7)
    n_rays = 6
    o = rng.normal(size=(n_rays, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o + rng.normal(scale=0.4, size=o.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    target = torch.as_tensor(rng.uniform(size=(n_rays, 3)))
    offsets = torch.as_tensor(rng.uniform(size=n_rays))
    bf = OccupancyBitfield(4, aabb)
    bf.set_all(True)
    return fld, (o, d, target, offsets, bf, march_step(aabb, 24.0))


def _audit_loss(fld, batch, weights=LossWeights(), pattern=None):
    """Total loss; if ``pattern`` is a list, ReLU signs and the live-sample mask are appended to it."""
    o, d, target, offsets, bf, step = batch
    hooks = []
    if pattern is not None:
        hidden = list(fld.mlp.density)[:-1] + list(fld.mlp.color)[:-1]
        hooks = [m.register_forward_hook(lambda _m, _i, y: pattern.append((y > 0).flatten())) for m in hidden]
    try:
        out = render_rays(fld, o, d, bf, step, offsets=offsets)
    finally:
        for h in hooks:
            h.remove()
    if pattern is not None:
        pattern.append(out.live.flatten())
    return loss_total(loss_rgb(out.rgb, target), loss_opacity(out.alphas, out.live),
                      loss_distortion(out.weights, out.s_mid, out.s_width, check=False), weights)


def pipeline_audit(seed: int, dtype: str = "float64", n_params: int = 40, eps: float = 1e-3,
                   floor: float = 1e-6) -> dict:
    """Gradient audit of encoder + MLPs + renderer + all three losses on a random small problem.

    ``seed`` picks the encoder family, schedule, feature width, table size,
    table values and rays. For ``dtype="float32"`` the float32 backprop
    gradient is compared with central differences of a float64 twin.
    Only entries that receive gradient on the batch are sampled, and a
    draw is replaced when its stencil changes any ReLU sign or the set of
    live samples (the loss is not differentiable across those). Numeric
    derivatives use one Richardson step over central differences, so a
    fairly large ``eps`` keeps round-off near 1e-13 absolute; ``floor``
    bounds the denominator for gradients smaller than that noise allows.
    """
    fld64, batch = _audit_problem(seed, "float64")
    params64 = list(fld64.parameters())
    if dtype == "float64":
        analytic = None
    else:
        fld32, _ = _audit_problem(seed, dtype)
        fld32.load_state_dict({k: v.to(fld32.dtype) for k, v in fld64.state_dict().items()})
        with torch.no_grad():  # make the twin hold exactly the reduced-precision values
            for p64, p32 in zip(params64, fld32.parameters()):
                p64.copy_(p32.to(torch.float64))
        loss32 = _audit_loss(fld32, batch)
        analytic = torch.autograd.grad(loss32, list(fld32.parameters()), allow_unused=True)
        analytic = [torch.zeros_like(p) if a is None else a for a, p in zip(analytic, fld32.parameters())]
    # restrict sampling to parameters that influence this batch
    probe = torch.autograd.grad(_audit_loss(fld64, batch), params64, allow_unused=True)
    live = [(i, torch.nonzero((pr if pr is not None else torch.zeros_like(p)).flatten()).flatten())
            for i, (pr, p) in enumerate(zip(probe, params64))]
    pool = [(i, int(j)) for i, js in live for j in js]
    g = torch.Generator().manual_seed(seed)
    grads = analytic if analytic is not None else probe
    base: list = []
    with torch.no_grad():
        _audit_loss(fld64, batch, pattern=base)
    worst, rows, straddled = 0.0, [], 0
    while len(rows) < n_params:
        i, j = pool[int(torch.randint(len(pool), (1,), generator=g))]
        view = params64[i].data.view(-1)
        orig = view[j].item()
        smooth = True

        def central(h):
            nonlocal smooth
            vals = []
            for x in (orig + h, orig - h):
                view[j] = x
                pat: list = []
                with torch.no_grad():
                    vals.append(float(_audit_loss(fld64, batch, pattern=pat)))
                smooth &= len(pat) == len(base) and all(torch.equal(a, b) for a, b in zip(pat, base))
            view[j] = orig
            return (vals[0] - vals[1]) / (2.0 * h)

        fd = (4.0 * central(eps / 2) - central(eps)) / 3.0  # Richardson: O(eps^4) truncation
        if not smooth:  # stencil crosses a ReLU kink or the termination cut
            straddled += 1
            if straddled > 10 * n_params:
                raise RuntimeError("gradient audit: too many stencils straddle non-smooth points")
            continue
        a = float(grads[i].flatten()[j])
        rel = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, rel)
        rows.append({"tensor": i, "index": j, "analytic": a, "numeric": fd, "rel": rel})
    return {"max_rel_error": worst, "entries": rows, "straddled": straddled,
            "encoder": AUDIT_ENCODERS[seed % len(AUDIT_ENCODERS)]}


@dataclass
class RayBank:
    origins: torch.Tensor
    dirs: torch.Tensor
    rgb: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset) -> "RayBank":
        os_, ds_, cs_ = [], [], []
        for cam, img in zip(dataset.cameras, dataset.images):
            o, d = generate_rays(cam, all_pixels(cam))
            os_.append(o)
            ds_.append(d)
            cs_.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        return cls(torch.as_tensor(np.concatenate(os_)), torch.as_tensor(np.concatenate(ds_)),
                   torch.as_tensor(np.concatenate(cs_)))

    def __len__(self) -> int:
        return len(self.origins)


def evaluate_psnr(state: TrainState, dataset) -> List[float]:
    out = []
    for cam, img in zip(dataset.cameras, dataset.images):
        rgb, _, _ = render_image(cam, state.field, state.bitfield, state.march_step,
                                 background=state.config.background, threshold=state.config.termination)
        mse = float(np.mean((np.clip(rgb, 0, 1) - img) ** 2))
        out.append(99.0 if mse == 0 else min(99.0, -10.0 * math.log10(mse)))
    return out


@dataclass
class TrainResult:
    state: TrainState
    records: List[dict]
    test_psnr: Optional[float]
    seconds: float


def train(model_cfg: ModelConfig, cfg: TrainConfig, dataset, test_dataset=None,
          log_path: Optional[str] = None, timing_path: Optional[str] = None,
          on_record: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.iterations`` steps on ``dataset``.

    ``log_path`` receives one JSON record per step (values only, so identical
    seeds give byte-identical files); wall-clock times go to ``timing_path``.
    """
    if len(dataset) == 0:
        raise ValueError("training needs at least one view")
    state = init_state(model_cfg, cfg, dataset.aabb)
    bank = RayBank.from_dataset(dataset)
    batch_gen = torch.Generator().manual_seed(cfg.seed + 2)
    records: List[dict] = []
    logf = open(log_path, "w") if log_path else None
    timef = open(timing_path, "w") if timing_path else None
    t0 = time.perf_counter()
    test_psnr = None
    try:
        for it in range(cfg.iterations):
            maybe_update_bitfield(state)
            idx = torch.randint(len(bank), (min(cfg.batch_rays, len(bank)),), generator=batch_gen)
            rep = train_step(state, bank.origins[idx], bank.dirs[idx], bank.rgb[idx])
            rec = {"step": state.step, **rep, "occupancy": state.bitfield.occupancy_fraction()}
            last = it == cfg.iterations - 1
            if test_dataset is not None and (last or (cfg.eval_every and state.step % cfg.eval_every == 0)):
                test_psnr = float(np.mean(evaluate_psnr(state, test_dataset)))
                rec["test_psnr"] = test_psnr
            records.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
            if timef:
                timef.write(json.dumps({"step": state.step, "wall_time": time.perf_counter() - t0}) + "\n")
            if on_record:
                on_record(rec)
            if state.step % 100 == 0:
                log.info("step %d loss %.5f batch psnr %.2f", state.step, rep["loss"], rep["batch_psnr"])
    finally:
        if logf:
            logf.close()
        if timef:
            timef.close()
    if cfg.iterations == 0 and test_dataset is not None:
        test_psnr = float(np.mean(evaluate_psnr(state, test_dataset)))
    return TrainResult(state, records, test_psnr, time.perf_counter() - t0)
