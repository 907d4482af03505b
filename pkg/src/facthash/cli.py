"""``facthash`` command line: train, render, eval, bench, ablate-collision, gen-scene.

Every command takes ``--config <toml>`` plus the overrides ``--seed``, ``--out``
and ``--views``. Reports are newline-delimited JSON, echoed to stdout and
written under the output directory together with PNG figures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import harness, plotting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config, validate
from .scenedata import DatasetError, generate_scene, save_depth_png, save_png
from .training import NonFiniteLossError

log = logging.getLogger("facthash")

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4
EXIT_TRAINING = 5

CHECKPOINT_NAME = "model.ckpt"


class _Report:
    """NDJSON sink: one line per record to a file and to stdout."""

    def __init__(self, path: str, stream=None):
        self.path = path
        self.stream = stream if stream is not None else sys.stdout
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        self._fh.write(line + "\n")
        self._fh.flush()
        self.stream.write(line + "\n")

    def close(self) -> None:
        self._fh.close()


def _prepare(args, need_dataset: bool = True) -> RunConfig:
    cfg = load_config(args.config)
    views = getattr(args, "views", None)
    apply_overrides(cfg, seed=args.seed, out=args.out,
                    few_shot=views if args.command in ("train", "ablate-collision") else None)
    if args.command == "gen-scene" and views is not None:
        cfg.dataset.train_views = views
    return validate(cfg, need_dataset=need_dataset)


def _checkpoint_path(args, cfg: RunConfig) -> str:
    return args.checkpoint or os.path.join(cfg.out, CHECKPOINT_NAME)


def cmd_train(args) -> int:
    cfg = _prepare(args)
    splits = harness.load_splits(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    log_path = os.path.join(cfg.out, "metrics.ndjson")
    result = harness.run_training(cfg, log_path=log_path,
                                  timing_path=os.path.join(cfg.out, "timing.ndjson"), splits=splits)
    save_checkpoint(os.path.join(cfg.out, CHECKPOINT_NAME), harness.checkpoint_of(result.state, cfg))
    if result.records:
        plotting.plot_training(result.records, os.path.join(cfg.out, "training.png"))
    summary = {"kind": "train", "steps": result.state.step, "test_psnr": result.test_psnr,
               "seconds": round(result.seconds, 3), "param_count": harness.param_count(cfg),
               "checkpoint": os.path.join(cfg.out, CHECKPOINT_NAME)}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_state(args, cfg: RunConfig):
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    return harness.state_from_checkpoint(ckpt)


def _views(args, cfg: RunConfig, split_only_cameras: bool):
    if cfg.dataset.path:
        _, test = harness.load_splits(cfg)
        test = harness.first_views(test, args.views)
        return test.cameras, (None if split_only_cameras else test)
    cams = harness.scene_cameras(cfg, "test")
    if args.views:
        cams = cams[: args.views]
    if split_only_cameras:
        return cams, None
    _, test = harness.load_splits(cfg)
    return cams, harness.first_views(test, args.views)


def cmd_render(args) -> int:
    cfg = _prepare(args)
    state, _ = _load_state(args, cfg)
    cams, _ = _views(args, cfg, split_only_cameras=True)
    root = os.path.join(cfg.out, "render")
    os.makedirs(root, exist_ok=True)
    report = _Report(os.path.join(root, "render.ndjson"))
    try:
        for i, cam in enumerate(cams):
            rgb, depth, acc = harness.render_view(state, cam)
            rgb_path = os.path.join(root, f"view_{i:03d}.png")
            depth_path = os.path.join(root, f"view_{i:03d}_depth.png")
            save_png(rgb_path, np.clip(rgb, 0, 1))
            save_depth_png(depth_path, depth)
            report({"kind": "render", "view": i, "rgb": rgb_path, "depth": depth_path,
                    "mean_opacity": float(acc.mean())})
    finally:
        report.close()
    return 0


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    state, ck_cfg = _load_state(args, cfg)
    _, test = _views(args, cfg, split_only_cameras=False)
    os.makedirs(cfg.out, exist_ok=True)
    rows = harness.evaluate(state, test)
    report = _Report(os.path.join(cfg.out, "eval.ndjson"))
    try:
        for r in rows:
            report({"kind": "view", **r})
        report({"kind": "summary", "views": len(rows),
                "psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
                "encoder": ck_cfg.model.encoder, "param_count": harness.param_count(ck_cfg)})
    finally:
        report.close()
    plotting.plot_eval(rows, os.path.join(cfg.out, "eval.png"))
    pairs = []
    for cam, img in list(zip(test.cameras, test.images))[:4]:
        pairs.append((harness.render_view(state, cam)[0], img))
    plotting.plot_gallery(pairs, os.path.join(cfg.out, "eval_gallery.png"))
    return 0


def cmd_bench(args) -> int:
    cfg = _prepare(args)
    paths = args.checkpoint_list or [_checkpoint_path(args, cfg)]
    states = {}
    for p in paths:
        state, ck_cfg = harness.state_from_checkpoint(load_checkpoint(p))
        label = f"{ck_cfg.model.encoder}:{os.path.basename(os.path.dirname(os.path.abspath(p)))}"
        states[label] = (state, ck_cfg)
    reps = cfg.bench.repetitions if args.repetitions is None else args.repetitions
    count = cfg.bench.views if args.views is None else args.views
    cams = harness.scene_cameras(cfg, "test")[:count] if cfg.dataset.scene else \
        _views(args, cfg, split_only_cameras=True)[0][:count]
    os.makedirs(cfg.out, exist_ok=True)
    report = _Report(os.path.join(cfg.out, "bench.ndjson"))
    results = {}
    try:
        for label, (state, ck_cfg) in states.items():
            res = harness.bench(state, cams, reps)
            results[label] = res
            for v in res["views"]:
                report({"kind": "view", "model": label, **v})
            report({"kind": "summary", "model": label, "encoder": ck_cfg.model.encoder,
                    "param_count": harness.param_count(ck_cfg), **res["summary"]})
        timed = {k: v["summary"] for k, v in results.items() if "median_s" in v["summary"]}
        if len(timed) > 1:
            ref = next(iter(timed))
            for label, s in timed.items():
                report({"kind": "relative", "model": label, "reference": ref,
                        "time_ratio": s["median_s"] / timed[ref]["median_s"],
                        "param_ratio": s["table_bytes"] / timed[ref]["table_bytes"]})
    finally:
        report.close()
    if reps > 0 and count > 0:
        plotting.plot_bench(results, os.path.join(cfg.out, "bench.png"))
    return 0


def cmd_ablate_collision(args) -> int:
    cfg = _prepare(args)
    if args.table_sizes:
        cfg.ablation.table_sizes = [int(s) for s in args.table_sizes.split(",")]
        validate(cfg)
    splits = harness.load_splits(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    report = _Report(os.path.join(cfg.out, "ablation.ndjson"))
    try:
        rows = harness.ablate_collision(cfg, on_row=lambda r: report({"kind": "row", **r}), splits=splits)
        spread = harness.psnr_spread(rows)
        report({"kind": "summary", "psnr_variance": spread})
    finally:
        report.close()
    plotting.plot_ablation(rows, os.path.join(cfg.out, "ablation.png"))
    return 0


def cmd_gen_scene(args) -> int:
    cfg = _prepare(args, need_dataset=False)
    spec = [{} for _ in range(cfg.scene.primitives)]
    scene = generate_scene(spec, cfg.seed, density=cfg.scene.density,
                           background=cfg.train.background)
    written = harness.write_scene_dataset(cfg, scene, cfg.out)
    print(json.dumps({"kind": "gen-scene", **written}, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate-collision": cmd_ablate_collision,
    "gen-scene": cmd_gen_scene,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facthash", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model; --views picks a few-shot subset of the training split",
        "render": "render RGB and depth PNGs for the first --views test cameras",
        "eval": "PSNR/SSIM on the first --views test views",
        "bench": "time test-view renders for one or more checkpoints",
        "ablate-collision": "sweep hash table sizes; --views picks a few-shot subset",
        "gen-scene": "generate a random analytic scene and its oracle dataset; --views sets train views",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides [run] out)")
        p.add_argument("--views", type=int, default=None)
        if name in ("render", "eval"):
            p.add_argument("--checkpoint", default=None, help=f"defaults to <out>/{CHECKPOINT_NAME}")
        if name == "bench":
            p.add_argument("--checkpoint", dest="checkpoint_list", action="append", default=None,
                           help="repeat to compare models")
            p.add_argument("--repetitions", type=int, default=None)
            p.set_defaults(checkpoint=None)
        if name == "ablate-collision":
            p.add_argument("--table-sizes", default=None, help="comma-separated T values")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DatasetError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
