"""Report figures written next to the NDJSON outputs."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training(records: List[dict], path: str) -> str:
    steps = [r["step"] for r in records]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.semilogy(steps, [max(r["loss"], 1e-12) for r in records], lw=0.8, label="total")
    ax0.semilogy(steps, [max(r["loss_rgb"], 1e-12) for r in records], lw=0.8, label="rgb")
    ax0.set_xlabel("step")
    ax0.set_ylabel("loss")
    ax0.legend()
    ax1.plot(steps, [r["batch_psnr"] for r in records], lw=0.8, label="batch")
    tests = [(r["step"], r["test_psnr"]) for r in records if "test_psnr" in r]
    if tests:
        ax1.plot(*zip(*tests), "o", label="test")
    ax1.set_xlabel("step")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend()
    return _finish(fig, path)


def plot_eval(rows: List[dict], path: str) -> str:
    views = [r["view"] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax0.bar(views, [r["psnr"] for r in rows])
    ax0.set_xlabel("view")
    ax0.set_ylabel("PSNR (dB)")
    ax1.bar(views, [r["ssim"] for r in rows], color="tab:orange")
    ax1.set_xlabel("view")
    ax1.set_ylabel("SSIM")
    ax1.set_ylim(0, 1)
    return _finish(fig, path)


def plot_gallery(pairs: Sequence[tuple], path: str) -> str:
    """Rows of (rendered, reference) images."""
    n = max(len(pairs), 1)
    fig, axes = plt.subplots(n, 2, figsize=(4.4, 2.2 * n), squeeze=False)
    for i, (ours, ref) in enumerate(pairs):
        for j, (img, title) in enumerate(((ours, "render"), (ref, "reference"))):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].set_axis_off()
            if i == 0:
                axes[i, j].set_title(title)
    return _finish(fig, path)


def plot_bench(reports: Dict[str, dict], path: str) -> str:
    names = list(reports)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
    data = [[v["median_s"] for v in reports[k]["views"]] or [0.0] for k in names]
    ax0.boxplot(data)
    ax0.set_xticks(range(1, len(names) + 1), names, rotation=15)
    ax0.set_ylabel("seconds per view")
    ax1.bar(names, [reports[k]["summary"]["table_bytes"] / 2**20 for k in names])
    ax1.set_ylabel("table memory (MiB)")
    return _finish(fig, path)


def plot_ablation(rows: List[dict], path: str) -> str:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    for enc in sorted({r["encoder"] for r in rows}):
        ok = [r for r in rows if r["encoder"] == enc and r.get("psnr") is not None]
        if not ok:
            continue
        x = [np.log2(r["table_size"]) for r in ok]
        ax0.plot(x, [r["psnr"] for r in ok], "o-", label=enc)
        ax1.semilogy(x, [r["collision_max"] for r in ok], "o-", label=enc)
    ax0.set_xlabel("log2 T")
    ax0.set_ylabel("test PSNR (dB)")
    ax0.legend()
    ax1.set_xlabel("log2 T")
    ax1.set_ylabel("max over levels of occupied points / T")
    ax1.legend()
    return _finish(fig, path)
