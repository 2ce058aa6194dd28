"""Report figures rendered straight to files (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def fig_training_curve(steps, nll, lr, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, nll, lw=1.0, color="tab:blue", label="nll (nats/dim)")
    ax.set_xlabel("step")
    ax.set_ylabel("nats/dim")
    ax2 = ax.twinx()
    ax2.plot(steps, lr, lw=0.8, color="tab:orange", alpha=0.6, label="lr")
    ax2.set_ylabel("lr")
    ax.set_title("training")
    return _save(fig, path)


def fig_samples_2d(samples, path, target=None, title="samples"):
    """samples [n, 2]; optional target [m, 2] overlay for comparison."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if target is not None:
        ax.scatter(target[:, 0], target[:, 1], s=4, alpha=0.25,
                   color="0.7", label="data")
    ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.5,
               color="tab:blue", label="model")
    ax.set_title(title)
    ax.legend(markerscale=3, fontsize=8)
    return _save(fig, path)


def fig_universality(ts, gaps, path, thresholds=None):
    """Per-depth nll gap to ground truth, with the pass thresholds marked."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(t) for t in ts], gaps, color="tab:blue", width=0.55)
    if thresholds:
        for i, (t, thr, direction) in enumerate(thresholds):
            ax.hlines(thr, i - 0.35, i + 0.35, color="tab:red", ls="--", lw=1.0)
            ax.annotate(f"{direction}{thr}", (i + 0.28, thr), fontsize=7,
                        ha="right", va="bottom", color="tab:red")
    ax.set_xlabel("stacked blocks")
    ax.set_ylabel("nll gap to truth (nats/dim)")
    ax.set_title("expressivity vs block count")
    return _save(fig, path)


def fig_cfg_verify(rel_errs, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.log10(np.maximum(rel_errs, 1e-18)), bins=40, color="tab:blue")
    ax.axvline(-6, color="tab:red", ls="--", lw=1.0)
    ax.set_xlabel("log10 relative error vs grid oracle")
    ax.set_ylabel("count")
    ax.set_title("closed-form guidance vs normalized tilt")
    return _save(fig, path)


def fig_guidance_sweep(omegas, max_mag_proposed, max_mag_legacy, floor_hits, path):
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax.plot(omegas, max_mag_proposed, "o-", label="variance-matched rule")
    ax.plot(omegas, max_mag_legacy, "s--", label="linear rule")
    ax.set_xlabel("guidance weight")
    ax.set_ylabel("max |coordinate| over samples")
    ax.legend(fontsize=8)
    ax2.bar([str(w) for w in omegas], floor_hits, color="tab:red", width=0.5)
    ax2.set_xlabel("guidance weight")
    ax2.set_ylabel("scale-floor activations (linear rule)")
    fig.suptitle("guidance stability sweep", fontsize=10)
    return _save(fig, path)


def fig_bench(block_times_ds, block_times_eq, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n = max(len(block_times_ds), len(block_times_eq))
    xs = np.arange(n)
    ax.bar(xs - 0.18, list(block_times_ds) + [0] * (n - len(block_times_ds)),
           width=0.36, label="deep-shallow", color="tab:blue")
    ax.bar(xs + 0.18, list(block_times_eq) + [0] * (n - len(block_times_eq)),
           width=0.36, label="equal-sized", color="tab:gray")
    ax.set_xlabel("block (0 = prior side)")
    ax.set_ylabel("sampling time (s)")
    ax.set_title(f"per-block sampling time, totals {sum(block_times_ds):.2f}s vs {sum(block_times_eq):.2f}s")
    ax.legend(fontsize=8)
    return _save(fig, path)


def fig_inpaint_trace(trace, path):
    """trace [chains, iters+1] of chain log density."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for row in trace[:64]:
        ax.plot(row, lw=0.6, alpha=0.4, color="tab:blue")
    ax.plot(trace.mean(axis=0), lw=1.8, color="tab:red", label="mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("log density")
    ax.set_title("inpainting chains")
    ax.legend(fontsize=8)
    return _save(fig, path)


def fig_image_grid(images, path, cols=8, title="samples"):
    """images [n, H, W] in [-1, 1]."""
    n = len(images)
    cols = min(cols, max(n, 1))
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols, rows))
    axes = np.atleast_1d(axes).reshape(rows, cols)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], cmap="gray", vmin=-1.0, vmax=1.0)
    fig.suptitle(title, fontsize=10)
    return _save(fig, path)
