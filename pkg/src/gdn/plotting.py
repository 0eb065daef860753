"""Figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss(steps, losses, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=0.6, color="0.6", label="batch")
    if len(losses) >= 50:
        w = max(len(losses) // 50, 1)
        sm = [sum(losses[max(0, i - w + 1) : i + 1]) / len(losses[max(0, i - w + 1) : i + 1]) for i in range(len(losses))]
        ax.plot(steps, sm, lw=1.2, color="C0", label=f"running mean ({w})")
    ax.set_xlabel("step")
    ax.set_ylabel("noise regression loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_study(study, rows, path):
    """One panel per study; ``rows`` are the dicts written to the results CSV."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if study == "temp":
        x = [r["alpha"] for r in rows]
        ax.plot(x, [r["success_rate"] for r in rows], "o-", label="success rate")
        ax.plot(x, [r["emd"] for r in rows], "s-", label="EMD")
        ax.set_xlabel("temperature alpha")
    elif study == "ddim":
        ddim = [r for r in rows if r["sampler"] == "ddim"]
        x = [r["steps"] for r in ddim]
        ax.plot(x, [r["success_rate"] for r in ddim], "o-", label="DDIM success rate")
        ax.plot(x, [r["emd"] for r in ddim], "s-", label="DDIM EMD")
        for r in rows:
            if r["sampler"] == "ddpm":
                ax.axhline(r["success_rate"], color="C0", ls=":", label="DDPM success rate")
                ax.axhline(r["emd"], color="C1", ls=":", label="DDPM EMD")
        ax.set_xscale("log")
        ax.set_xlabel("sampling steps")
    else:
        guided = [r for r in rows if r["method"] == "guided"]
        for K in sorted({r["K"] for r in guided}):
            sel = [r for r in guided if r["K"] == K]
            ax.plot([r["M"] for r in sel], [r["collision_rate"] for r in sel], "o-", label=f"K={K}")
        for r in rows:
            if r["method"] == "unguided":
                ax.axhline(r["collision_rate"], color="k", ls=":", label="unguided")
        ax.set_xlabel("intermediate gradient steps M")
        ax.set_ylabel("collision rate")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
