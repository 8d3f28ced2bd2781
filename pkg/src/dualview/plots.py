"""Matplotlib figure rendering for report paths (PNG alongside CSV/JSON)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# strip writer metadata so repeated runs produce byte-identical PNGs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def roc_figure(points, auc_value, path, title="ROC"):
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.plot(fpr, tpr, lw=1.8, label=f"AUC = {auc_value:.4f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    _save(fig, path)


def training_curves(history, path):
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.4))
    ax1.plot(epochs, [h["mean_loss"] for h in history], lw=1.5)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean training loss")
    for key, label in (("seen_test_auc", "seen test"),
                       ("unseen_test_auc", "unseen test"),
                       ("selection_auc", "selection")):
        vals = [h.get(key) for h in history]
        if any(v is not None for v in vals):
            ax2.plot(epochs, [np.nan if v is None else v for v in vals],
                     lw=1.5, label=label)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("AUC")
    ax2.set_ylim(0.0, 1.02)
    ax2.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def attention_figure(image, heatmap, path, title=""):
    fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.6))
    axes[0].imshow(image, cmap="gray", vmin=0.0, vmax=1.0)
    axes[0].set_title("input")
    axes[1].imshow(image, cmap="gray", vmin=0.0, vmax=1.0)
    hm = axes[1].imshow(heatmap, cmap="jet", alpha=0.45)
    axes[1].set_title(title or "attention")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(hm, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def ablation_figure(arm_names, aucs, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    x = np.arange(len(arm_names))
    ax.bar(x, aucs, width=0.6, color="#4878a8")
    ax.set_xticks(x)
    ax.set_xticklabels(arm_names, rotation=20, ha="right")
    ax.set_ylabel("unseen-domain AUC")
    ax.set_ylim(0.0, 1.02)
    for xi, v in zip(x, aucs):
        ax.text(xi, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
