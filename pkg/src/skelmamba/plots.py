"""Static SVG figures with byte-stable output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "skelmamba", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def loss_curves(records: Sequence[dict], path: str | Path, title: str = "training") -> None:
    """Training loss and accuracy (and validation accuracy when present) per epoch."""
    with plt.rc_context(_RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
        epochs = [r["epoch"] for r in records]
        ax_loss.plot(epochs, [r["train_loss"] for r in records], color="tab:blue")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_acc.plot(epochs, [r["train_acc"] for r in records], label="train", color="tab:blue")
        val = [r.get("val_acc") for r in records]
        if any(v is not None for v in val):
            ax_acc.plot(epochs, [np.nan if v is None else v for v in val], label="val", color="tab:orange")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.legend(loc="lower right")
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)


def confusion_heatmap(confusion: np.ndarray, classes: Sequence[str], path: str | Path, title: str = "confusion") -> None:
    confusion = np.asarray(confusion)
    K = confusion.shape[0]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.2 * K + 2, 1.2 * K + 1.5))
        ax.imshow(confusion, cmap="Blues")
        ax.set_xticks(range(K), labels=list(classes), rotation=45, ha="right")
        ax.set_yticks(range(K), labels=list(classes))
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        top = confusion.max() if confusion.size else 0
        for i in range(K):
            for j in range(K):
                color = "white" if top and confusion[i, j] > top / 2 else "black"
                ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center", color=color)
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
