"""Static figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes a function of the data only
_SAVE = dict(dpi=110, metadata={"Software": None})


def convergence(path: str | Path, curves: Mapping[str, np.ndarray]) -> None:
    """Test accuracy per round; ``curves[variant]`` is (seeds, rounds)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, acc in sorted(curves.items()):
        acc = np.atleast_2d(acc)
        r = np.arange(1, acc.shape[1] + 1)
        m, s = acc.mean(0), acc.std(0)
        ax.plot(r, m, label=name)
        ax.fill_between(r, m - s, m + s, alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def risk_bars(path: str | Path, clients: Sequence[str], risks: Mapping[str, Sequence[float]]) -> None:
    """Grouped bars of per-client local risk, one group per model."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(clients))
    w = 0.8 / max(len(risks), 1)
    for i, (name, vals) in enumerate(risks.items()):
        ax.bar(x + i * w - 0.4 + w / 2, vals, w, label=name)
    ax.set_xticks(x, clients)
    ax.set_xlabel("client")
    ax.set_ylabel("local risk")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def pad_scatter(path: str | Path, pad_a: Sequence[float], pad_b: Sequence[float], global_mask: Sequence[bool],
                labels: tuple[str, str] = ("a", "b")) -> None:
    """PAD of model b against model a per dataset pair; points below the diagonal favour b."""
    a, b, g = np.asarray(pad_a), np.asarray(pad_b), np.asarray(global_mask, dtype=bool)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([-2, 2], [-2, 2], color="grey", lw=0.8)
    ax.scatter(a[~g], b[~g], s=18, label="client pairs")
    ax.scatter(a[g], b[g], s=60, marker="*", color="tab:pink", label="global vs client")
    lo = min(a.min(initial=0), b.min(initial=0)) - 0.1
    hi = max(a.max(initial=0), b.max(initial=0)) + 0.1
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel(f"PAD ({labels[0]})")
    ax.set_ylabel(f"PAD ({labels[1]})")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
