"""PNG figures for training histories, incompatibility reports and sweep tables."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def plot_history(history: dict, path):
    """Train and dev loss per epoch, dev micro-F1 per task on a second panel."""
    rows = history["epochs"]
    ep = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(ep, [r["train_loss"] for r in rows], label="train")
    ax1.plot(ep, [r["dev_loss"] for r in rows], label="dev")
    ax1.axvline(history["best_epoch"], color="grey", ls=":", lw=1)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("joint loss")
    ax1.legend(frameon=False)
    for task in rows[0]["dev_micro_f1"]:
        ax2.plot(ep, [r["dev_micro_f1"][task] for r in rows], label=task)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("dev micro-F1")
    ax2.set_ylim(0, 1.02)
    ax2.legend(frameon=False)
    return _save(fig, path)


def plot_incompatibility(reports: list, path):
    """Histograms of commutator norms and relative entropies, one row per bank pair."""
    n = len(reports)
    fig, axes = plt.subplots(n, 2, figsize=(9, 2.6 * n), squeeze=False)
    for row, rep in zip(axes, reports):
        name = f"{rep['bank_a']}/{rep['bank_b']}"
        norms = np.array([p["commutator_norm"] for p in rep["pairs"]])
        ents = np.array([p["relative_entropy"] for p in rep["pairs"]])
        row[0].hist(norms, bins=30, color="C0")
        row[0].set_title(f"{name}: ||[P, Q]||_F", fontsize=9)
        row[1].hist(ents, bins=30, color="C1")
        row[1].set_title(f"{name}: S(P||Q)", fontsize=9)
    return _save(fig, path)


def plot_matrix(rows: list, path, task: str | None = None):
    """Bar chart of mean test micro-F1 per sweep cell."""
    labels, scores = [], []
    for r in rows:
        tasks = [task] if task else list(r["metrics"])
        vals = [r["metrics"][t]["micro_f1"] for t in tasks if t in r["metrics"]]
        if not vals:
            continue
        if r["kind"] == "context":
            labels.append(f"ctx={r['context_limit']}")
        elif r["kind"] == "grid":
            labels.append("+".join(r["tasks"]) + " | " + "".join(m[0] for m in r["modalities"]))
        else:
            labels.append(r["kind"].split(":", 1)[-1])
        scores.append(float(np.mean(vals)))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(labels) + 1.5), 4))
    ax.bar(np.arange(len(scores)), scores, color="C2")
    ax.set_xticks(np.arange(len(scores)))
    ax.set_xticklabels(labels, rotation=75, fontsize=7)
    ax.set_ylabel("test micro-F1" if task else "mean test micro-F1")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)
