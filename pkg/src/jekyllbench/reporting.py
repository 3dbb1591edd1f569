"""Rendering of evaluation artifacts: CSV tables and matplotlib figures.

Reports themselves are JSON (see metrics.assemble_report); this module turns
them into the human-facing companions written next to the JSON: a per-image
CSV, summary figures, loss curves, and progression plots.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PER_IMAGE_COLUMNS = (
    "image_ref",
    "patient_id",
    "disease_prob",
    "disease_verdict",
    "predicted_patient",
    "identity_correct",
)


def write_per_image_csv(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_IMAGE_COLUMNS)
        writer.writeheader()
        for entry in report["per_image"]:
            writer.writerow({key: entry.get(key) for key in PER_IMAGE_COLUMNS})
    return path


def write_loss_history_csv(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for entry in history:
        for key in entry:
            if key not in columns:
                columns.append(key)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for entry in history:
            writer.writerow(entry)
    return path


def render_report_figures(report: dict, out_dir: str | Path) -> list[Path]:
    """Rates bar chart, MS-SSIM comparison, and disease-probability histogram."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(4, 3))
    names, values = [], []
    for key, label in (("r_d", "injection rate"), ("r_i", "identity rate")):
        if report.get(key) is not None:
            names.append(label)
            values.append(report[key])
    ax.bar(names, values, color=["#c44e52", "#4c72b0"][: len(names)])
    ax.set_ylim(0, 100)
    ax.set_ylabel("percent of fakes")
    ax.set_title("attack success")
    for i, v in enumerate(values):
        ax.text(i, v + 1, f"{v:.1f}", ha="center")
    fig.tight_layout()
    path = out_dir / "rates.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    if report.get("mssim_real_real") is not None:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(
            ["real vs real", "real vs fake"],
            [report["mssim_real_real"], report["mssim_real_fake"]],
            color="#55a868",
        )
        ax.set_ylim(0, 1)
        ax.set_ylabel("MS-SSIM")
        ax.set_title(f"cohort similarity ({report.get('mssim_pairs')} pairs)")
        fig.tight_layout()
        path = out_dir / "mssim.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    probs = [entry["disease_prob"] for entry in report["per_image"]]
    if probs:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.hist(probs, bins=20, range=(0, 1), color="#8172b2")
        ax.axvline(report.get("disease_threshold", 0.5), color="k", linestyle="--", linewidth=1)
        ax.set_xlabel("disease probability of fake")
        ax.set_ylabel("count")
        ax.set_title("per-fake classifier response")
        fig.tight_layout()
        path = out_dir / "disease_probabilities.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_loss_curves(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_g, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [entry["epoch"] for entry in history]
    for key in ("adv", "disease", "identity", "cycle"):
        if any(key in entry for entry in history):
            ax_g.plot(epochs, [entry.get(key, np.nan) for entry in history], label=key)
    ax_g.set_xlabel("epoch")
    ax_g.set_ylabel("generator loss term")
    ax_g.legend(fontsize=8)
    for key in ("d_x", "d_y"):
        if any(key in entry for entry in history):
            ax_d.plot(epochs, [entry.get(key, np.nan) for entry in history], label=key)
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("discriminator loss")
    ax_d.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_progression_curves(curves: list[dict], path: str | Path, max_faint: int = 50) -> Path:
    """Per-victim probability curves (faint) with the mean curve on top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    alphas = curves[0]["alphas"]
    stack = np.array([curve["probabilities"] for curve in curves])
    for row in stack[:max_faint]:
        ax.plot(alphas, row, color="gray", alpha=0.15, linewidth=0.7)
    ax.plot(alphas, stack.mean(axis=0), color="#c44e52", linewidth=2, label="mean")
    ax.set_xlabel("blend weight toward the translated image")
    ax.set_ylabel("disease probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
