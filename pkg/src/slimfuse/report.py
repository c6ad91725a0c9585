"""Report rendering: every CLI report path emits matplotlib figures next to
the delimited/JSON output it writes."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_cost_table(reports, path) -> None:
    """Tab-delimited audit table, one row per (kind, stage, agent length)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        writer.writerow(["kind", "stage", "d", "n_heads", "hw", "tokens", "agent",
                         "params", "total_params", "flops", "total_flops"])
        for stage, kind, rep in reports:
            s = rep.shape
            writer.writerow([kind, stage, s.d, s.heads, f"{s.height}x{s.width}",
                             s.tokens, s.agent, rep.params, rep.total_params,
                             rep.flops, rep.total_flops])


def save_cost_figure(reports, path) -> None:
    """Params and FLOPs per stage per kind, log scale."""
    kinds = sorted({kind for _, kind, _ in reports})
    stages = sorted({stage for stage, _, _ in reports})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.8 / len(kinds)
    x = np.arange(len(stages))
    for k, kind in enumerate(kinds):
        params = [next(r.params for s, kk, r in reports if s == st and kk == kind)
                  for st in stages]
        flops = [next(r.flops for s, kk, r in reports if s == st and kk == kind)
                 for st in stages]
        axes[0].bar(x + k * width, params, width, label=kind)
        axes[1].bar(x + k * width, flops, width, label=kind)
    for ax, title in zip(axes, ("parameters", "FLOPs")):
        ax.set_yscale("log")
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels([f"stage {s}" for s in stages])
        ax.set_title(title)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(csv_path, out_path) -> None:
    steps, l_rec, l_res, s1, s2, lr = [], [], [], [], [], []
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            l_rec.append(float(row["l_rec"]))
            l_res.append(float(row["l_res"]))
            s1.append(float(row["sigma1"]))
            s2.append(float(row["sigma2"]))
            lr.append(float(row["lr"]))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(steps, l_rec, label="box loss")
    axes[0].plot(steps, l_res, label="mask loss")
    axes[0].set_xlabel("step")
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=8)
    axes[0].set_title("task losses")
    axes[1].plot(steps, s1, label="sigma 1")
    axes[1].plot(steps, s2, label="sigma 2")
    axes[1].set_xlabel("step")
    axes[1].legend(fontsize=8)
    axes[1].set_title("uncertainty weights")
    axes[2].plot(steps, lr)
    axes[2].set_xlabel("step")
    axes[2].set_title("learning rate")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_eval_table(result, path) -> None:
    """Tab-delimited single-row metric table with the standard column names."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        writer.writerow(["AP50", "AP50-95", "AR50-95", "mIoU"])
        writer.writerow([f"{result.ap50:.4f}", f"{result.ap50_95:.4f}",
                         f"{result.ar50_95:.4f}", f"{result.miou:.4f}"])


def save_eval_figure(result, out_path) -> None:
    thrs = sorted(result.ap_per_threshold)
    aps = [result.ap_per_threshold[t] for t in thrs]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(thrs, aps, marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"AP by IoU threshold (AP50={result.ap50:.3f})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_prediction_overlay(image, detections, mask, out_path) -> None:
    """Input image with predicted boxes and the foreground mask shaded."""
    img = np.transpose(np.asarray(image), (1, 2, 0))
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(np.clip(img, 0, 1))
    if mask is not None:
        overlay = np.zeros(img.shape[:2] + (4,))
        overlay[np.asarray(mask, dtype=bool)] = (1.0, 0.2, 0.2, 0.35)
        ax.imshow(overlay)
    for det in detections:
        x1, y1, x2, y2 = det.corners()
        ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False,
                                   edgecolor="red", linewidth=1.2))
        ax.text(x1, y1 - 2, f"{det.conf:.2f}", color="red", fontsize=7)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_pgm(mask, path) -> None:
    """Binary mask as an 8-bit PGM (P5)."""
    mask = (np.asarray(mask, dtype=bool) * 255).astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(mask.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: {magic!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        f.readline()  # maxval
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)
