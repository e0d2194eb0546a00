"""Run reports: CSV series plus matplotlib figures rendered to files."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .storage import atomic_write_text, read_jsonl


def write_training_csv(log_path, csv_path) -> Path:
    """Flatten the JSON-lines training log into epoch,loss,residual rows."""
    records = [r for r in read_jsonl(log_path) if r.get("kind") == "epoch"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "loss", "consistency_residual"])
    for r in records:
        writer.writerow([r["epoch"], f"{r['loss']:.10g}", f"{r['residual']:.10g}"])
    return atomic_write_text(csv_path, buf.getvalue())


def render_training_figures(log_path, out_dir) -> list[Path]:
    records = [r for r in read_jsonl(log_path) if r.get("kind") == "epoch"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in records]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["loss"] for r in records], lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("weighted training loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    path = out_dir / "training_loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["residual"] for r in records], lw=1.2, color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean consistency residual")
    ax.set_yscale("log")
    ax.set_title("Consistency residual")
    fig.tight_layout()
    path = out_dir / "consistency_residual.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def render_eval_figure(eval_path, out_dir) -> Path:
    doc = json.loads(Path(eval_path).read_text(encoding="utf-8"))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    ax1.bar(["coverage"], [doc["coverage"]], color="tab:green")
    ax1.set_ylim(0, 1.05)
    ax1.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax1.set_title(f"Constraint coverage ({doc['sample_size']} decodes)")

    names = ["KL to closed form", "mean residual"]
    values = [doc["kl_to_qstar"], doc["mean_reg_residual"]]
    ax2.bar(names, values, color=["tab:blue", "tab:orange"])
    ax2.set_title("Divergence diagnostics (nats)")
    fig.tight_layout()
    path = out_dir / "eval_summary.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
