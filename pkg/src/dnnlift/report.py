"""Report rendering: JSON summary, per-input CSV, and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_report(report, outdir, prefix="report", extra=None):
    """Persist an InferenceReport as <prefix>.json/.csv/.png in outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    if extra:
        doc.update(extra)
    json_path = outdir / f"{prefix}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    csv_path = outdir / f"{prefix}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "ref_label", "rec_label", "ref_conf", "rec_conf", "exact"])
        for i, row in enumerate(report.rows):
            writer.writerow([
                i, row["ref_label"], row["rec_label"],
                f"{row['ref_conf']:.8f}", f"{row['rec_conf']:.8f}",
                int(row["exact"]),
            ])
    png_path = outdir / f"{prefix}.png"
    _agreement_figure(report, png_path)
    return {"json": json_path, "csv": csv_path, "png": png_path}


def _agreement_figure(report, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    names = ["exact", "top1", "top3", "top5"]
    rates = [report.rate(n) for n in names]
    ax1.bar(names, rates, color="#4878a8")
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("agreement rate")
    ax1.set_title(f"inference agreement (n={report.n})")
    for x, r in enumerate(rates):
        ax1.text(x, r + 0.02, f"{r:.2f}", ha="center", fontsize=8)
    if report.rows:
        ref = [r["ref_conf"] for r in report.rows]
        rec = [r["rec_conf"] for r in report.rows]
        ax2.scatter(ref, rec, s=12, alpha=0.6, color="#a85448")
        lo = min(min(ref), min(rec))
        hi = max(max(ref), max(rec))
        ax2.plot([lo, hi], [lo, hi], "k--", linewidth=0.8)
        ax2.set_xlabel("reference confidence")
        ax2.set_ylabel("recovered confidence")
        ax2.set_title("confidence agreement")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_training_curve(rows, path):
    """Loss/accuracy curves for the substitute-training log."""
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    epochs = [r[0] for r in rows]
    ax1.plot(epochs, [r[1] for r in rows], color="#4878a8", label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy loss")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r[2] for r in rows], color="#58a868", label="accuracy")
    ax2.set_ylabel("query-label accuracy")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
