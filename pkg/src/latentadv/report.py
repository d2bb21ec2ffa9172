"""Report emission: delimited records, a JSON summary, and figures.

The CSV and JSON outputs are byte-deterministic for identical inputs (no
timestamps); figures are rendered with the Agg backend next to them.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ScoreBreakdown, asr

__all__ = ["REPORT_VERSION", "write_report"]

REPORT_VERSION = 1


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return value


def write_report(
    records,
    breakdown: ScoreBreakdown,
    outdir,
    *,
    classifier_names,
    white_box_names=(),
    transfer_name=None,
    config=None,
    config_hash=None,
    panels=None,
) -> dict:
    """Write report.csv, summary.json and figures under ``outdir``.

    ``panels`` is an optional list of (image_id, original, reconstruction,
    adversarial) image tuples; each gets a four-pane figure including a
    5x-amplified difference view.
    """
    records = list(records)
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "report.csv")
    json_path = os.path.join(outdir, "summary.json")

    columns = ["id", "ssim"] + [f"verdict_{n}" for n in classifier_names] + ["radius", "success"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            row = [rec.image_id, _fmt(rec.ssim)]
            row += [rec.verdicts[n] for n in classifier_names]
            row += [_fmt(rec.radius), int(rec.success)]
            writer.writerow(row)

    summary = {
        "report_version": REPORT_VERSION,
        "n_records": len(records),
        "mean_ssim": float(np.mean([r.ssim for r in records])) if records else 0.0,
        "asr": {n: (asr(records, n) if records else 0.0) for n in classifier_names},
        "white_box_success_rate": (
            float(np.mean([r.success for r in records])) if records else 0.0
        ),
        "score": {"per_classifier": breakdown.per_classifier, "total": breakdown.total},
    }
    if white_box_names:
        summary["white_box_names"] = list(white_box_names)
    if transfer_name is not None:
        summary["transfer_name"] = transfer_name
        summary["transfer_asr"] = asr(records, transfer_name) if records else 0.0
    if config_hash is not None:
        summary["config_hash"] = config_hash
    if config is not None:
        summary["config"] = config
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    paths = {"csv": csv_path, "json": json_path, "figures": [], "images": []}
    fig_dir = os.path.join(outdir, "figures")
    os.makedirs(fig_dir, exist_ok=True)

    radii = [r.radius for r in records if r.success and r.radius is not None]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    if radii:
        axes[0].hist(radii, bins=np.arange(0.04, 0.33, 0.02), color="tab:blue")
    axes[0].set_xlabel("radius at success")
    axes[0].set_ylabel("images")
    if records:
        axes[1].hist([r.ssim for r in records], bins=20, color="tab:green")
    axes[1].set_xlabel("similarity")
    fig.tight_layout()
    hist_path = os.path.join(fig_dir, "radius_ssim_hist.png")
    fig.savefig(hist_path, dpi=110)
    plt.close(fig)
    paths["figures"].append(hist_path)

    if panels:
        img_dir = os.path.join(outdir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for image_id, original, recon, adversarial in panels:
            diff = np.clip(5.0 * np.abs(adversarial - original), 0.0, 1.0)
            fig, axes = plt.subplots(1, 4, figsize=(8, 2.3))
            for ax, img, title in zip(
                axes,
                (original, recon, adversarial, diff),
                ("original", "reconstruction", "adversarial", "5x |difference|"),
            ):
                ax.imshow(np.transpose(img, (1, 2, 0)))
                ax.set_title(title, fontsize=8)
                ax.axis("off")
            fig.tight_layout()
            p = os.path.join(img_dir, f"{image_id:05d}.png")
            fig.savefig(p, dpi=110)
            plt.close(fig)
            paths["images"].append(p)

    return paths
