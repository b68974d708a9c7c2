"""Rendering of run reports: per-class CSV plus matplotlib figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from rfcam.detector import DetectionRecord

PER_CLASS_COLUMNS = [
    "class_index", "class_name", "n_test", "n_correct", "n_flagged",
    "flag_rate_test", "flag_rate_correct", "lsm_train_accuracy", "lsm_test_accuracy",
]


def write_per_class_csv(path: str | Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_CLASS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in report["per_class"]:
            writer.writerow(row)


def render_flag_rate_figure(path: str | Path, report: dict) -> None:
    rows = report["per_class"]
    names = [r["class_name"] for r in rows]
    rates = [100.0 * r["flag_rate_correct"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows)), 3.2))
    ax.bar(range(len(rows)), rates, color="#3b6ea5")
    overall = 100.0 * report["overall"]["flag_rate_correct"]
    ax.axhline(overall, color="#b04a3a", linestyle="--", linewidth=1,
               label=f"overall {overall:.1f}%")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("flag rate over correct (%)")
    ax.set_title("Potential spurious correlations per class")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_score_histogram(path: str | Path, records: list[DetectionRecord], theta: float) -> None:
    scores = [r.dissimilarity for r in records if r.status != "diagnostic" or r.warning is None]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(scores, bins=40, range=(0, 100), color="#4a8f5c")
    ax.axvline(theta, color="#b04a3a", linestyle="--", linewidth=1,
               label=f"theta = {theta:g}")
    ax.set_xlabel("dissimilarity (masked MSE, % scale)")
    ax.set_ylabel("instances")
    ax.set_title("RF-CAM vs Grad-CAM dissimilarity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_report_outputs(out_dir: str | Path, report: dict, records: list[DetectionRecord]) -> list[Path]:
    """Write report.csv and the figures directory; returns written paths."""
    out_dir = Path(out_dir)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "report.csv"
    write_per_class_csv(csv_path, report)
    written.append(csv_path)

    flag_path = fig_dir / "flag_rates.png"
    render_flag_rate_figure(flag_path, report)
    written.append(flag_path)

    theta = report.get("config", {}).get("detection", {}).get("mse_threshold", 15.0)
    hist_path = fig_dir / "dissimilarity_hist.png"
    render_score_histogram(hist_path, records, theta)
    written.append(hist_path)
    return written


def format_per_class_table(report: dict) -> str:
    header = f"{'class':<14} {'n_test':>6} {'correct':>7} {'flagged':>7} {'rate%':>7} {'lsm_acc':>7}"
    lines = [header, "-" * len(header)]
    for row in report["per_class"]:
        acc = row["lsm_test_accuracy"]
        lines.append(
            f"{row['class_name']:<14} {row['n_test']:>6} {row['n_correct']:>7} "
            f"{row['n_flagged']:>7} {100 * row['flag_rate_correct']:>6.1f}% "
            f"{acc if acc is None else format(acc, '.3f'):>7}"
        )
    o = report["overall"]
    lines.append("-" * len(header))
    lines.append(
        f"{'overall':<14} {o['n_test']:>6} {o['n_correct']:>7} {o['n_flagged']:>7} "
        f"{100 * o['flag_rate_correct']:>6.1f}%"
    )
    return "\n".join(lines)
