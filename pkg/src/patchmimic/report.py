"""Report emission: delimited tables, a human-readable summary, and figures.

The evaluate command writes report.csv (and optionally curves.csv); the
report command turns those files into matplotlib figures rendered to disk,
so no interactive backend is ever needed.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import DataError
from .metrics import EvaluationReport

_BASE_FIELDS = ["category", "n_test", "n_anomalous", "i_auroc", "p_auroc",
                "size_q1", "size_q2", "size_q3", "size_q4"]


def _pct(limit: float) -> str:
    return f"{limit * 100:g}%"


def _limit_fields(limit: float) -> list[str]:
    p = _pct(limit)
    return ([f"aupro@{p}"] + [f"q{i}_aupro@{p}" for i in range(1, 5)]
            + [f"w@{p}", f"s@{p}", f"rho@{p}"])


def report_fieldnames(limits) -> list[str]:
    fields = list(_BASE_FIELDS)
    for limit in limits:
        fields += _limit_fields(limit)
    return fields


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_report_csv(report: EvaluationReport, path) -> None:
    fields = report_fieldnames(report.limits)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for cat in report.categories:
            row = {
                "category": cat.category,
                "n_test": cat.n_test,
                "n_anomalous": cat.n_anomalous,
                "i_auroc": _fmt(cat.i_auroc),
                "p_auroc": _fmt(cat.p_auroc),
            }
            for i in range(4):
                row[f"size_q{i + 1}"] = _fmt(cat.quartiles[i])
            for limit in report.limits:
                p = _pct(limit)
                row[f"aupro@{p}"] = _fmt(cat.aupro[limit])
                for i in range(4):
                    row[f"q{i + 1}_aupro@{p}"] = _fmt(cat.aupro_quartiles[limit][i])
                row[f"w@{p}"] = _fmt(cat.w[limit])
                row[f"s@{p}"] = _fmt(cat.s[limit])
                row[f"rho@{p}"] = _fmt(cat.rho[limit])
            writer.writerow(row)
        mean_row = {
            "category": "MEAN",
            "n_test": sum(c.n_test for c in report.categories),
            "n_anomalous": sum(c.n_anomalous for c in report.categories),
            "i_auroc": _fmt(report.mean_i_auroc),
            "p_auroc": _fmt(report.mean_p_auroc),
        }
        for limit in report.limits:
            p = _pct(limit)
            mean_row[f"aupro@{p}"] = _fmt(report.mean_aupro[limit])
            for i in range(4):
                mean_row[f"q{i + 1}_aupro@{p}"] = _fmt(report.mean_aupro_quartiles[limit][i])
            mean_row[f"w@{p}"] = _fmt(report.mean_w[limit])
            mean_row[f"s@{p}"] = _fmt(report.mean_s[limit])
            mean_row[f"rho@{p}"] = _fmt(report.mean_rho[limit])
        writer.writerow(mean_row)


def write_curves_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["category", "limit", "fpr", "pro"])
        for cat in report.categories:
            for limit in report.limits:
                curve = cat.curves[limit]
                for fpr, pro in zip(curve.fpr, curve.pro):
                    writer.writerow([cat.category, f"{limit:g}",
                                     f"{fpr:.8f}", f"{pro:.8f}"])


def format_report_table(report: EvaluationReport) -> str:
    """Aligned text table with one row per category plus the dataset mean."""
    headers = ["category", "I-AUROC", "P-AUROC"]
    for limit in report.limits:
        p = _pct(limit)
        headers += [f"AUPRO@{p}", f"rho@{p}"]
    rows = []
    for cat in report.categories:
        row = [cat.category, f"{cat.i_auroc:.4f}", f"{cat.p_auroc:.4f}"]
        for limit in report.limits:
            row += [f"{cat.aupro[limit]:.4f}", f"{cat.rho[limit]:.4f}"]
        rows.append(row)
    mean = ["MEAN", f"{report.mean_i_auroc:.4f}", f"{report.mean_p_auroc:.4f}"]
    for limit in report.limits:
        mean += [f"{report.mean_aupro[limit]:.4f}", f"{report.mean_rho[limit]:.4f}"]
    rows.append(mean)

    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


# --- scores files -----------------------------------------------------------


def write_scores_csv(rows, path) -> None:
    """rows: iterable of (sample_id, global_score, label, map_path)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "global_score", "label", "map_path"])
        for sample_id, score, label, map_path in rows:
            writer.writerow([sample_id, f"{score:.8g}", label, map_path])


def read_scores_csv(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read scores file {path}: {e}") from e


# --- figures -----------------------------------------------------------------


def read_report_csv(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read report file {path}: {e}") from e


def read_curves_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _limits_from_rows(rows) -> list[float]:
    limits = []
    for name in rows[0].keys():
        if name.startswith("aupro@"):
            limits.append(float(name.split("@")[1].rstrip("%")) / 100.0)
    return limits


def render_figures(report_csv, out_dir, curves_csv=None) -> list[str]:
    """Render PRO-curve and quartile-AUPRO figures next to the delimited data.

    Returns the list of files written. Curve figures need curves.csv (written
    by evaluate --dump-curves); without it only the bar charts are produced.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_report_csv(report_csv)
    if not rows:
        raise DataError(f"{report_csv}: empty report")
    limits = _limits_from_rows(rows)
    cat_rows = [r for r in rows if r["category"] != "MEAN"]
    mean_rows = [r for r in rows if r["category"] == "MEAN"]
    os.makedirs(out_dir, exist_ok=True)
    written = []

    for limit in limits:
        p = _pct(limit)
        tag = p.replace("%", "pct")

        fig, ax = plt.subplots(figsize=(7, 4.5))
        cats = [r["category"] for r in cat_rows]
        x = np.arange(len(cats))
        width = 0.2
        for i in range(4):
            vals = [float(r[f"q{i + 1}_aupro@{p}"]) for r in cat_rows]
            ax.bar(x + (i - 1.5) * width, vals, width, label=f"Q{i + 1}")
        ax.set_xticks(x)
        ax.set_xticklabels(cats, rotation=30, ha="right")
        ax.set_ylabel(f"AUPRO@{p}")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"AUPRO@{p} by anomaly-size quartile")
        ax.legend(ncol=4, fontsize=8)
        fig.tight_layout()
        out = os.path.join(out_dir, f"quartile_aupro_{tag}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)

        fig, ax = plt.subplots(figsize=(6, 4))
        cats = [r["category"] for r in cat_rows]
        rhos = [float(r[f"rho@{p}"]) for r in cat_rows]
        ax.bar(np.arange(len(cats)), rhos, color="#356")
        if mean_rows:
            ax.axhline(float(mean_rows[0][f"rho@{p}"]), ls="--", c="k", lw=1,
                       label="dataset mean")
            ax.legend(fontsize=8)
        ax.set_xticks(np.arange(len(cats)))
        ax.set_xticklabels(cats, rotation=30, ha="right")
        ax.set_ylabel(f"robustness rho@{p}")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"Defect-size robustness @{p}")
        fig.tight_layout()
        out = os.path.join(out_dir, f"robustness_{tag}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)

    if curves_csv and os.path.isfile(curves_csv):
        curve_rows = read_curves_csv(curves_csv)
        for limit in limits:
            p = _pct(limit)
            tag = p.replace("%", "pct")
            fig, ax = plt.subplots(figsize=(6, 4.5))
            for cat in sorted({r["category"] for r in curve_rows}):
                pts = [(float(r["fpr"]), float(r["pro"])) for r in curve_rows
                       if r["category"] == cat and float(r["limit"]) == limit]
                if not pts:
                    continue
                fpr = np.array([q[0] for q in pts])
                pro = np.array([q[1] for q in pts])
                keep = fpr <= limit * 1.05
                ax.plot(fpr[keep], pro[keep], label=cat, lw=1.2)
            ax.axvline(limit, color="gray", ls=":", lw=1)
            ax.set_xlim(0, limit * 1.05)
            ax.set_ylim(0, 1.02)
            ax.set_xlabel("false positive rate")
            ax.set_ylabel("per-region overlap")
            ax.set_title(f"PRO curves up to FPR={limit:g}")
            ax.legend(fontsize=8)
            fig.tight_layout()
            out = os.path.join(out_dir, f"pro_curves_{tag}.png")
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written.append(out)
    return written
