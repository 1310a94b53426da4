"""Side-by-side comparison of robustness reports, as text, CSV and figures."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["compare_reports", "format_comparison", "write_comparison"]

_METRICS = ("accuracy", "feature_consistency", "grouping_purity")


def compare_reports(a: dict, b: dict) -> list[dict]:
    """Join two reports on (kind, severity) and compute per-metric deltas."""
    index_b = {(c["kind"], c["severity"]): c for c in b.get("cells", [])}
    rows = []
    for cell in a.get("cells", []):
        key = (cell["kind"], cell["severity"])
        other = index_b.get(key)
        if other is None:
            continue
        row = {"kind": cell["kind"], "severity": cell["severity"]}
        for metric in _METRICS:
            va, vb = cell.get(metric), other.get(metric)
            row[f"{metric}_a"] = va
            row[f"{metric}_b"] = vb
            row[f"{metric}_delta"] = (vb - va) if va is not None and vb is not None else None
        rows.append(row)
    return rows


def format_comparison(a: dict, b: dict, rows: list[dict]) -> str:
    name_a = a.get("model_kind", "a")
    name_b = b.get("model_kind", "b")
    lines = [
        f"clean accuracy: {name_a}={a.get('clean_accuracy'):.4f}  "
        f"{name_b}={b.get('clean_accuracy'):.4f}",
        f"{'kind':<20}{'sev':>4}{'acc(' + name_a + ')':>12}"
        f"{'acc(' + name_b + ')':>12}{'delta':>9}",
    ]
    for r in rows:
        lines.append(f"{r['kind']:<20}{r['severity']:>4}"
                     f"{r['accuracy_a']:>12.4f}{r['accuracy_b']:>12.4f}"
                     f"{r['accuracy_delta']:>+9.4f}")
    return "\n".join(lines)


def write_comparison(a: dict, b: dict, rows: list[dict], out_dir: str) -> list[str]:
    """Write deltas.csv plus accuracy/consistency figures; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    csv_path = os.path.join(out_dir, "deltas.csv")
    fields = ["kind", "severity"] + [f"{m}_{s}" for m in _METRICS
                                     for s in ("a", "b", "delta")]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    written.append(csv_path)

    name_a = a.get("model_kind", "a")
    name_b = b.get("model_kind", "b")
    kinds = sorted({r["kind"] for r in rows})

    # accuracy vs severity, one panel per corruption kind
    ncols = min(4, max(1, len(kinds)))
    nrows = (len(kinds) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows),
                             squeeze=False, sharey=True)
    for ax in axes.reshape(-1):
        ax.axis("off")
    for i, kind in enumerate(kinds):
        ax = axes.reshape(-1)[i]
        ax.axis("on")
        sub = sorted((r for r in rows if r["kind"] == kind),
                     key=lambda r: r["severity"])
        sev = [r["severity"] for r in sub]
        ax.plot(sev, [r["accuracy_a"] for r in sub], "o-", label=name_a)
        ax.plot(sev, [r["accuracy_b"] for r in sub], "s-", label=name_b)
        ax.axhline(a.get("clean_accuracy"), ls=":", c="gray", lw=0.8)
        ax.set_title(kind, fontsize=9)
        ax.set_xticks(sev)
        ax.set_ylim(0, 1.02)
    axes[0, 0].legend(fontsize=8)
    fig.supxlabel("severity")
    fig.supylabel("accuracy")
    fig.tight_layout()
    acc_path = os.path.join(out_dir, "accuracy_vs_severity.png")
    fig.savefig(acc_path, dpi=120)
    plt.close(fig)
    written.append(acc_path)

    # accuracy delta bars at the highest severity present
    top = max(r["severity"] for r in rows)
    top_rows = [r for r in rows if r["severity"] == top]
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * len(top_rows), 3.2))
    deltas = [r["accuracy_delta"] for r in top_rows]
    ax.bar(range(len(top_rows)), deltas,
           color=["tab:green" if d >= 0 else "tab:red" for d in deltas])
    ax.set_xticks(range(len(top_rows)))
    ax.set_xticklabels([r["kind"] for r in top_rows], rotation=45, ha="right",
                       fontsize=8)
    ax.axhline(0, c="black", lw=0.8)
    ax.set_ylabel(f"accuracy delta ({name_b} - {name_a}) @ severity {top}")
    fig.tight_layout()
    delta_path = os.path.join(out_dir, "severity_top_delta.png")
    fig.savefig(delta_path, dpi=120)
    plt.close(fig)
    written.append(delta_path)

    # feature consistency comparison
    if any(r["feature_consistency_a"] is not None for r in rows):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        xs = [r["feature_consistency_a"] for r in rows]
        ys = [r["feature_consistency_b"] for r in rows]
        ax.scatter(xs, ys, s=18)
        lo = min(min(xs), min(ys), 0.0)
        ax.plot([lo, 1], [lo, 1], ls="--", c="gray", lw=0.8)
        ax.set_xlabel(f"feature consistency ({name_a})")
        ax.set_ylabel(f"feature consistency ({name_b})")
        fig.tight_layout()
        cons_path = os.path.join(out_dir, "consistency_scatter.png")
        fig.savefig(cons_path, dpi=120)
        plt.close(fig)
        written.append(cons_path)

    return written
