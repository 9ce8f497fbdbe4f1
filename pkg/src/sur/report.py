"""Figure and table rendering for train logs and evaluation reports.

Every figure is written next to a delimited (CSV) version of the same data,
so downstream tooling never has to parse an image. SVG output is kept
reproducible: the element-id hash salt is pinned and the creation date
metadata is suppressed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "sur"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import DataError  # noqa: E402

LOSS_COLUMNS = ("l_total", "l_simple", "l_llm", "l_cp")


def _savefig(fig, out_path) -> None:
    out_path = Path(out_path)
    kwargs = {}
    if out_path.suffix == ".svg":
        kwargs["metadata"] = {"Date": None}
    fig.savefig(out_path, **kwargs)
    plt.close(fig)


def read_train_log(log_path) -> list[dict]:
    rows = []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    if not rows:
        raise DataError(f"{log_path}: empty train log")
    return rows


def render_loss_curves(log_path, out_path) -> Path:
    """Loss-term curves from a JSONL train log; writes figure plus CSV."""
    rows = read_train_log(log_path)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col in LOSS_COLUMNS:
        ax.plot(steps, [r[col] for r in rows], label=col, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("training loss terms")
    fig.tight_layout()
    _savefig(fig, out_path)

    csv_path = Path(out_path).with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *LOSS_COLUMNS, "grad_norm"])
        for r in rows:
            writer.writerow([r["step"], *(repr(r[c]) for c in LOSS_COLUMNS), repr(r["grad_norm"])])
    return Path(out_path)


def render_eval_summary(report_path, out_path) -> Path:
    """Accuracy bars and parity table from an evaluation report JSON."""
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    acc = report["semantic_accuracy"]
    categories = sorted(acc["baseline"]["per_category"])
    base_vals = [acc["baseline"]["per_category"][c] for c in categories]
    adap_vals = [acc["adapter"]["per_category"][c] for c in categories]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    x = range(len(categories))
    width = 0.38
    ax1.bar([i - width / 2 for i in x], base_vals, width, label="baseline")
    ax1.bar([i + width / 2 for i in x], adap_vals, width, label="adapter")
    ax1.set_xticks(list(x))
    ax1.set_xticklabels(categories)
    ax1.set_ylabel("semantic accuracy (%)")
    ax1.set_ylim(0, 100)
    ax1.legend(fontsize=8)
    cs = report["clip_score"]
    ax1.set_title(f"paired score: base {cs['baseline']:.3f} / adapter {cs['adapter']:.3f}")

    ax2.axis("off")
    lines = ["metric        p-value   parity"]
    for metric, q in sorted(report.get("quality_parity", {}).items()):
        lines.append(f"{metric:<12s}  {q['p']:.4f}   {'yes' if q['parity'] else 'no'}")
    if len(lines) == 1:
        lines.append("(no quality metrics supplied)")
    ax2.text(0.0, 0.95, "\n".join(lines), family="monospace", fontsize=9, va="top")
    ax2.set_title("quality parity")
    fig.tight_layout()
    _savefig(fig, out_path)

    csv_path = Path(out_path).with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "name", "baseline", "adapter", "p", "parity"])
        writer.writerow(["clip_score", "mean", repr(cs["baseline"]), repr(cs["adapter"]), "", ""])
        for c in categories:
            writer.writerow(["accuracy", c,
                             repr(acc["baseline"]["per_category"][c]),
                             repr(acc["adapter"]["per_category"][c]), "", ""])
        for metric, q in sorted(report.get("quality_parity", {}).items()):
            writer.writerow(["quality", metric, repr(q["baseline_mean"]),
                             repr(q["adapter_mean"]), repr(q["p"]), q["parity"]])
    return Path(out_path)


def render(in_path, out_path) -> Path:
    """Dispatch on input type: .jsonl train logs vs .json eval reports."""
    in_path = Path(in_path)
    if in_path.suffix == ".jsonl":
        return render_loss_curves(in_path, out_path)
    if in_path.suffix == ".json":
        return render_eval_summary(in_path, out_path)
    raise DataError(f"cannot infer report type from {in_path.name!r} (want .jsonl or .json)")
