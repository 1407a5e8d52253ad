"""Report rendering: JSON, aligned text tables, and matplotlib figures.

Every percentage is formatted with two decimals.  Figures are written
headlessly (Agg backend) next to the JSON/text output.
"""

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRIC_ORDER = ("P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU")
SPLIT_ORDER = ("val", "test")


def _ordered_metrics(report):
    keys = [k for k in METRIC_ORDER if k in report]
    keys += [k for k in report if k not in keys]
    return keys


def round_report(report):
    return {k: round(v, 2) for k, v in report.items()}


def write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def format_metrics_table(reports):
    """Aligned text table, metrics as columns, one row per split.

    ``reports`` maps split name -> metric report; rows follow val, test order
    with any extra splits appended.
    """
    splits = [s for s in SPLIT_ORDER if s in reports]
    splits += [s for s in reports if s not in splits]
    metrics = _ordered_metrics(reports[splits[0]])
    width = max(8, max(len(m) for m in metrics) + 2)
    name_width = max(len("split"), max(len(s) for s in splits)) + 2
    lines = ["split".ljust(name_width) + "".join(m.rjust(width) for m in metrics)]
    for split in splits:
        row = reports[split]
        lines.append(
            split.ljust(name_width)
            + "".join(f"{row[m]:.2f}".rjust(width) for m in metrics)
        )
    return "\n".join(lines) + "\n"


def format_ablation_table(rows):
    """Three-row PSR/CSR grid with the metric columns appended.

    ``rows`` is a list of dicts with keys use_psr, use_csr, and a metric
    report under "metrics".
    """
    metrics = _ordered_metrics(rows[0]["metrics"])
    width = max(8, max(len(m) for m in metrics) + 2)
    header = "PSR".ljust(6) + "CSR".ljust(6) + "".join(m.rjust(width) for m in metrics)
    lines = [header]
    for row in rows:
        flags = ("yes" if row["use_psr"] else "no").ljust(6)
        flags += ("yes" if row["use_csr"] else "no").ljust(6)
        lines.append(
            flags + "".join(f"{row['metrics'][m]:.2f}".rjust(width) for m in metrics)
        )
    return "\n".join(lines) + "\n"


def render_metrics_figure(reports, path):
    """Grouped bar chart of the metric report(s), one bar group per metric."""
    splits = [s for s in SPLIT_ORDER if s in reports]
    splits += [s for s in reports if s not in splits]
    metrics = _ordered_metrics(reports[splits[0]])
    x = range(len(metrics))
    bar_w = 0.8 / len(splits)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, split in enumerate(splits):
        values = [reports[split][m] for m in metrics]
        offset = (i - (len(splits) - 1) / 2) * bar_w
        ax.bar([xi + offset for xi in x], values, width=bar_w, label=split)
    ax.set_xticks(list(x))
    ax.set_xticklabels(metrics)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation_figure(rows, path):
    """Grouped bar chart of the ablation grid, one bar per configuration."""
    metrics = _ordered_metrics(rows[0]["metrics"])
    labels = [
        f"PSR {'on' if r['use_psr'] else 'off'} / CSR {'on' if r['use_csr'] else 'off'}"
        for r in rows
    ]
    x = range(len(metrics))
    bar_w = 0.8 / len(rows)
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, (row, label) in enumerate(zip(rows, labels)):
        values = [row["metrics"][m] for m in metrics]
        offset = (i - (len(rows) - 1) / 2) * bar_w
        ax.bar([xi + offset for xi in x], values, width=bar_w, label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels(metrics)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_training_curves(log_records, path):
    """Loss and learning-rate curves over optimizer steps, plus epoch metrics."""
    steps = [r["step"] for r in log_records if r.get("event") == "step"]
    losses = [r["loss"] for r in log_records if r.get("event") == "step"]
    lrs = [r["lr"] for r in log_records if r.get("event") == "step"]
    epoch_recs = [r for r in log_records if r.get("event") == "epoch"]

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(steps, losses, lw=1.0)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    ax_lr = axes[0].twinx()
    ax_lr.plot(steps, lrs, color="tab:orange", lw=1.0, alpha=0.6)
    ax_lr.set_ylabel("lr", color="tab:orange")

    if epoch_recs:
        epochs = [r["epoch"] for r in epoch_recs]
        mious = [r["mIoU"] for r in epoch_recs]
        axes[1].plot(epochs, mious, marker="o", ms=3)
        axes[1].set_ylim(0, 105)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
