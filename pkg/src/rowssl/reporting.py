"""Aggregate finished runs into a summary table and SVG charts.

A "run" is a directory produced by the train/eval commands: it holds
``effective_config.json``, ``train_log.csv``, and ``report.json``. The
summary path flattens every report metric into one CSV and renders two
figures — loss curves over epochs and final accuracies per protocol — to
SVG files next to it. Rendering is pinned to byte-determinism: fixed hash
salt, no timestamps, stable run ordering.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import GROUP_KEYS, PROTOCOL_ORDER  # noqa: E402

_SVG_METADATA = {"Date": None}

LOG_COLUMNS = (
    "epoch", "lr", "unsup", "sup", "rep", "ce", "entropy", "cls", "total",
    "train_acc", "train_bacc",
)


def write_train_log_csv(log: list[dict], path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow(
                ["" if row[c] is None else repr(float(row[c])) if isinstance(row[c], float) else row[c]
                 for c in LOG_COLUMNS]
            )


def read_train_log_csv(path: str) -> list[dict]:
    rows = []
    with open(path, "r", newline="") as fh:
        for rec in csv.DictReader(fh):
            row: dict = {}
            for key, val in rec.items():
                if val == "" or val is None:
                    row[key] = None
                elif key == "epoch":
                    row[key] = int(val)
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows


def collect_run(run_dir: str) -> dict:
    """Load whatever artifacts a run directory holds (missing ones are None)."""
    out = {"name": os.path.basename(os.path.normpath(run_dir)), "dir": run_dir,
           "config": None, "log": None, "report": None}
    cfg_path = os.path.join(run_dir, "effective_config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            out["config"] = json.load(fh)
    log_path = os.path.join(run_dir, "train_log.csv")
    if os.path.exists(log_path):
        out["log"] = read_train_log_csv(log_path)
    rep_path = os.path.join(run_dir, "report.json")
    if os.path.exists(rep_path):
        with open(rep_path) as fh:
            out["report"] = json.load(fh)
    return out


def write_summary_csv(runs: list[dict], path: str) -> None:
    """One row per (run, protocol, metric, group) across all collected runs."""
    lines = ["run,protocol,metric,group,value"]
    for run in runs:
        report = run.get("report")
        if not report:
            continue
        for proto in PROTOCOL_ORDER:
            if proto not in report:
                continue
            entry = report[proto]
            for group in ("all", "old", "new"):
                val = entry["acc"].get(group)
                lines.append(_summary_row(run["name"], proto, "acc", group, val))
            for group in ("all", "old", "new"):
                val = entry["bacc"].get(group)
                lines.append(_summary_row(run["name"], proto, "bacc", group, val))
            for key in GROUP_KEYS:
                val = entry["group_bacc"].get(key)
                lines.append(_summary_row(run["name"], proto, "group_bacc", key, val))
            for key in ("head", "tail"):
                if "phi" in entry and key in entry["phi"]:
                    lines.append(_summary_row(run["name"], proto, "phi", key, entry["phi"][key]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _summary_row(name: str, proto: str, metric: str, group: str, value) -> str:
    text = "" if value is None else repr(float(value))
    return f"{name},{proto},{metric},{group},{text}"


def _fresh_figure(width: float = 7.0, height: float = 4.2):
    plt.rcParams["svg.hashsalt"] = "rowssl"
    plt.rcParams["svg.fonttype"] = "path"
    return plt.subplots(figsize=(width, height), dpi=100)


def render_loss_chart(runs: list[dict], path: str) -> bool:
    """Total/representation/classification loss per epoch, one panel per run."""
    with_logs = [r for r in runs if r.get("log")]
    if not with_logs:
        return False
    fig, ax = _fresh_figure()
    for run in with_logs:
        epochs = [row["epoch"] for row in run["log"]]
        for series, style in (("total", "-"), ("rep", "--"), ("cls", ":")):
            ax.plot(
                epochs,
                [row[series] for row in run["log"]],
                style,
                linewidth=1.4,
                label=f"{run['name']} {series}",
            )
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return True


def render_accuracy_chart(runs: list[dict], path: str) -> bool:
    """Grouped bars: overall acc and bacc per protocol, one cluster per run."""
    with_reports = [r for r in runs if r.get("report")]
    if not with_reports:
        return False
    fig, ax = _fresh_figure()
    protos = [p for p in PROTOCOL_ORDER if any(p in r["report"] for r in with_reports)]
    n_runs = len(with_reports)
    width = 0.8 / max(1, n_runs * 2)
    for i, run in enumerate(with_reports):
        accs, baccs = [], []
        for p in protos:
            entry = run["report"].get(p, {})
            accs.append(entry.get("acc", {}).get("all") or 0.0)
            baccs.append(entry.get("bacc", {}).get("all") or 0.0)
        base = [j + (2 * i - n_runs) * width for j in range(len(protos))]
        ax.bar(base, accs, width, label=f"{run['name']} acc")
        ax.bar([b + width for b in base], baccs, width, label=f"{run['name']} bacc")
    ax.set_xticks(range(len(protos)))
    ax.set_xticklabels(protos, fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("accuracy")
    ax.set_title("evaluation accuracy by protocol")
    ax.legend(fontsize=7)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    return True
