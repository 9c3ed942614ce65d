"""Static vector-graphics charts from metrics JSONL files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class ChartError(ValueError):
    pass


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def render_chart(records: list[dict], out_path: str | Path) -> None:
    """Pick a chart for the record type found in the file.

    Training records (step/loss) become a loss-vs-step curve; metric
    records become one line per metric against M_val (or M for path
    integration), averaged over seeds.
    """
    if not records:
        raise ChartError("no records to chart")
    if "step" in records[0]:
        _training_chart(records, out_path)
    elif "metric" in records[0]:
        _metric_chart(records, out_path)
    else:
        raise ChartError("unrecognized record layout")


def _training_chart(records: list[dict], out_path) -> None:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss"] for r in records], label="loss", lw=1.0)
    if any("collapse_std" in r for r in records):
        ax2 = ax.twinx()
        ax2.plot(
            steps,
            [r.get("collapse_std") for r in records],
            label="collapse std",
            color="tab:orange",
            lw=0.8,
        )
        ax2.set_ylabel("collapse std")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def _metric_chart(records: list[dict], out_path) -> None:
    series: dict[str, dict[float, list[float]]] = {}
    for r in records:
        prov = r.get("provenance", {})
        x = prov.get("M_val", prov.get("M"))
        if x is None:
            x = 0
        series.setdefault(r["metric"], {}).setdefault(float(x), []).append(
            r["value"]
        )
    fig, ax = plt.subplots(figsize=(7, 4))
    for metric, pts in sorted(series.items()):
        xs = sorted(pts)
        ys = [float(np.mean(pts[x])) for x in xs]
        ax.plot(xs, ys, marker="o", label=metric)
    ax.set_xlabel("inference sequence length")
    ax.set_ylabel("metric value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_matrix_heatmap(csv_text: str, metric: str, out_path: str | Path) -> None:
    lines = [l for l in csv_text.strip().splitlines() if l]
    cols = [int(c) for c in lines[0].split(",")[1:]]
    rows, grid = [], []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(int(parts[0]))
        grid.append([float(v) if v else np.nan for v in parts[1:]])
    data = np.array(grid)
    fig, ax = plt.subplots(figsize=(1.2 + len(cols), 1.0 + len(rows)))
    im = ax.imshow(data, cmap="viridis")
    ax.set_xticks(range(len(cols)), [str(c) for c in cols])
    ax.set_yticks(range(len(rows)), [str(r) for r in rows])
    ax.set_xlabel("M_val")
    ax.set_ylabel("M_tr")
    ax.set_title(metric)
    for i in range(len(rows)):
        for j in range(len(cols)):
            if np.isfinite(data[i, j]):
                ax.text(j, i, f"{data[i, j]:.3f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
