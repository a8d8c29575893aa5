"""Plots rendered next to the delimited reports.

Every report directory gets PNG figures built from the same stage
records the CSVs are written from: accuracy-over-stages curves per
strategy, and a 2-D view of the exported entity embeddings when those
files exist. All rendering uses the Agg backend; nothing opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

from .evaluation import StageReport

# stable strategy -> colour mapping so figures are comparable across runs
_PALETTE = {
    "finetune": "tab:red",
    "multitask": "tab:green",
    "ewc": "tab:purple",
    "agem": "tab:brown",
    "e2mc": "tab:blue",
    "e2mc-no-entity": "tab:orange",
    "e2mc-no-attention": "tab:cyan",
    "e2mc-no-align": "tab:gray",
}


def _series(reports: list[StageReport], metric: str):
    """{strategy: (stages, mean-over-seeds values)} for one metric."""
    by_strategy: dict[str, dict[int, list[float]]] = {}
    for r in reports:
        by_strategy.setdefault(r.strategy, {}).setdefault(r.stage, []).append(
            getattr(r, metric)
        )
    out = {}
    for name, stages in by_strategy.items():
        xs = sorted(stages)
        ys = [sum(stages[x]) / len(stages[x]) for x in xs]
        out[name] = (xs, ys)
    return out


def _curve_figure(reports, metric: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, (xs, ys) in sorted(_series(reports, metric).items()):
        ax.plot(xs, ys, marker="o", label=name, color=_PALETTE.get(name))
    ax.set_xlabel("stage")
    ax.set_ylabel(title)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_accuracy_figures(reports: list[StageReport], out_dir) -> list[Path]:
    """acc_first and acc_avg curves; returns the written paths."""
    out_dir = Path(out_dir)
    paths = []
    for metric, title, fname in (
        ("acc_first", "first-task accuracy", "acc_first.png"),
        ("acc_avg", "average accuracy over seen tasks", "acc_avg.png"),
    ):
        path = out_dir / fname
        _curve_figure(reports, metric, title, path)
        paths.append(path)
    return paths


def render_aggregation_figure(reports: list[StageReport], out_dir) -> Path | None:
    """Aggregation-degree curves for strategies that have an entity channel."""
    with_agg = [r for r in reports if not math.isnan(r.aggregation_degree)]
    if not with_agg:
        return None
    path = Path(out_dir) / "aggregation_degree.png"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, (xs, ys) in sorted(_series(with_agg, "aggregation_degree").items()):
        ax.plot(xs, ys, marker="o", label=name, color=_PALETTE.get(name))
    ax.set_xlabel("stage")
    ax.set_ylabel("aggregation degree")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_embedding_figure(csv_path, out_path) -> Path:
    """Scatter the pca_x/pca_y columns of one exported embedding file,
    coloured by entity type."""
    lines = Path(csv_path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    ix, iy, itype = header.index("pca_x"), header.index("pca_y"), header.index("type")
    by_type: dict[str, list[tuple[float, float]]] = {}
    for line in lines[1:]:
        parts = line.split(",")
        by_type.setdefault(parts[itype], []).append((float(parts[ix]), float(parts[iy])))
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for etype in sorted(by_type):
        pts = by_type[etype]
        ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=14, label=etype, alpha=0.8)
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, markerscale=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def render_report_figures(reports: list[StageReport], out_dir) -> list[Path]:
    """All standard figures for a finished experiment directory."""
    out_dir = Path(out_dir)
    paths = render_accuracy_figures(reports, out_dir)
    agg = render_aggregation_figure(reports, out_dir)
    if agg is not None:
        paths.append(agg)
    return paths
