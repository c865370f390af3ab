"""Report tables (accuracy / V-measure grid) and per-component bar charts."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

if TYPE_CHECKING:
    from .experiment import SeedResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.4f"
TABLE_METRICS = ("balanced_accuracy", "v_measure")
LABELINGS = ("majority", "explanation")

plt.rcParams["svg.hashsalt"] = "flow-monitor"
plt.rcParams["svg.fonttype"] = "none"


def column_name(algorithm: str, k: int | None) -> str:
    return f"{algorithm}_{k if k is not None else '-'}"


def cell_frame(results: Sequence["SeedResult"]) -> pd.DataFrame:
    """One row per successful grid cell, labeling and metric."""
    records = []
    for seed_result in results:
        for cell in seed_result.cells:
            for labeling in LABELINGS:
                report = cell.metrics.get(labeling)
                if report is None:
                    continue
                for metric in TABLE_METRICS:
                    records.append(
                        {
                            "seed": cell.seed,
                            "window": cell.window,
                            "column": column_name(cell.algorithm, cell.k),
                            "labeling": labeling,
                            "metric": metric,
                            "value": getattr(report, metric),
                        }
                    )
    return pd.DataFrame.from_records(
        records, columns=["seed", "window", "column", "labeling", "metric", "value"]
    )


def accuracy_table(results: Sequence["SeedResult"], labeling: str = "majority") -> pd.DataFrame:
    """Mean over seeds, rows (metric, window), columns algorithm_k."""
    cells = cell_frame(results)
    cells = cells[cells["labeling"] == labeling]
    if cells.empty:
        return pd.DataFrame()
    table = cells.pivot_table(
        index=["metric", "window"], columns="column", values="value", aggfunc="mean"
    )
    order = [m for m in TABLE_METRICS if m in table.index.get_level_values(0)]
    return table.reindex(order, level=0).sort_index(axis=1)


def component_frame(results: Sequence["SeedResult"], window: int) -> pd.DataFrame:
    """Mean per-component statistics per injected class at ``window``, averaged over seeds."""
    frames = [r.class_means[window] for r in results if window in r.class_means]
    if not frames:
        return pd.DataFrame()
    stacked = pd.concat(frames)
    return stacked.groupby(level=0).mean().reindex(columns=frames[0].columns)


def write_table(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, float_format=FLOAT_FORMAT)
    logger.info("Wrote %s", path)


def render_bars(frame: pd.DataFrame, path: Path, title: str = "") -> None:
    """Grouped bars: one group per injected class, one bar per component statistic."""
    classes = list(frame.index)
    components = list(frame.columns)
    width = 0.8 / max(len(components), 1)
    x = np.arange(len(classes))

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, component in enumerate(components):
        ax.bar(x + i * width - 0.4 + width / 2, frame[component].to_numpy(), width, label=f"S_{component}")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{c} faults" for c in classes])
    ax.set_ylabel("mean misalignments per trace")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    logger.info("Wrote %s", path)
