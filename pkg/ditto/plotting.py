"""
SVG line charts from stored report rows: error vs N_t^test, vs rollout step,
vs noise level. Plots never touch a model.
"""

import io
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position

from ditto.rollout import group_rows  # noqa: E402  pylint: disable=wrong-import-position
from ditto.schema import EvalRow  # noqa: E402  pylint: disable=wrong-import-position

logger = logging.getLogger(__name__)

AXIS_LABELS = {
    "nt_test": "N_t^test",
    "step": "rollout step",
    "gamma": "noise level gamma",
    "lf": "look-forward window lf",
    "horizon": "horizon",
}

# fixed ids and no timestamp so identical reports give identical files
matplotlib.rcParams["svg.hashsalt"] = "ditto"


def plot_axis(rows: Sequence[EvalRow], axis: str, path: Union[str, Path]) -> Path:
    """One curve per scenario/variant: mean rel-L2 with a +-std band."""
    from ditto.storage import write_bytes_atomic

    groups = group_rows([row for row in rows if row.axis == axis])
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in sorted(groups.items()):
        x = [row.value for row in group]
        mean = [row.mean for row in group]
        lower = [max(row.mean - row.std, 1e-12) for row in group]
        upper = [row.mean + row.std for row in group]
        line, = ax.plot(x, mean, marker="o" if len(x) <= 20 else None, label=label)
        ax.fill_between(x, lower, upper, color=line.get_color(), alpha=0.2)
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("relative L2 error")
    if all(row.mean > 0 for group in groups.values() for row in group):
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()

    path = Path(path)
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_bytes_atomic(path, buffer.getvalue())
    logger.info("wrote %s (%d curves)", path, len(groups))
    return path


def plot_report(rows: Sequence[EvalRow], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """``<axis>.svg`` for every axis present in ``rows``."""
    out_dir = Path(out_dir)
    axes: List[str] = sorted({row.axis for row in rows})
    return {axis: plot_axis(rows, axis, out_dir / f"{axis}.svg") for axis in axes}
