"""Plots of per-frame pose errors."""
import io
import logging
from pathlib import Path
from typing import Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from db.models import SequenceMeta, SuccessConfig

logger = logging.getLogger(__name__)

# Fixed salt and no date stamp keep SVG output byte-reproducible
SVG_HASHSALT = "fusepose"
SVG_METADATA = {"Date": None}

FIGSIZE = (10, 6)
BAND_COLORS = {"harsh": "#f8c8d8", "low-motion": "#c8b4e6"}
TRACE_COLORS = {"u_rgb": "#ff7f0e", "u_event": "#2ca02c"}
PANELS = (("omega_m", "omega [m]"), ("theta_deg", "theta [deg]"))


def _y_limit(values: np.ndarray, degenerate: np.ndarray, threshold: float) -> float:
    clean = values[~degenerate & np.isfinite(values)]
    return max(float(clean.max()) if len(clean) else 0.0, 2.0 * threshold) * 1.1


def _draw_panel(ax, panel: int, errors: pd.DataFrame, column: str, label: str, threshold: float,
                meta: SequenceMeta) -> None:
    frames = errors["frame"].to_numpy()
    values = errors[column].to_numpy(dtype=float)
    degenerate = errors["degenerate"].to_numpy(dtype=bool)

    for css, ranges in (("harsh", meta.harsh_ranges), ("low-motion", meta.low_motion_ranges)):
        for i, (start, end) in enumerate(ranges):
            ax.axvspan(start, end, color=BAND_COLORS[css], alpha=0.6, linewidth=0, gid=f"band-{css}-{panel}-{i}")
    ax.axhline(threshold, color="#555555", linestyle="--", linewidth=1, gid=f"threshold-{panel}")

    shown = ~degenerate & np.isfinite(values)
    ax.plot(frames[shown], values[shown], linestyle="none", marker=".", markersize=3, color="#1f4e99",
            gid=f"points-{panel}")
    if degenerate.any():
        # crosses sit along the top edge, in axes coordinates
        ax.plot(frames[degenerate], np.full(int(degenerate.sum()), 0.97), linestyle="none", marker="x",
                color="#d62728", transform=ax.get_xaxis_transform(), gid=f"degenerate-{panel}")

    ax.set_ylim(0.0, _y_limit(values, degenerate, threshold))
    ax.set_xlim(1, max(meta.n_frames, 2))
    ax.set_ylabel(label)

    traces = [c for c in TRACE_COLORS if c in errors and np.isfinite(errors[c].to_numpy(dtype=float)).any()]
    if traces:
        twin = ax.twinx()
        for column_u in traces:
            u = errors[column_u].to_numpy(dtype=float)
            finite = np.isfinite(u)
            twin.plot(frames[finite], u[finite], linewidth=1, color=TRACE_COLORS[column_u],
                      gid=f"{column_u.replace('_', '-')}-{panel}")
        twin.set_ylabel("U [px]")


def plot_errors(errors: pd.DataFrame, meta: SequenceMeta, success: Optional[SuccessConfig] = None,
                title: Optional[str] = None):
    """Two stacked panels (position error, orientation error) over the frame index.

    Harsh and low-motion ranges are shaded, degenerate frames drawn as crosses and
    the per-channel uncertainties overlaid on a secondary axis.
    """
    success = success or SuccessConfig()
    fig, axes = plt.subplots(2, 1, figsize=FIGSIZE, sharex=True)
    for panel, ((column, label), threshold) in enumerate(zip(PANELS, (success.rho, success.sigma))):
        _draw_panel(axes[panel], panel, errors, column, label, threshold, meta)
    axes[0].set_title(title or meta.name)
    axes[1].set_xlabel("frame")
    fig.tight_layout()
    return fig


def emit_plots(errors: pd.DataFrame, meta: SequenceMeta, success: Optional[SuccessConfig] = None,
               title: Optional[str] = None) -> str:
    """The error plot as an SVG document."""
    fig = plot_errors(errors, meta, success, title)
    buffer = io.StringIO()
    try:
        with plt.rc_context({"svg.hashsalt": SVG_HASHSALT}):
            fig.savefig(buffer, format="svg", metadata=SVG_METADATA)
    finally:
        plt.close(fig)
    logger.debug(f"plotted {len(errors)} frames of {meta.name}")
    return buffer.getvalue()


def save_plots(errors: pd.DataFrame, meta: SequenceMeta, path: Path, success: Optional[SuccessConfig] = None,
               title: Optional[str] = None) -> Path:
    """Writes the plot; the format follows the file suffix (svg, png, pdf)."""
    path = Path(path)
    if path.suffix.lower() == ".svg":
        path.write_text(emit_plots(errors, meta, success, title))
        return path
    fig = plot_errors(errors, meta, success, title)
    try:
        fig.savefig(path, dpi=150)
    finally:
        plt.close(fig)
    return path
