"""Pictures of localization results.

``overlay`` blends a JET-coloured map over the input image at the input's
own resolution.  ``stage_panels`` draws one panel per stage of a size index:
the stage input with its winning cell outlined and, when the trajectory is
available, the recorded losses and peak gap against the epoch.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import ConfigError, ShapeError  # noqa: E402
from .hierarchy import HierarchyResult, stage_input  # noqa: E402
from .synth import to_uint8  # noqa: E402
from .tensor import nearest_indices  # noqa: E402


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """``H x W x 3`` uint8 blend of ``image`` with the JET colouring of ``heat`` (values in [0, 1])."""
    image = np.asarray(image, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if image.shape[:2] != heat.shape:
        raise ShapeError(f"map {heat.shape} does not match image {image.shape[:2]}")
    colours = matplotlib.colormaps["jet"](np.clip(heat, 0.0, 1.0))[..., :3]
    return to_uint8((1 - alpha) * image + alpha * colours)


def save_overlay(image: np.ndarray, heat: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray(overlay(image, heat), mode="RGB").save(path)
    return path


def _cell_box(winner, grid, size):
    r, c = winner
    rows = np.flatnonzero(nearest_indices(grid, size) == r)
    cols = np.flatnonzero(nearest_indices(grid, size) == c)
    return cols[0] - 0.5, rows[0] - 0.5, len(cols), len(rows)


def stage_panels(
    hierarchy: HierarchyResult,
    image: np.ndarray,
    size_index: int | None = None,
    trajectories: dict[int, dict[str, np.ndarray]] | None = None,
    path=None,
):
    """One column per stage of ``size_index`` (the benchmark size by default).

    ``trajectories`` maps a 1-based stage number to the arrays returned by
    :func:`hspi.spi.read_trajectory`.  Returns the figure, saving it when
    ``path`` is given.
    """
    if hierarchy.skipped:
        raise ConfigError(f"{hierarchy.name} was skipped (predicted normal); nothing to render")
    size = hierarchy.size(size_index or hierarchy.schedule.benchmark)
    stages = size.stages
    rows = 2 if trajectories else 1
    fig, axes = plt.subplots(rows, len(stages), figsize=(2.2 * len(stages), 2.3 * rows), squeeze=False)
    h = image.shape[0]
    for j, rec in enumerate(stages):
        ax = axes[0, j]
        ax.imshow(np.clip(stage_input(image, size.omega(j)), 0, 1))
        x0, y0, bw, bh = _cell_box(rec.winner, size.grid, h)
        ax.add_patch(plt.Rectangle((x0, y0), bw, bh, fill=False, edgecolor="yellow", linewidth=1.5))
        mark = "" if rec.eligible else " (fallback)"
        ax.set_title(f"stage {rec.stage}\nepoch {rec.cpf_epoch}{mark}", fontsize=7)
        ax.axis("off")
        if trajectories:
            tax = axes[1, j]
            tr = trajectories.get(rec.stage)
            if tr is not None:
                tax.plot(tr["epoch"], tr["L_s"], label="L_s", linewidth=0.8)
                tax.plot(tr["epoch"], tr["L_m"], label="L_m", linewidth=0.8)
                tax.plot(tr["epoch"], tr["D_n"], label="D_n", linewidth=0.8)
                tax.axvline(rec.cpf_epoch, color="k", linestyle=":", linewidth=0.6)
                tax.tick_params(labelsize=5)
                if j == 0:
                    tax.legend(fontsize=5)
            else:
                tax.axis("off")
    fig.suptitle(f"{hierarchy.name}: {size.grid}x{size.grid} grid", fontsize=8)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return fig
