"""Localization metrics, threshold sweeps and an occlusion baseline.

Binary maps are compared pixelwise with the ground truth (F1, PPV, SP), by
boundary distance (ASD, from predicted boundary to ground-truth boundary
only) and, for saliency maps, by the share of saliency mass falling on the
ground-truth foreground.  Degenerate cases return defined values together
with a flag naming what happened.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import classifier as C
from .errors import ConfigError, ShapeError
from .tensor import upsample_nearest

THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{what} must be a 2-D map, got shape {a.shape}")
    return a.astype(bool)


def _pair(pred, gt):
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def binarize(saliency: np.ndarray, threshold: float) -> np.ndarray:
    """1 where ``saliency >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1]")
    return (np.asarray(saliency) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


@dataclass
class Scores:
    f1: float
    ppv: float
    sp: float
    flags: set[str] = field(default_factory=set)


def metrics(counts: ConfusionCounts) -> Scores:
    """F1, PPV and SP with pessimistic/neutral values for empty denominators."""
    flags = set()
    c = counts
    if c.fp + 2 * c.tp + c.fn == 0:
        f1 = 0.0
        flags.add("f1_undefined")
    else:
        f1 = 2 * c.tp / (c.fp + 2 * c.tp + c.fn)
    if c.tp + c.fp == 0:
        ppv = 0.0
        flags.add("empty_pred")
    else:
        ppv = c.tp / (c.tp + c.fp)
    if c.tn + c.fp == 0:
        sp = 1.0
        flags.add("no_negatives")
    else:
        sp = c.tn / (c.tn + c.fp)
    return Scores(f1, ppv, sp, flags)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Positive pixels with at least one non-positive 4-neighbour; outside the image counts as non-positive."""
    m = _binary(mask, "mask")
    pad = np.pad(m, 1)
    inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~inner


def asd(pred: np.ndarray, gt: np.ndarray) -> tuple[float, set[str]]:
    """Mean distance from each predicted boundary pixel to the nearest ground-truth boundary pixel.

    An empty prediction scores the image diagonal; an empty ground truth
    gives NaN.  Both are flagged.
    """
    p, g = _pair(pred, gt)
    pb, gb = boundary(p), boundary(g)
    if not gb.any():
        return float("nan"), {"empty_gt"}
    if not pb.any():
        return float(np.hypot(*p.shape)), {"empty_pred"}
    dist = distance_transform_edt(~gb)
    return float(dist[pb].mean()), set()


def proportion(saliency: np.ndarray, gt: np.ndarray) -> tuple[float, set[str]]:
    """Share of the total saliency mass lying on the ground-truth foreground."""
    s = np.asarray(saliency, dtype=np.float64)
    g = _binary(gt, "ground truth")
    if s.shape != g.shape:
        raise ShapeError(f"saliency {s.shape} and ground truth {g.shape} differ in shape")
    total = s.sum()
    if total <= 0:
        return 0.0, {"zero_mass"}
    return float(s[g].sum() / total), set()


def threshold_sweep(maps, gts, thresholds=THRESHOLDS) -> tuple[float, np.ndarray]:
    """Threshold with the best mean F1 over a set of saliency maps (lowest on ties).

    Returns ``(best_threshold, mean_f1_per_threshold)``.
    """
    maps, gts = list(maps), list(gts)
    if not maps or len(maps) != len(gts):
        raise ShapeError(f"need matching non-empty map and mask lists ({len(maps)} vs {len(gts)})")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    means = np.zeros(len(thresholds))
    for k, t in enumerate(thresholds):
        means[k] = np.mean([metrics(confusion(binarize(s, t), g)).f1 for s, g in zip(maps, gts)])
    best = int(np.argmax(means))  # first maximum = lowest threshold
    return float(thresholds[best]), means


def occlusion_baseline(
    model: C.ClassifierModel, image: np.ndarray, grid: int | tuple[int, int], backend: str | None = None
) -> tuple[np.ndarray, set[str]]:
    """Per-cell drop of the predicted-class logit when that cell is zeroed, min-max normalised.

    Returns ``(saliency, flags)``; a map with no spread is all zeros and flagged.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {image.shape}")
    rows, cols = (grid, grid) if np.isscalar(grid) else grid
    h, w = image.shape[:2]
    cell = upsample_nearest(np.arange(rows * cols).reshape(rows, cols), h, w)
    base = C.forward_logits(model, image, backend=backend)
    c = int(np.argmax(base))
    occluded = np.stack([image * (cell != k)[..., None] for k in range(rows * cols)])
    z = C.forward_logits(model, occluded, backend=backend)[:, c]
    drop = (float(base[c]) - z.astype(np.float64)).reshape(rows, cols)
    lo, hi = drop.min(), drop.max()
    if not hi > lo:
        return np.zeros((h, w)), {"constant"}
    return ((drop - lo) / (hi - lo))[cell // cols, cell % cols], set()


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

COLUMNS = ["image", "method", "F1", "PPV", "SP", "ASD", "Proportion", "flags"]


@dataclass
class EvalRow:
    image: str
    method: str
    f1: float
    ppv: float
    sp: float
    asd: float
    proportion: float
    flags: set[str] = field(default_factory=set)

    def as_list(self) -> list:
        return [self.image, self.method, self.f1, self.ppv, self.sp, self.asd, self.proportion,
                ";".join(sorted(self.flags))]


def evaluate_map(name: str, method: str, pred: np.ndarray, gt: np.ndarray, saliency=None) -> EvalRow:
    """All metrics for one binary prediction; ``saliency`` (default: the prediction) feeds Proportion."""
    sc = metrics(confusion(pred, gt))
    dist, f_asd = asd(pred, gt)
    prop, f_prop = proportion(pred if saliency is None else saliency, gt)
    return EvalRow(name, method, sc.f1, sc.ppv, sc.sp, dist, prop, sc.flags | f_asd | f_prop)


def summarize(rows: list[EvalRow]) -> dict:
    out = {}
    for method in dict.fromkeys(r.method for r in rows):
        sel = [r for r in rows if r.method == method]
        out[method] = {
            "n": len(sel),
            "F1": float(np.mean([r.f1 for r in sel])),
            "PPV": float(np.mean([r.ppv for r in sel])),
            "SP": float(np.mean([r.sp for r in sel])),
            "ASD": float(np.nanmean([r.asd for r in sel])) if any(np.isfinite(r.asd) for r in sel) else None,
            "Proportion": float(np.mean([r.proportion for r in sel])),
            "flagged": sum(bool(r.flags) for r in sel),
        }
    return out


def write_report(rows: list[EvalRow], csv_path, json_path=None, extra: dict | None = None) -> dict:
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(COLUMNS)
        for r in rows:
            wr.writerow(r.as_list())
    summary = {"methods": summarize(rows), **(extra or {})}
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summary, indent=1))
    return summary
