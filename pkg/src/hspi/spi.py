"""Salient patch identification for a single stage.

A coarse mask grid is optimised by projected gradient descent on the
consistency loss

    L_c = || f(X) - f(G_B(Omega * M) * X) ||^2  +  lam * mean(|M|)

where ``G_B`` is bilinear upsampling, ``Omega`` the rigid global mask of
cells already identified and ``f`` the classifier.  Conditional peak
focusing (CPF) then picks one snapshot of the trajectory: among checked
epochs where the similarity loss is below ``alpha`` and the mask loss below
``beta``, the one with the largest gap between the two highest mask
entries.  The winning cell of that snapshot becomes the stage's patch.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import classifier as C
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import apply_mask, bilinear_matrix, upsample_bilinear, upsample_bilinear_backward

log = logging.getLogger(__name__)


@dataclass
class CpfConfig:
    """Mask-training and CPF hyperparameters for one stage."""

    alpha: float = 5e-3
    beta: float = 0.08
    epochs: int = 2000
    learning_rate: float = 1e-2
    lam: float = 1.0
    init_value: float = 0.5
    check_every: int = 50
    selection: str = "cpf"  # "cpf" or "final" (ablation: always take the last epoch)
    softmax: bool = True  # compare class probabilities rather than raw logits

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.learning_rate <= 0:
            raise ConfigError("alpha, beta and learning_rate must be positive")
        if self.epochs < 1 or self.check_every < 1:
            raise ConfigError("epochs and check_every must be at least 1")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if not 0 <= self.init_value <= 1:
            raise ConfigError("init_value must lie in [0, 1]")
        if self.selection not in ("cpf", "final"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")

    def check_epochs(self) -> np.ndarray:
        ep = list(range(self.check_every, self.epochs + 1, self.check_every))
        if not ep or ep[-1] != self.epochs:
            ep.append(self.epochs)
        return np.array(ep, dtype=np.int64)


@dataclass
class CpfReport:
    """Trajectory of one mask training run and the CPF decision taken on it."""

    epochs: np.ndarray
    similarity: np.ndarray
    mask_loss: np.ndarray
    peak_gap: np.ndarray
    selected_epoch: int
    eligible: bool
    trained: np.ndarray  # mask grid snapshot at ``selected_epoch``
    failed: bool = False
    error: str = ""
    stage_class: int = -1  # classifier's prediction on the stage input

    @property
    def selected_index(self) -> int:
        return int(np.searchsorted(self.epochs, self.selected_epoch))

    def row(self, k: int | None = None) -> tuple[int, float, float, float]:
        k = self.selected_index if k is None else k
        return (int(self.epochs[k]), float(self.similarity[k]), float(self.mask_loss[k]), float(self.peak_gap[k]))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def similarity_loss(model: C.ClassifierModel, image: np.ndarray, mask_full: np.ndarray, softmax: bool = False) -> float:
    """Squared L2 distance between the scores of ``image`` and of the masked image."""
    image = np.asarray(image)
    ref = C.forward_logits(model, image, softmax).astype(np.float64)
    out = C.forward_logits(model, apply_mask(image, mask_full), softmax).astype(np.float64)
    value = float(np.sum((ref - out) ** 2))
    if not np.isfinite(value):
        raise NonFiniteError("similarity loss is not finite")
    return value


def mask_loss(grid: np.ndarray) -> float:
    """Mean absolute value of the mask entries."""
    return float(np.mean(np.abs(grid)))


def peak_gap(grid: np.ndarray, omega: np.ndarray | None = None) -> float:
    """Largest minus second-largest entry over active cells.

    The second value comes from a different cell, so equal entries give 0.
    With a single active cell the gap is the value itself.
    """
    vals = np.asarray(grid, dtype=np.float64).ravel()
    if omega is not None:
        vals = vals[np.asarray(omega).ravel() > 0]
    if vals.size == 0:
        raise ShapeError("no active cells")
    if vals.size == 1:
        return float(vals[0])
    top2 = np.partition(vals, vals.size - 2)[-2:]
    return float(top2[1] - top2[0])


def consistency_loss(
    model: C.ClassifierModel,
    stage_image: np.ndarray,
    omega: np.ndarray,
    grid: np.ndarray,
    lam: float = 1.0,
    softmax: bool = False,
) -> tuple[float, np.ndarray]:
    """Consistency loss and its gradient w.r.t. the mask grid (reference path, one image)."""
    omega = np.asarray(omega, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if omega.shape != grid.shape or grid.ndim != 2:
        raise ShapeError(f"omega {omega.shape} and mask {grid.shape} must be equal 2-D grids")
    h, w = stage_image.shape[:2]
    full = upsample_bilinear(omega * grid, h, w)
    masked = apply_mask(stage_image.astype(np.float64), full)
    ref = C.forward_logits(model, stage_image, softmax).astype(np.float64)
    diff = {}

    def upstream(z):
        diff["d"] = z.astype(np.float64) - ref
        return 2.0 * diff["d"]

    _, gimg = C.value_and_input_gradient(model, masked, upstream, softmax)
    ls = float(np.sum(diff["d"] ** 2))
    if not np.isfinite(ls):
        raise NonFiniteError("similarity loss is not finite")
    gfull = np.sum(gimg.astype(np.float64) * stage_image, axis=-1)
    ggrid = omega * upsample_bilinear_backward(grid.shape, h, w, gfull)
    ggrid += lam * np.sign(grid) / grid.size
    return ls + lam * mask_loss(grid), ggrid


# --------------------------------------------------------------------------
# CPF selection
# --------------------------------------------------------------------------


def cpf_select(
    similarity, mask_losses, gaps, alpha: float, beta: float, lam: float = 1.0
) -> tuple[int, bool]:
    """Offline CPF decision over a full recorded trajectory.

    Returns ``(index, eligible)``.  ``index`` maximises the peak gap over the
    checked epochs with ``L_s < alpha`` and ``L_m < beta`` (earliest on ties).
    If no epoch qualifies, the epoch minimising ``L_s + lam * L_m`` is taken
    and ``eligible`` is False.
    """
    ls = np.asarray(similarity, dtype=np.float64)
    lm = np.asarray(mask_losses, dtype=np.float64)
    d = np.asarray(gaps, dtype=np.float64)
    ok = (ls < alpha) & (lm < beta)
    if ok.any():
        return int(np.argmax(np.where(ok, d, -np.inf))), True
    return int(np.argmin(ls + lam * lm)), False


class _Group:
    """Lock-step state of all masks sharing one grid shape.

    Besides the grids it carries the online CPF decision for each mask: the
    best eligible snapshot so far and the fallback (lowest ``L_s + lam L_m``)
    snapshot.  Strict comparisons keep the earliest epoch on ties, which is
    what the offline :func:`cpf_select` scan does as well.
    """

    def __init__(self, members, omegas, cfg: CpfConfig, n_checks: int, height: int, width: int):
        self.members = np.asarray(members, dtype=np.intp)
        self.omega = np.stack([omegas[k] for k in members])
        n, rows, cols = self.omega.shape
        self.ah = bilinear_matrix(rows, height)
        self.aw = bilinear_matrix(cols, width)
        # float32 copies build the masked images, float64 ones carry the gradient
        self.ah32 = self.ah.astype(np.float32)
        self.aw32_t = self.aw.T.astype(np.float32)
        self.grid = np.full(self.omega.shape, cfg.init_value, dtype=np.float64)
        self.active = np.ones(n, dtype=bool)
        flat_on = self.omega.reshape(n, -1) > 0
        self.on = flat_on
        self.single = flat_on.sum(axis=1) == 1
        self.best_gap = np.full(n, -np.inf)
        self.best_epoch = np.full(n, -1, dtype=np.int64)
        self.best_grid = np.full(self.grid.shape, np.nan)
        self.fb_loss = np.full(n, np.inf)
        self.fb_epoch = np.full(n, -1, dtype=np.int64)
        self.fb_grid = np.full(self.grid.shape, np.nan)
        self.ls = np.full((n, n_checks), np.nan)
        self.lm = np.full((n, n_checks), np.nan)
        self.gap = np.full((n, n_checks), np.nan)
        self.cfg = cfg

    def stats(self, sel):
        """``(L_m, D_n)`` of the selected masks."""
        g = self.grid[sel]
        n = len(g)
        lm = np.abs(g).reshape(n, -1).mean(axis=1)
        vals = np.where(self.on[sel], g.reshape(n, -1), -np.inf)
        if vals.shape[1] == 1:
            return lm, vals[:, 0]
        top2 = np.partition(vals, vals.shape[1] - 2, axis=1)[:, -2:]
        gap = np.where(self.single[sel], top2[:, 1], top2[:, 1] - top2[:, 0])
        return lm, gap

    def record(self, sel, check_idx: int, epoch: int, ls):
        cfg = self.cfg
        lm, gap = self.stats(sel)
        self.ls[sel, check_idx] = ls
        self.lm[sel, check_idx] = lm
        self.gap[sel, check_idx] = gap
        rows = np.flatnonzero(sel) if sel.dtype == bool else np.asarray(sel)
        better = (ls < cfg.alpha) & (lm < cfg.beta) & (gap > self.best_gap[rows])
        up = rows[better]
        self.best_gap[up] = gap[better]
        self.best_epoch[up] = epoch
        self.best_grid[up] = self.grid[up]
        total = ls + cfg.lam * lm
        lower = total < self.fb_loss[rows]
        up = rows[lower]
        self.fb_loss[up] = total[lower]
        self.fb_epoch[up] = epoch
        self.fb_grid[up] = self.grid[up]


def train_masks(
    model: C.ClassifierModel,
    stage_images: np.ndarray,
    omegas: list[np.ndarray],
    cfg: CpfConfig = CpfConfig(),
    backend: str | None = None,
) -> list[CpfReport]:
    """Train one mask grid per (stage image, omega) pair, all in lock-step.

    Items are independent; batching only amortises the classifier passes.
    Grids may have different sizes.  A mask whose update leaves it exactly
    unchanged has reached a fixed point of projected gradient descent, so its
    remaining trajectory is filled in without further classifier calls.
    """
    x = np.asarray(stage_images, dtype=np.float32)
    if x.ndim != 4 or len(omegas) != len(x):
        raise ShapeError(f"{len(omegas)} omegas for image batch of shape {x.shape}")
    b, h, w, _ = x.shape
    omegas = [np.asarray(o, dtype=np.float64) for o in omegas]
    for o in omegas:
        if o.ndim != 2 or not (o > 0).any():
            raise ShapeError("each omega must be a 2-D grid with at least one active cell")

    ref_scores = C.forward_logits(model, x, cfg.softmax, backend).astype(np.float64)
    if not np.isfinite(ref_scores).all():
        raise NonFiniteError("classifier scores of the stage input are not finite")
    stage_class = np.argmax(ref_scores, axis=1)

    checks = cfg.check_epochs()
    n_checks = len(checks)
    by_shape: dict[tuple[int, int], list[int]] = {}
    for k, o in enumerate(omegas):
        by_shape.setdefault(o.shape, []).append(k)
    groups = [_Group(m, omegas, cfg, n_checks, h, w) for m in by_shape.values()]
    failed = [""] * b
    # images in group order, so a batch where every mask is still training needs no gather
    order = np.concatenate([g.members for g in groups])
    pos_of = np.empty(b, dtype=np.intp)
    pos_of[order] = np.arange(b)
    xg, refg = x[order], ref_scores[order]

    buf = np.empty_like(x)
    check_pos = 0
    for epoch in range(cfg.epochs + 1):
        live = [(g, np.flatnonzero(g.active)) for g in groups]
        live = [(g, a) for g, a in live if a.size]
        if not live:
            break
        idx = np.concatenate([g.members[a] for g, a in live])
        everyone = idx.size == b
        record = check_pos < n_checks and epoch == checks[check_pos]
        need_grad = epoch < cfg.epochs

        full = np.concatenate([g.ah32 @ (g.omega[a] * g.grid[a]).astype(np.float32) @ g.aw32_t for g, a in live])
        xs = xg if everyone else xg[pos_of[idx]]
        masked = np.multiply(xs, full[..., None], out=buf[: idx.size])
        ref = refg if everyone else refg[pos_of[idx]]
        diff = {}

        def upstream(z):
            diff["d"] = z.astype(np.float64) - ref
            return 2.0 * diff["d"]

        try:
            if need_grad:
                _, gimg = C.value_and_input_gradient(model, masked, upstream, cfg.softmax, backend)
            else:
                upstream(C.forward_logits(model, masked, cfg.softmax, backend))
        except NonFiniteError as exc:
            for g, a in live:
                for k in g.members[a]:
                    failed[k] = str(exc)
                g.active[a] = False
            break
        ls = np.sum(diff["d"] ** 2, axis=1)
        ok = np.isfinite(ls)

        if need_grad:
            gfull = np.einsum("nhwc,nhwc->nhw", gimg, xs)
        start = 0
        for g, a in live:
            stop = start + a.size
            ls_g, ok_g = ls[start:stop], ok[start:stop]
            for k in g.members[a[~ok_g]]:
                failed[k] = f"non-finite similarity loss at epoch {epoch}"
            g.active[a[~ok_g]] = False
            a_ok = a[ok_g]
            if record:
                g.record(a_ok, check_pos, epoch, ls_g[ok_g])
            if need_grad and a_ok.size:
                grad = g.ah.T @ gfull[start:stop][ok_g] @ g.aw
                cur = g.grid[a_ok]
                grad = g.omega[a_ok] * grad + cfg.lam * np.sign(cur) / cur[0].size
                new = np.clip(cur - cfg.learning_rate * grad, 0.0, 1.0)
                same = np.all(new == cur, axis=(1, 2))
                if same.any():
                    # fixed point: every later checked epoch sees this same mask and loss
                    fixed = a_ok[same]
                    for c in range(check_pos + record, n_checks):
                        g.record(fixed, c, int(checks[c]), ls_g[ok_g][same])
                    g.active[fixed] = False
                g.grid[a_ok] = new
            start = stop
        check_pos += record
        if not need_grad:
            break

    reports: list[CpfReport | None] = [None] * b
    last = n_checks - 1
    for g in groups:
        for r, k in enumerate(g.members):
            args = (checks, g.ls[r], g.lm[r], g.gap[r])
            if failed[k] or g.fb_epoch[r] < 0:
                reports[k] = CpfReport(*args, -1, False, g.grid[r].copy(), True,
                                       failed[k] or "no epoch recorded", int(stage_class[k]))
                continue
            if cfg.selection == "final":
                sel_epoch, snapshot = int(checks[last]), g.grid[r].copy()
                eligible = bool(g.ls[r, last] < cfg.alpha and g.lm[r, last] < cfg.beta)
            elif g.best_epoch[r] >= 0:
                sel_epoch, eligible, snapshot = int(g.best_epoch[r]), True, g.best_grid[r].copy()
            else:
                sel_epoch, eligible, snapshot = int(g.fb_epoch[r]), False, g.fb_grid[r].copy()
            reports[k] = CpfReport(*args, sel_epoch, eligible, snapshot, False, "", int(stage_class[k]))
    return reports


def train_mask(
    model: C.ClassifierModel,
    stage_image: np.ndarray,
    omega: np.ndarray,
    cfg: CpfConfig = CpfConfig(),
    backend: str | None = None,
) -> CpfReport:
    """Single-image convenience wrapper around :func:`train_masks`."""
    return train_masks(model, np.asarray(stage_image)[None], [omega], cfg, backend)[0]


# --------------------------------------------------------------------------
# winner extraction
# --------------------------------------------------------------------------


def argmax_position(trained: np.ndarray, omega: np.ndarray | None = None) -> tuple[int, int]:
    """Row-major first position of the maximum over active cells (0-based)."""
    trained = np.asarray(trained, dtype=np.float64)
    if omega is None:
        omega = np.ones_like(trained)
    omega = np.asarray(omega)
    if omega.shape != trained.shape:
        raise ShapeError(f"omega {omega.shape} vs grid {trained.shape}")
    if not (omega > 0).any():
        raise ShapeError("argmax over a grid without active cells")
    flat = np.where(omega > 0, trained, -np.inf).ravel()
    r, c = divmod(int(np.argmax(flat)), trained.shape[1])
    return r, c


def one_hot_invert(winner: tuple[int, int], rows: int, cols: int) -> np.ndarray:
    """Rigid local mask: all ones except a single zero at ``winner``."""
    r, c = winner
    if not (0 <= r < rows and 0 <= c < cols):
        raise ShapeError(f"winner {winner} outside a {rows}x{cols} grid")
    e = np.ones((rows, cols), dtype=np.uint8)
    e[r, c] = 0
    return e


# --------------------------------------------------------------------------
# trajectory dump
# --------------------------------------------------------------------------


def write_trajectory(report: CpfReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "L_s", "L_m", "D_n"])
        for k in range(len(report.epochs)):
            wr.writerow([int(report.epochs[k]), repr(float(report.similarity[k])),
                         repr(float(report.mask_loss[k])), repr(float(report.peak_gap[k]))])


def read_trajectory(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "epoch": np.array([int(r["epoch"]) for r in rows]),
        "L_s": np.array([float(r["L_s"]) for r in rows]),
        "L_m": np.array([float(r["L_m"]) for r in rows]),
        "D_n": np.array([float(r["D_n"]) for r in rows]),
    }
