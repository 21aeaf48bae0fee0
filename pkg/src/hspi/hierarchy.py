"""Hierarchical salient patch identification.

For every grid size the driver runs ``J`` stages.  Stage ``j`` blanks out
(nearest-neighbour upsampled) every cell found so far, trains a fresh mask on
what is left and adds the winning cell of that mask to the blanked set.  All
sizes, and all images of a batch, advance through the stages together so the
classifier passes can be batched.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as C
from .errors import ConfigError, ShapeError
from .spi import CpfConfig, CpfReport, argmax_position, one_hot_invert, train_masks
from .tensor import apply_mask, upsample_nearest

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class SizeSchedule:
    """Grid sizes, stage count and benchmark size of a hierarchy.

    Grid ``i`` (1-based) is ``(grid_offset + i) x (grid_offset + i)`` unless
    ``grid_sizes`` lists the sizes explicitly.
    """

    image_size: int = 64
    n_sizes: int = 5
    stages: int = 6
    benchmark: int = 1
    grid_offset: int = 3
    grid_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.grid_sizes is not None:
            self.grid_sizes = tuple(int(g) for g in self.grid_sizes)
            if len(self.grid_sizes) != self.n_sizes:
                raise ConfigError(f"{len(self.grid_sizes)} grid sizes given for n_sizes={self.n_sizes}")
        if self.n_sizes < 1 or self.stages < 1:
            raise ConfigError("n_sizes and stages must be at least 1")
        if not 1 <= self.benchmark <= self.n_sizes:
            raise ConfigError(f"benchmark index {self.benchmark} outside 1..{self.n_sizes}")
        sizes = self.sizes()
        if min(sizes) < 1 or max(sizes) > self.image_size:
            raise ConfigError(f"grid sizes {sizes} must lie in 1..{self.image_size}")
        if any(g * g < self.stages for g in sizes):
            raise ConfigError(f"a {min(sizes)}x{min(sizes)} grid cannot host {self.stages} distinct stages")

    def sizes(self) -> list[int]:
        if self.grid_sizes is not None:
            return list(self.grid_sizes)
        return [self.grid_offset + i for i in range(1, self.n_sizes + 1)]

    @classmethod
    def paper(cls) -> "SizeSchedule":
        return cls(image_size=224, n_sizes=10, stages=15, benchmark=1, grid_offset=6)

    @classmethod
    def desk(cls) -> "SizeSchedule":
        return cls(image_size=64, n_sizes=5, stages=6, benchmark=1, grid_offset=3)


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


def compose_global_mask(locals_: list[np.ndarray], j: int | None = None) -> np.ndarray:
    """Elementwise product of the first ``j`` rigid local masks (all of them by default).

    With no masks (or ``j == 0``) the result would be all ones, but the grid
    size is then unknown, so at least one mask must be passed.
    """
    if not locals_:
        raise ShapeError("need at least one local mask to know the grid size")
    shape = np.shape(locals_[0])
    if any(np.shape(e) != shape for e in locals_):
        raise ShapeError("local masks differ in size")
    j = len(locals_) if j is None else j
    if not 0 <= j <= len(locals_):
        raise ShapeError(f"stage {j} outside 0..{len(locals_)}")
    omega = np.ones(shape, dtype=np.uint8)
    for e in locals_[:j]:
        omega = omega * np.asarray(e, dtype=np.uint8)
    return omega


def stage_input(image: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """The image with every blanked cell of ``omega`` zeroed (nearest-neighbour footprint)."""
    image = np.asarray(image)
    h, w = image.shape[-3], image.shape[-2]
    full = upsample_nearest(np.asarray(omega), h, w).astype(image.dtype)
    return apply_mask(image, full)


def _brightest_cell(image: np.ndarray, omega: np.ndarray) -> tuple[int, int]:
    """Active cell with the largest mean pixel intensity (stage-failure fallback)."""
    rows, cols = omega.shape
    h, w = image.shape[:2]
    cell = upsample_nearest(np.arange(rows * cols).reshape(rows, cols), h, w).ravel()
    intensity = image.mean(axis=-1).ravel().astype(np.float64)
    sums = np.bincount(cell, weights=intensity, minlength=rows * cols)
    counts = np.bincount(cell, minlength=rows * cols)
    means = (sums / np.maximum(counts, 1)).reshape(rows, cols)
    return argmax_position(means, omega)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------


@dataclass
class StageRecord:
    stage: int  # 1-based
    winner: tuple[int, int]  # 0-based (row, col)
    cpf_epoch: int
    eligible: bool
    similarity: float
    mask_loss: float
    peak_gap: float
    stage_class: int
    failed: bool = False
    error: str = ""


@dataclass
class SizeResult:
    index: int  # 1-based size index
    grid: int
    stages: list[StageRecord] = field(default_factory=list)
    reports: list[CpfReport] = field(default_factory=list, repr=False)

    def locals(self) -> list[np.ndarray]:
        return [one_hot_invert(s.winner, self.grid, self.grid) for s in self.stages]

    def omega(self, j: int | None = None) -> np.ndarray:
        """Rigid global mask after stage ``j`` (after the last stage by default)."""
        if j == 0:
            return np.ones((self.grid, self.grid), dtype=np.uint8)
        return compose_global_mask(self.locals(), j)


@dataclass
class HierarchyResult:
    name: str
    predicted_class: int
    skipped: bool
    image_size: tuple[int, int]
    schedule: SizeSchedule
    sizes: list[SizeResult] = field(default_factory=list)

    def size(self, index: int) -> SizeResult:
        for s in self.sizes:
            if s.index == index:
                return s
        raise KeyError(f"no size index {index}")

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "image": self.name,
            "predicted_class": self.predicted_class,
            "skipped": self.skipped,
            "image_size": list(self.image_size),
            "schedule": asdict(self.schedule),
            "sizes": [
                {
                    "index": s.index,
                    "grid": [s.grid, s.grid],
                    "stages": [{**asdict(r), "winner": list(r.winner)} for r in s.stages],
                }
                for s in self.sizes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyResult":
        if d.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported hierarchy format version {d.get('version')!r}")
        sizes = []
        for s in d["sizes"]:
            stages = [StageRecord(**{**r, "winner": tuple(r["winner"])}) for r in s["stages"]]
            sizes.append(SizeResult(s["index"], s["grid"][0], stages))
        return cls(d["image"], d["predicted_class"], d["skipped"], tuple(d["image_size"]),
                   SizeSchedule(**d["schedule"]), sizes)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "HierarchyResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def run_hierarchies(
    model: C.ClassifierModel,
    images: np.ndarray,
    schedule: SizeSchedule,
    cpf: CpfConfig = CpfConfig(),
    names: list[str] | None = None,
    force: bool = False,
    sizes: list[int] | None = None,
    backend: str | None = None,
) -> list[HierarchyResult]:
    """Run the full hierarchy on a batch of images.

    Images the classifier calls normal are skipped with a warning unless
    ``force`` is set.  ``sizes`` restricts the run to some size indices
    (1-based); by default all are run.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected N x H x W x 3 images, got {images.shape}")
    n, h, w, _ = images.shape
    if (h, w) != (schedule.image_size, schedule.image_size):
        raise ShapeError(f"images are {h}x{w} but the schedule expects {schedule.image_size}")
    names = names or [f"img{k:04d}" for k in range(n)]
    grid_of = dict(enumerate(schedule.sizes(), start=1))
    sizes = list(grid_of) if sizes is None else list(sizes)
    if any(i not in grid_of for i in sizes):
        raise ConfigError(f"size indices {sizes} outside 1..{schedule.n_sizes}")

    predicted = C.predict(model, images, backend=backend)
    results = []
    items = []  # (result index, size result)
    for k in range(n):
        cls_ = int(predicted[k])
        skip = cls_ != C.DISEASED and not force
        if cls_ != C.DISEASED:
            action = "localizing anyway" if force else "skipping localization"
            warnings.warn(f"{names[k]}: classifier predicts normal; {action}", stacklevel=2)
        res = HierarchyResult(names[k], cls_, skip, (h, w), schedule)
        if not skip:
            for i in sizes:
                sr = SizeResult(i, grid_of[i])
                res.sizes.append(sr)
                items.append((k, sr))
        results.append(res)
    if not items:
        return results

    omegas = [np.ones((sr.grid, sr.grid), dtype=np.uint8) for _, sr in items]
    for j in range(1, schedule.stages + 1):
        stage_x = np.stack([stage_input(images[k], om) for (k, _), om in zip(items, omegas)])
        reports = train_masks(model, stage_x, omegas, cpf, backend)
        for t, ((k, sr), om, rep) in enumerate(zip(items, omegas, reports)):
            if rep.failed:
                winner = _brightest_cell(images[k], om)
                log.warning("%s size %d stage %d failed (%s); using brightest cell",
                            names[k], sr.index, j, rep.error)
                row = (int(rep.epochs[-1]), float("nan"), float("nan"), float("nan"))
            else:
                winner = argmax_position(rep.trained, om)
                row = rep.row()
            sr.stages.append(
                StageRecord(j, winner, row[0] if not rep.failed else -1, rep.eligible,
                            row[1], row[2], row[3], rep.stage_class, rep.failed, rep.error)
            )
            sr.reports.append(rep)
            omegas[t] = om * one_hot_invert(winner, sr.grid, sr.grid)
        log.info("stage %d/%d done for %d masks", j, schedule.stages, len(items))
    return results


def run_hierarchy(
    model: C.ClassifierModel,
    image: np.ndarray,
    schedule: SizeSchedule,
    cpf: CpfConfig = CpfConfig(),
    name: str = "image",
    force: bool = False,
    backend: str | None = None,
) -> HierarchyResult:
    """Single-image form of :func:`run_hierarchies`."""
    return run_hierarchies(model, np.asarray(image)[None], schedule, cpf, [name], force,
                           backend=backend)[0]
