"""Patch selection by multi-sized intersections.

Each stage winner is turned into a pixel footprint.  A patch found on the
benchmark grid is kept when patches from at least ``epsilon`` of the other
grid sizes overlap it; the union of kept patches is the final localization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .hierarchy import HierarchyResult
from .synth import write_mask
from .tensor import upsample_nearest


@dataclass
class PsmiConfig:
    epsilon: int = 3
    benchmark: int = 1  # 1-based size index

    def __post_init__(self):
        if self.epsilon < 0 or self.benchmark < 1:
            raise ConfigError("epsilon must be >= 0 and benchmark >= 1")

    def check(self, n_sizes: int) -> None:
        if self.benchmark > n_sizes:
            raise ConfigError(f"benchmark index {self.benchmark} outside 1..{n_sizes}")
        if self.epsilon > n_sizes - 1:
            raise ConfigError(f"epsilon {self.epsilon} exceeds the {n_sizes - 1} voting sizes")


def patch_indicator(local_mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Binary ``height x width`` map that is 1 on the blanked cell of ``local_mask``."""
    e = np.asarray(local_mask, dtype=np.uint8)
    return (1 - upsample_nearest(e, height, width)).astype(np.uint8)


def intersects(q1: np.ndarray, q2: np.ndarray) -> int:
    """1 if the two indicators share a positive pixel, else 0."""
    if np.shape(q1) != np.shape(q2):
        raise ShapeError(f"indicator shapes differ: {np.shape(q1)} vs {np.shape(q2)}")
    return int(np.max(np.asarray(q1) * np.asarray(q2)))


@dataclass
class Selection:
    votes: list[int]
    kept: list[bool]
    hits: list[dict[int, int]]  # per benchmark patch: size index -> 0/1
    saliency: np.ndarray  # binary H x W union of kept patches


def select_patches(
    benchmark: list[np.ndarray], others: dict[int, list[np.ndarray]], epsilon: int
) -> Selection:
    """Vote every benchmark indicator against the other sizes' indicators.

    ``others`` maps each non-benchmark size index to its list of
    indicators.  A size contributes at most one vote per benchmark patch.
    """
    if not benchmark:
        raise ShapeError("no benchmark patches")
    shape = np.shape(benchmark[0])
    # a patch meets some patch of size i exactly when it meets their union
    unions = {}
    for i, qs in others.items():
        if not qs:
            raise ShapeError(f"size {i} has no patches")
        if any(np.shape(q) != shape for q in qs):
            raise ShapeError(f"size {i} indicators do not match the benchmark shape {shape}")
        unions[i] = np.max(np.stack(qs), axis=0)
    votes, kept, hits = [], [], []
    saliency = np.zeros(shape, dtype=np.uint8)
    for q in benchmark:
        if np.shape(q) != shape:
            raise ShapeError("benchmark indicators differ in shape")
        h = {i: intersects(q, u) for i, u in unions.items()}
        v = sum(h.values())
        votes.append(v)
        hits.append(h)
        kept.append(v >= epsilon)
        if v >= epsilon:
            np.maximum(saliency, q, out=saliency)
    return Selection(votes, kept, hits, saliency)


@dataclass
class LocalizationResult:
    name: str
    saliency: np.ndarray  # binary H x W
    benchmark: int
    epsilon: int
    use_psmi: bool
    winners: list[tuple[int, int]] = field(default_factory=list)
    votes: list[int] = field(default_factory=list)
    kept: list[bool] = field(default_factory=list)
    hits: list[dict[int, int]] = field(default_factory=list)

    def ledger(self) -> dict:
        return {
            "image": self.name,
            "benchmark": self.benchmark,
            "epsilon": self.epsilon,
            "psmi": self.use_psmi,
            "patches": [
                {
                    "stage": j + 1,
                    "winner": list(self.winners[j]),
                    "vote": self.votes[j],
                    "kept": self.kept[j],
                    "hits": {str(i): v for i, v in self.hits[j].items()},
                }
                for j in range(len(self.winners))
            ],
        }

    def save(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        png = directory / f"{self.name}_S.png"
        ledger = directory / f"{self.name}_votes.json"
        write_mask(self.saliency, png)
        ledger.write_text(json.dumps(self.ledger(), indent=1))
        return png, ledger


def localize(
    hierarchy: HierarchyResult, config: PsmiConfig = PsmiConfig(), use_psmi: bool = True,
    stages: int | None = None,
) -> LocalizationResult:
    """Final localization map of one hierarchy.

    Without PSMI every benchmark patch is kept.  ``stages`` limits the
    selection to the first stages of each size (a shorter hierarchy is a
    prefix of a longer one).
    """
    if hierarchy.skipped:
        raise ConfigError(f"{hierarchy.name} was skipped (predicted normal); nothing to localize")
    config.check(hierarchy.schedule.n_sizes)
    h, w = hierarchy.image_size
    present = {s.index for s in hierarchy.sizes}
    if config.benchmark not in present:
        raise ConfigError(f"benchmark size {config.benchmark} was not run")
    if use_psmi and present != set(range(1, hierarchy.schedule.n_sizes + 1)):
        raise ConfigError(f"PSMI needs every size; only {sorted(present)} were run")

    def indicators(size):
        return [patch_indicator(e, h, w) for e in size.locals()[:stages]]

    bench = hierarchy.size(config.benchmark)
    others = {s.index: indicators(s) for s in hierarchy.sizes if s.index != config.benchmark}
    sel = select_patches(indicators(bench), others, config.epsilon if use_psmi else 0)
    return LocalizationResult(
        hierarchy.name, sel.saliency, config.benchmark, config.epsilon, use_psmi,
        [s.winner for s in bench.stages[:stages]], sel.votes, sel.kept, sel.hits,
    )
