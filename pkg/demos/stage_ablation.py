"""Mean F1 against the number of stages, with and without the size vote.

Reads a directory produced by ``hspi localize`` (hierarchy JSONs) and the
matching ground-truth split, then re-derives the maps for shorter
hierarchies.  A J-stage hierarchy is the first J stages of a longer one, so
no mask is retrained.

    hspi localize --checkpoint model.ckpt --data data/test --diseased-only --out run
    python3 demos/stage_ablation.py run data/test
"""

import sys
from pathlib import Path

import numpy as np

from hspi import evaluation as ev
from hspi import psmi, synth
from hspi.config import RunConfig
from hspi.hierarchy import HierarchyResult

run, gt_dir = Path(sys.argv[1]), Path(sys.argv[2])
samples = {s.name: s for s in synth.load_dataset(gt_dir)}
results = [HierarchyResult.load(p) for p in sorted(run.glob("*_hierarchy.json"))]
results = [r for r in results if not r.skipped]
cfg = RunConfig().psmi()
stages = results[0].schedule.stages

print("J   F1 (vote)  PPV (vote)  F1 (all)  PPV (all)")
for j in range(1, stages + 1):
    cols = []
    for use in (True, False):
        rows = [ev.evaluate_map(r.name, "hspi", psmi.localize(r, cfg, use, stages=j).saliency,
                                samples[r.name].gt_mask) for r in results]
        cols += [np.mean([x.f1 for x in rows]), np.mean([x.ppv for x in rows])]
    print(f"{j:<3} {cols[0]:9.3f}  {cols[1]:10.3f}  {cols[2]:8.3f}  {cols[3]:9.3f}")
