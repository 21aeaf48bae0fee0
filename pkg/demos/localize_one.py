"""Walk through one localization with the library API.

Generates a small synthetic fundus dataset, trains the classifier, runs the
hierarchy on one diseased image and prints what each stage found and how the
multi-size vote filtered it.  Writes an overlay PNG to the current directory.

    python3 demos/localize_one.py            # ~2 min on one CPU core
"""

from pathlib import Path

import numpy as np

from hspi import classifier as C
from hspi import evaluation as ev
from hspi import hierarchy as H
from hspi import psmi, synth
from hspi.config import RunConfig
from hspi.render import save_overlay

cfg = RunConfig()  # desk preset: 64 px images, grids 4..8, six stages

# Data: half normal, half with one or more elliptic lesions inside the disc.
train = synth.generate(cfg.synth_config(cfg.n_train // 2, cfg.n_train // 2, seed=0), "train")
test = synth.generate(cfg.synth_config(cfg.n_test // 2, cfg.n_test // 2, seed=1), "test")
x_tr, y_tr, _ = synth.stack(train)
x_te, y_te, _ = synth.stack(test)

model = C.init_model(cfg.seed)
ckpt = C.train(model, x_tr, y_tr, cfg.train_config(), test=(x_te, y_te))
print(f"classifier test accuracy {ckpt.metadata['test_accuracy']:.3f}")

sample = next(s for s in test if s.label == synth.DISEASED)
res = H.run_hierarchy(model, sample.image, cfg.schedule(), cfg.cpf(), name=sample.name)

# Each size found its own sequence of patches; stage j always masks the
# winners of stages 1..j-1 first.
for s in res.sizes:
    cells = " ".join(f"{st.winner}{'' if st.eligible else '*'}" for st in s.stages)
    print(f"grid {s.grid}x{s.grid}: {cells}")
print("(* = no epoch met both CPF thresholds; the fallback epoch was used)")

loc = psmi.localize(res, cfg.psmi())
for j, (w, v, k) in enumerate(zip(loc.winners, loc.votes, loc.kept), start=1):
    print(f"benchmark stage {j} cell {w}: {v} of {cfg.n_sizes - 1} sizes agree -> {'kept' if k else 'dropped'}")

row = ev.evaluate_map(sample.name, "hspi", loc.saliency, sample.gt_mask)
print(f"F1 {row.f1:.3f}  PPV {row.ppv:.3f}  SP {row.sp:.3f}  ASD {row.asd:.2f}")

out = Path(f"{sample.name}_overlay.png")
save_overlay(sample.image, loc.saliency.astype(np.float64), out)
print(f"overlay written to {out}")
