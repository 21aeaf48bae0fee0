"""Command-line interface: ``hspi gen-data | train | localize | evaluate | render``.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 when a run
fails for any other reason.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import classifier as C
from . import evaluation as ev
from . import synth
from .config import PRESETS, RunConfig
from .errors import CheckpointError, ConfigError, HSPIError
from .hierarchy import HierarchyResult, run_hierarchies
from .psmi import localize as psmi_localize
from .render import save_overlay, stage_panels
from .spi import read_trajectory, write_trajectory

log = logging.getLogger("hspi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ConfigError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_preset(args.preset)
    if args.config and args.preset_given:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **PRESETS[args.preset], "preset": args.preset})
    overrides = {k: getattr(args, k, None) for k in ("seed", "epochs", "stages", "epsilon", "selection", "scores")}
    if getattr(args, "no_psmi", False):
        overrides["use_psmi"] = False
    if getattr(args, "lesion_radius", None):
        overrides["lesion_radius"] = tuple(args.lesion_radius)
    return cfg.with_overrides(**overrides)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split(directory: Path) -> list[synth.Sample]:
    if not (directory / "manifest.json").is_file():
        raise UsageError(f"{directory} is not a dataset directory (no manifest.json)")
    return synth.load_dataset(directory)


def _load_model(path) -> C.ClassifierModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return C.load(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out), args.force)
    n_train = args.n_train if args.n_train is not None else cfg.n_train
    n_test = args.n_test if args.n_test is not None else cfg.n_test
    for split, n, seed in (("train", n_train, cfg.seed), ("test", n_test, cfg.seed + 1)):
        scfg = cfg.synth_config(n // 2, n - n // 2, seed)
        samples = synth.generate(scfg, prefix=f"{split}_")
        synth.save_dataset(samples, out / split, scfg)
        print(f"{split}: {len(samples)} samples -> {out / split}")
    cfg.save(out / "config.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    train_set = _load_split(data / "train")
    x, y, _ = synth.stack(train_set)
    test = None
    if (data / "test" / "manifest.json").is_file():
        xt, yt, _ = synth.stack(synth.load_dataset(data / "test"))
        test = (xt, yt)
    model = C.init_model(cfg.seed, input_size=(cfg.image_size, cfg.image_size))
    ckpt = C.train(model, x, y, cfg.train_config(), test=test)
    C.save(ckpt, args.out)
    msg = f"train accuracy {ckpt.metadata['train_accuracy']:.4f}"
    if test is not None:
        msg += f", test accuracy {ckpt.metadata['test_accuracy']:.4f}"
    print(f"{msg} -> {args.out}")
    return EXIT_OK


def _localize_chunk(ckpt_path, images, names, cfg_dict, force, keep_reports):
    cfg = RunConfig.from_dict(cfg_dict)
    model = C.load(ckpt_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = run_hierarchies(model, images, cfg.schedule(), cfg.cpf(), names, force)
    if not keep_reports:
        for r in results:
            for s in r.sizes:
                s.reports = []
    return results, [str(w.message) for w in caught]


def cmd_localize(args) -> int:
    cfg = _config(args)
    if args.image:
        names = [Path(p).stem for p in args.image]
        images = np.stack([synth.read_image(p) for p in args.image])
    elif args.data:
        samples = _load_split(Path(args.data))
        if args.diseased_only:
            samples = [s for s in samples if s.label == synth.DISEASED]
        if args.limit:
            samples = samples[: args.limit]
        names = [s.name for s in samples]
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 1, 3))
    else:
        raise UsageError("give --image or --data")
    if len(images) and images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise UsageError(f"images are {images.shape[1]}x{images.shape[2]} but the config expects {cfg.image_size}")
    out = _prepare_out(Path(args.out), args.force_output)
    _load_model(args.checkpoint)
    cfg.save(out / "config.json")

    chunks = [(k, min(k + args.batch, len(images))) for k in range(0, len(images), args.batch)]
    jobs = max(1, min(args.jobs, len(chunks) or 1))
    work = [(args.checkpoint, images[a:b], names[a:b], cfg.to_dict(), args.force, args.trajectories)
            for a, b in chunks]
    if jobs == 1:
        outputs = [_localize_chunk(*w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_localize_chunk, *zip(*work)))

    n_maps = 0
    for results, messages in outputs:
        for m in messages:
            print(f"warning: {m}", file=sys.stderr)
        for res in results:
            res.save(out / f"{res.name}_hierarchy.json")
            if res.skipped:
                continue
            loc = psmi_localize(res, cfg.psmi(), cfg.use_psmi)
            loc.save(out)
            n_maps += 1
            if args.trajectories:
                for s in res.sizes:
                    for rec, rep in zip(s.stages, s.reports):
                        write_trajectory(rep, out / f"{res.name}_i{s.index}_j{rec.stage}.csv")
    print(f"{n_maps} localization maps, {len(images) - n_maps} skipped -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    samples = {s.name: s for s in _load_split(gt_dir)}
    preds = {p.name[: -len("_S.png")]: p for p in sorted(pred_dir.glob("*_S.png"))}
    if not preds:
        raise UsageError(f"no *_S.png prediction maps in {pred_dir}")
    unknown = sorted(set(preds) - set(samples))
    if unknown:
        raise UsageError(f"predictions without ground truth: {unknown[:5]}")
    if args.all_gt:
        missing = sorted(n for n, s in samples.items() if s.label == synth.DISEASED and n not in preds)
        if missing:
            raise UsageError(f"diseased ground-truth images without predictions: {missing[:5]}")
    names = sorted(preds)
    rows = [ev.evaluate_map(n, "hspi", synth.read_mask(preds[n]), samples[n].gt_mask) for n in names]
    extra = {}
    if args.baseline == "occlusion":
        if not args.checkpoint:
            raise UsageError("--baseline occlusion needs --checkpoint")
        model = _load_model(args.checkpoint)
        cfg = _config(args)
        grid = args.occlusion_grid or cfg.schedule().sizes()[cfg.benchmark - 1]
        maps = [ev.occlusion_baseline(model, samples[n].image, grid)[0] for n in names]
        gts = [samples[n].gt_mask for n in names]
        best, curve = ev.threshold_sweep(maps, gts)
        for n, s in zip(names, maps):
            row = ev.evaluate_map(n, "occlusion", ev.binarize(s, best), samples[n].gt_mask, saliency=s)
            rows.append(row)
        extra["occlusion"] = {"grid": grid, "threshold": best, "sweep_mean_f1": curve.tolist()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ev.write_report(rows, out / "report.csv", out / "summary.json", extra)
    print(json.dumps(summary["methods"], indent=1))
    return EXIT_OK


def cmd_render(args) -> int:
    res = HierarchyResult.load(args.hierarchy)
    if res.skipped:
        raise UsageError(f"{res.name} was skipped (predicted normal); nothing to render")
    image = synth.read_image(args.image)
    if image.shape[:2] != tuple(res.image_size):
        raise UsageError(f"image is {image.shape[:2]} but the hierarchy was run at {tuple(res.image_size)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s_png = Path(args.hierarchy).with_name(f"{res.name}_S.png")
    if args.map:
        s_png = Path(args.map)
    if s_png.is_file():
        heat = synth.read_mask(s_png).astype(np.float64)
    else:
        heat = np.zeros(image.shape[:2])
    save_overlay(image, heat, out / f"{res.name}_overlay.png")
    size = args.size or res.schedule.benchmark
    traj = {}
    tdir = Path(args.trajectories) if args.trajectories else Path(args.hierarchy).parent
    for rec in res.size(size).stages:
        f = tdir / f"{res.name}_i{size}_j{rec.stage}.csv"
        if f.is_file():
            traj[rec.stage] = read_trajectory(f)
    stage_panels(res, image, size, traj or None, out / f"{res.name}_stages.png")
    print(f"rendered {res.name} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default=None, help="parameter preset (default desk)")
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    hier = argparse.ArgumentParser(add_help=False)
    hier.add_argument("--epochs", type=int, help="mask-training epochs per stage")
    hier.add_argument("--stages", type=int, help="stages per grid size")
    hier.add_argument("--epsilon", type=int, help="PSMI vote threshold")
    hier.add_argument("--selection", choices=["cpf", "final"], help="snapshot selection rule")
    hier.add_argument("--scores", choices=["probabilities", "logits"], help="classifier scores compared by the loss")

    p = argparse.ArgumentParser(prog="hspi", description="Hierarchical salient patch identification")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic train/test dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--lesion-radius", type=float, nargs=2, metavar=("MIN", "MAX"), help="lesion radius range in pixels")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train the classifier")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    lo = sub.add_parser("localize", parents=[common, hier], help="run HSPI + PSMI")
    lo.add_argument("--checkpoint", required=True)
    lo.add_argument("--image", nargs="+", help="PNG image(s)")
    lo.add_argument("--data", help="dataset split directory (with manifest.json)")
    lo.add_argument("--diseased-only", action="store_true", help="only images labelled diseased")
    lo.add_argument("--limit", type=int, help="first N images of the split")
    lo.add_argument("--out", required=True)
    lo.add_argument("--force", action="store_true", help="localize images predicted normal too")
    lo.add_argument("--force-output", action="store_true", help="overwrite a non-empty output directory")
    lo.add_argument("--no-psmi", action="store_true", help="keep every benchmark patch")
    lo.add_argument("--trajectories", action="store_true", help="write per-stage loss CSVs")
    lo.add_argument("--jobs", type=int, default=1, help="worker processes")
    lo.add_argument("--batch", type=int, default=50, help="images per batch")
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("evaluate", parents=[common], help="score maps against ground truth")
    e.add_argument("--pred", required=True, help="directory of *_S.png maps")
    e.add_argument("--gt", required=True, help="dataset split directory")
    e.add_argument("--baseline", choices=["occlusion"])
    e.add_argument("--checkpoint")
    e.add_argument("--occlusion-grid", type=int, help="occlusion grid size (default: benchmark grid)")
    e.add_argument("--all-gt", action="store_true", help="require a prediction for every diseased image")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", parents=[common], help="draw overlay and stage panels")
    r.add_argument("--hierarchy", required=True, help="<name>_hierarchy.json")
    r.add_argument("--image", required=True)
    r.add_argument("--map", help="final map PNG (default: <name>_S.png next to the hierarchy)")
    r.add_argument("--trajectories", help="directory of trajectory CSVs")
    r.add_argument("--size", type=int, help="size index to draw (default: benchmark)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.preset_given = args.preset is not None
    args.preset = args.preset or "desk"
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HSPIError, OSError, ValueError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
