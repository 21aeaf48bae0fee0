import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from hspi import synth
from hspi.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from hspi.hierarchy import HierarchyResult
from hspi.render import stage_panels

FAST = ["--epochs", "40", "--stages", "2"]


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _small_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_train": 8, "n_test": 4, "train_epochs": 2, **kw}))
    return str(path)


def test_gen_data_default_file_counts(desk_run):
    data = desk_run["data"]
    for split, n in (("train", 500), ("test", 100)):
        files = list((data / split).glob("*.png"))
        assert len(files) == 2 * n  # image + mask per sample
        labels = [e["label"] for e in json.loads((data / split / "manifest.json").read_text())["samples"]]
        assert labels.count("diseased") == n // 2
    assert json.loads((data / "config.json").read_text())["preset"] == "desk"


def test_gen_data_is_deterministic_and_guards_output(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a"), "--force"]) == EXIT_OK
    assert _digest(tmp_path / "a") != _digest(tmp_path / "b")


def test_gen_data_rejects_bad_lesion_radius(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "d"), "--lesion-radius", "30", "40"])
    assert code == EXIT_CONFIG and "lesion radius" in capsys.readouterr().err


def test_train_is_reproducible(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
    for name in ("a.ckpt", "b.ckpt"):
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ckpt")]) == EXIT_CONFIG


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text('{"epsilon": 9}')
    assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_corrupt_checkpoint_exit_code(tmp_path, desk_run):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"HSPC" + b"\0" * 10)
    img = desk_run["data"] / "test" / "test_0099.png"
    assert main(["localize", "--checkpoint", str(bad), "--image", str(img), "--out", str(tmp_path / "o")]) == 2


# --------------------------------------------------------------------------
# localize / evaluate / render
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def localized(desk_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("loc")
    test = desk_run["data"] / "test"
    args = ["localize", "--checkpoint", str(desk_run["checkpoint"]), *FAST, "--trajectories",
            "--image", str(test / "test_0000.png"), str(test / "test_0098.png"), str(test / "test_0099.png"),
            "--out", str(out / "run")]
    assert main(args) == EXIT_OK
    return out / "run"


def test_localize_artifacts(localized):
    # test_0000 is normal, test_0098/99 diseased
    assert (localized / "test_0000_hierarchy.json").is_file()
    assert not (localized / "test_0000_S.png").exists()
    assert HierarchyResult.load(localized / "test_0000_hierarchy.json").skipped
    for name in ("test_0098", "test_0099"):
        res = HierarchyResult.load(localized / f"{name}_hierarchy.json")
        assert not res.skipped and len(res.sizes) == 5
        assert all(len(s.stages) == 2 for s in res.sizes)
        s_map = synth.read_mask(localized / f"{name}_S.png")
        assert s_map.shape == (64, 64)
        votes = json.loads((localized / f"{name}_votes.json").read_text())
        assert len(votes["patches"]) == 2
        assert len(list(localized.glob(f"{name}_i*_j*.csv"))) == 10


def test_localize_normal_image_warns_and_force(desk_run, tmp_path, capsys):
    img = desk_run["data"] / "test" / "test_0001.png"
    base = ["localize", "--checkpoint", str(desk_run["checkpoint"]), *FAST, "--image", str(img)]
    assert main(base + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert "predicts normal" in capsys.readouterr().err
    assert not (tmp_path / "a" / "test_0001_S.png").exists()
    assert main(base + ["--force", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert "anyway" in capsys.readouterr().err
    assert (tmp_path / "b" / "test_0001_S.png").is_file()


def test_localize_usage_errors(desk_run, tmp_path):
    ck = str(desk_run["checkpoint"])
    assert main(["localize", "--checkpoint", ck, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["localize", "--checkpoint", str(tmp_path / "none.ckpt"), "--data",
                 str(desk_run["data"] / "test"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / "small.png")
    assert main(["localize", "--checkpoint", ck, "--image", str(tmp_path / "small.png"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_localize_is_deterministic_across_jobs(desk_run, tmp_path):
    common = ["localize", "--checkpoint", str(desk_run["checkpoint"]), "--epochs", "20", "--stages", "1",
              "--data", str(desk_run["data"] / "test"), "--diseased-only", "--limit", "3", "--batch", "2"]
    assert main(common + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(common + ["--jobs", "2", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_evaluate_perfect_predictions(desk_run, tmp_path):
    test = desk_run["data"] / "test"
    pred = tmp_path / "pred"
    pred.mkdir()
    for s in synth.load_dataset(test)[50:53]:
        synth.write_mask(s.gt_mask, pred / f"{s.name}_S.png")
    assert main(["evaluate", "--pred", str(pred), "--gt", str(test), "--out", str(tmp_path / "r")]) == EXIT_OK
    with open(tmp_path / "r" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(float(r["F1"]) == 1.0 for r in rows)
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["methods"]["hspi"]["F1"] == 1.0


def test_evaluate_pairing_errors(desk_run, tmp_path, capsys):
    test = desk_run["data"] / "test"
    pred = tmp_path / "pred"
    pred.mkdir()
    synth.write_mask(np.zeros((64, 64)), pred / "stranger_S.png")
    assert main(["evaluate", "--pred", str(pred), "--gt", str(test), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "without ground truth" in capsys.readouterr().err
    (pred / "stranger_S.png").unlink()
    synth.write_mask(np.zeros((64, 64)), pred / "test_0050_S.png")
    assert main(["evaluate", "--pred", str(pred), "--gt", str(test), "--all-gt",
                 "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["evaluate", "--pred", str(tmp_path), "--gt", str(test), "--out", str(tmp_path / "r")]) == 2


def test_evaluate_with_occlusion(localized, desk_run, tmp_path):
    code = main(["evaluate", "--pred", str(localized), "--gt", str(desk_run["data"] / "test"),
                 "--baseline", "occlusion", "--checkpoint", str(desk_run["checkpoint"]), "--out", str(tmp_path)])
    assert code == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["methods"]) == {"hspi", "occlusion"}
    assert summary["occlusion"]["grid"] == 4 and len(summary["occlusion"]["sweep_mean_f1"]) == 19
    assert main(["evaluate", "--pred", str(localized), "--gt", str(desk_run["data"] / "test"),
                 "--baseline", "occlusion", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_render(localized, desk_run, tmp_path):
    img = desk_run["data"] / "test" / "test_0099.png"
    code = main(["render", "--hierarchy", str(localized / "test_0099_hierarchy.json"), "--image", str(img),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    with Image.open(tmp_path / "test_0099_overlay.png") as im:
        assert im.size == (64, 64)
    assert (tmp_path / "test_0099_stages.png").is_file()
    res = HierarchyResult.load(localized / "test_0099_hierarchy.json")
    fig = stage_panels(res, synth.read_image(img))
    assert len([ax for ax in fig.axes if ax.get_images()]) == res.schedule.stages


def test_render_skipped_image(localized, desk_run, tmp_path, capsys):
    code = main(["render", "--hierarchy", str(localized / "test_0000_hierarchy.json"),
                 "--image", str(desk_run["data"] / "test" / "test_0000.png"), "--out", str(tmp_path)])
    assert code == EXIT_CONFIG and "skipped" in capsys.readouterr().err


def test_exit_code_constants():
    assert (EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME) == (0, 2, 3)
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
