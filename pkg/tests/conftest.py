import numpy as np
import pytest

from hspi import classifier as C


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of the scalar function ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    """Elementwise relative error, with ``floor`` guarding entries that are both ~0."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def small_model():
    """A random float64 model on 8x8 inputs with a non-zero dense head."""
    m = C.init_model(3, input_size=(8, 8)).astype(np.float64)
    rng = np.random.default_rng(5)
    m.params["dense_w"][...] = rng.normal(0, 0.5, m.params["dense_w"].shape)
    m.params["dense_b"][...] = rng.normal(0, 0.1, 2)
    return m


@pytest.fixture(scope="session")
def desk_model():
    """A random (untrained) desk-size float32 model with a non-zero head."""
    m = C.init_model(1)
    rng = np.random.default_rng(2)
    m.params["dense_w"][...] = rng.normal(0, 0.3, m.params["dense_w"].shape).astype(np.float32)
    return m


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default desk dataset and classifier, built once through the CLI.

    Returns a dict with the data directory, checkpoint path, training wall
    time and the checkpoint metadata.
    """
    import time

    from hspi.cli import main

    root = tmp_path_factory.mktemp("desk")
    data, ckpt = root / "data", root / "model.ckpt"
    assert main(["gen-data", "--out", str(data)]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(ckpt)]) == 0
    seconds = time.perf_counter() - t0
    return {"root": root, "data": data, "checkpoint": ckpt, "train_seconds": seconds,
            "metadata": C.load_checkpoint(ckpt).metadata}


# acceptance criteria report: number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


_CONFIG = {}


def pytest_configure(config):
    _CONFIG["config"] = config


def record_criterion(number, passed: bool, detail: str) -> None:
    ACCEPTANCE[str(number)] = (bool(passed), detail)
    config = _CONFIG.get("config")
    if config is None:
        return
    tr = config.pluginmanager.get_plugin("terminalreporter")
    capture = config.pluginmanager.get_plugin("capturemanager")
    if tr is not None and capture is not None:
        with capture.global_and_fixture_disabled():
            tr.write_line(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
