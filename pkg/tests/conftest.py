import numpy as np
import pytest


def numerical_grad(f, arr, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Desk-scale pretraining shared by the slow tests: depth 7, width 32, AWGN 25/255.
DESK_PRETRAIN = dict(sigma=25 / 255, crop_size=40, batch=8, steps=1200, lr=1e-3)


@pytest.fixture(scope="session")
def desk_pretrained():
    """(params, loss history, held-out images) of the desk-scale pretrained net."""
    from f2fdenoise import synth
    from f2fdenoise.model import ModelConfig
    from f2fdenoise.trainer import PretrainConfig, pretrain

    corpus = synth.corpus(12, (96, 96), seed=100)
    held_out = synth.corpus(4, (64, 64), seed=200)
    history = []
    params = pretrain(corpus, PretrainConfig(**DESK_PRETRAIN), seed=0, model_config=ModelConfig(),
                      history=history)
    return params, history, held_out


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def report(request):
    """Record ``(criterion, passed, detail)``; lines are printed in the terminal summary."""

    def record(criterion, passed, detail):
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
