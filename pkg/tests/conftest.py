"""Shared fixtures: finite-difference checker, synthetic stereo data, trained models."""
from __future__ import annotations

import time
from typing import Callable, Dict, Sequence

import numpy as np
import pytest

from padnet.data_io import distort, synthesize_distortions, synthetic_scene, synthetic_stereo_pair
from padnet.tensor_core import Tensor, precision

FD_STEP = 1e-6
GRAD_TOL = 1e-3

# Wall-clock seconds of the session-scoped training fixtures.
TIMINGS: Dict[str, float] = {}
# One "PASS/FAIL criterion N: ..." line per acceptance criterion, in run order.
ACCEPTANCE: Dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def gradient_error(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   wrt: Sequence[int] = None) -> float:
    """Worst relative error between autodiff and central differences.

    ``fn`` maps float64 tensors to any-shaped output, which is contracted with
    a fixed random weighting so that the whole Jacobian is exercised.
    """
    rng = np.random.default_rng(seed)
    wrt = range(len(inputs)) if wrt is None else wrt
    with precision("float64"):
        inputs = [np.array(x, dtype=np.float64) for x in inputs]
        probe = fn(*[Tensor(x) for x in inputs])
        weights = rng.standard_normal(probe.shape)

        def objective(arrays):
            out = fn(*[Tensor(a) for a in arrays])
            return float(np.sum(out.data * weights))

        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        out = fn(*tensors)
        (out * Tensor(weights)).sum().backward()
        worst = 0.0
        for idx in wrt:
            numeric = np.zeros_like(inputs[idx])
            flat = numeric.reshape(-1)
            for k in range(flat.size):
                plus = [a.copy() for a in inputs]
                minus = [a.copy() for a in inputs]
                plus[idx].reshape(-1)[k] += FD_STEP
                minus[idx].reshape(-1)[k] -= FD_STEP
                flat[k] = (objective(plus) - objective(minus)) / (2 * FD_STEP)
            analytic = tensors[idx].grad if tensors[idx].grad is not None else np.zeros_like(numeric)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------
# Synthetic data shared by the slow training tests
# ----------------------------------------------------------------------------

# Mixed symmetric and one-sided blur/noise over two reference scenes.
OVERFIT_VARIANTS = [
    [("blur", 1, 1), ("blur", 3, 3), ("noise", 2, 2), ("noise", 4, 4)],
    [("blur", 0, 4), ("noise", 0, 3), ("blur", 2, 0), ("noise", 1, 0)],
]


def overfit_stereo_set(seed: int = 7, size: int = 64):
    rng = np.random.default_rng(seed)
    samples = []
    for variants in OVERFIT_VARIANTS:
        ref = synthetic_stereo_pair(size, size, rng)
        samples += synthesize_distortions([ref], rng, variants, include_pristine=False)
    return samples


def scored_2d_set(seed: int = 11, size: int = 64, scenes: int = 2):
    """Single views at every blur/noise level, labelled by their own level."""
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(scenes):
        img = synthetic_scene(size, size, rng)
        for kind in ("blur", "noise"):
            for level in range(5):
                data.append((distort(img, kind, level, rng), 100.0 - 20.0 * level))
    return data


def overfit_images(seed: int = 3, count: int = 4, size: int = 64):
    rng = np.random.default_rng(seed)
    return [synthetic_scene(size, size, rng) for _ in range(count)]


@pytest.fixture(scope="session")
def stage1_run():
    """Stage-1 overfit on four synthetic images, 200 steps at the 64 profile."""
    from padnet.pipeline import TrainConfig, pretrain_autoencoder

    config = TrainConfig(stage=1, profile=64, epochs=200, batch_size=4, seed=1, schedule_scale=0.25)
    start = time.perf_counter()
    result = pretrain_autoencoder(overfit_images(), config)
    TIMINGS["stage1"] = time.perf_counter() - start
    return result


@pytest.fixture(scope="session")
def three_stage_run():
    """Full three-stage protocol on eight stereo pairs at the 64 profile."""
    from padnet.pipeline import TrainConfig, pretrain_autoencoder, pretrain_regressor_2d, train_joint

    start = time.perf_counter()
    samples = overfit_stereo_set()
    views = [v for s in samples for v in (s.left, s.right)]
    ae = pretrain_autoencoder(views, TrainConfig(stage=1, profile=64, epochs=100, seed=1))
    reg = pretrain_regressor_2d(scored_2d_set(), TrainConfig(stage=2, profile=64, epochs=50, seed=2))
    joint = train_joint(samples, TrainConfig(stage=3, profile=64, epochs=300, seed=3), ae.model, reg.model)
    TIMINGS["three_stage"] = time.perf_counter() - start
    return {"samples": samples, "ae": ae, "reg": reg, "joint": joint}
