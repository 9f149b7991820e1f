import numpy as np
import pytest
import torch
from hypothesis import settings
from hypothesis import strategies as st

from fsba.tracker import TrackerConfig
from fsba.videodata import BoundingBox, SyntheticSceneSpec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")
torch.set_num_threads(1)

coord = st.floats(-50, 150, allow_nan=False, allow_infinity=False)
extent = st.floats(0.5, 80, allow_nan=False, allow_infinity=False)
boxes = st.builds(BoundingBox, coord, coord, extent, extent)


def relu_pattern(model, *inputs):
    """Signs of every hidden pre-activation; central differences are only exact while these hold."""
    signs = []
    with torch.no_grad():
        for h in inputs:
            for conv in model.layers[:-1]:
                h = conv(h)
                signs.append((h > 0).flatten())
                h = torch.relu(h)
    return torch.cat(signs)


def random_biases(model, seed=0):
    """Zero biases put pre-activations of all-zero input patches exactly on the ReLU kink."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in model.layers:
            conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen, dtype=conv.bias.dtype))
    return model


def gradient_check(model, loss_fn, pattern_fn, eps, params=None):
    """Relative error of autograd against central differences.

    Returns (error over coordinates whose +-eps steps keep ``pattern_fn``
    unchanged, number of such coordinates, error over all coordinates).
    """
    params = list(params if params is not None else model.parameters())
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten() for p in params])
    theta = torch.cat([p.detach().flatten() for p in params])
    numeric = torch.zeros_like(theta)
    smooth = torch.ones(len(theta), dtype=torch.bool)
    base = pattern_fn()

    def assign(flat):
        i = 0
        for p in params:
            p.copy_(flat[i : i + p.numel()].view_as(p))
            i += p.numel()

    with torch.no_grad():
        for k in range(len(theta)):
            for sign in (1, -1):
                t = theta.clone()
                t[k] += sign * eps
                assign(t)
                numeric[k] += sign * loss_fn() / (2 * eps)
                smooth[k] &= bool((pattern_fn() == base).all())
        assign(theta)

    def rel(mask):
        return float((analytic - numeric)[mask].norm() / numeric[mask].norm())

    return rel(smooth), int(smooth.sum()), rel(torch.ones_like(smooth))


@pytest.fixture
def small_cfg():
    # 39/79 crops: features 2x2 and 7x7, score map 6x6
    return TrackerConfig(template_size=39, search_size=79, channels=(4, 6, 8, 8))


@pytest.fixture
def small_scene():
    return SyntheticSceneSpec(canvas=(64, 64), size_range=(10, 14), n_frames=12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_model():
    """A small benign tracker trained for a few seconds on 63/127 crops."""
    from fsba.attacks import TrainConfig, build_training_set, train_benign
    from fsba.videodata import generate_benchmark

    cfg = TrackerConfig(template_size=63, search_size=127, channels=(8, 16, 16, 16))
    videos, anns = generate_benchmark(SyntheticSceneSpec(contrast=0.4), 16, 11)
    samples = build_training_set(videos, anns, 400, 0, cfg)
    return train_benign(samples, TrainConfig(epochs=3, lr=0.03, lr_final=0.003), cfg)


# ---- acceptance criteria: one pass/fail line each, repeated in the terminal summary

CRITERIA: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
