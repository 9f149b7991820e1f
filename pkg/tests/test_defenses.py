import inspect

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fsba import defenses
from fsba.attacks import TrainConfig, build_training_set
from fsba.defenses import (
    JITTER_KINDS,
    JitterSpec,
    PruneSpec,
    channel_activation_means,
    fine_tune,
    gaussian_noise_video,
    jitter_frame,
    jitter_video,
    prune_channels,
)
from fsba.errors import ConfigurationError
from fsba.tracker import TrackerModel, to_tensor
from fsba.videodata import Video, generate_benchmark


def _video(rng, n=4, h=40, w=48):
    return Video(rng.random((n, h, w, 3)).astype(np.float32), id="v", category="c")


@pytest.mark.parametrize("kind", JITTER_KINDS)
def test_zero_budget_identity(kind, rng):
    v = _video(rng)
    out = jitter_video(v, JitterSpec(kind, 0.0, seed=3))
    assert out.frames.tobytes() == v.frames.tobytes() and out.id == v.id


def test_brightness_forced_factor(monkeypatch):
    monkeypatch.setattr(defenses, "jitter_factors", lambda spec, n: np.full(n, 2.0))
    v = Video(np.full((2, 32, 32, 3), 0.4, np.float32))
    np.testing.assert_allclose(jitter_video(v, JitterSpec("brightness", 0.4)).frames, 0.8, atol=1e-6)
    v = Video(np.full((2, 32, 32, 3), 0.7, np.float32))
    np.testing.assert_array_equal(jitter_video(v, JitterSpec("brightness", 0.4)).frames, 1.0)


def test_hue_half_turn_twice(rng):
    frame = rng.random((32, 32, 3)).astype(np.float32)
    twice = jitter_frame(jitter_frame(frame, "hue", 0.5), "hue", 0.5)
    np.testing.assert_allclose(twice, frame, atol=1e-5)


@pytest.mark.parametrize("kind, factor", [("contrast", 1.0), ("saturation", 1.0), ("brightness", 1.0), ("hue", 0.0)])
def test_unit_factor_identity(kind, factor, rng):
    frame = rng.random((32, 32, 3)).astype(np.float32)
    np.testing.assert_allclose(jitter_frame(frame, kind, factor), frame, atol=1e-5)


def test_contrast_and_saturation_formulas():
    frame = np.zeros((32, 32, 3), np.float32)
    frame[..., 0] = 0.6
    gray = 0.299 * 0.6
    np.testing.assert_allclose(jitter_frame(frame, "saturation", 0.0), gray, atol=1e-6)
    np.testing.assert_allclose(jitter_frame(frame, "contrast", 0.0), gray, atol=1e-6)


@given(st.sampled_from(JITTER_KINDS), st.floats(0, 0.5), st.integers(0, 2**32))
def test_jitter_invariants(kind, budget, seed):
    v = _video(np.random.default_rng(seed % 97), n=3)
    out = jitter_video(v, JitterSpec(kind, budget, seed))
    assert out.frames.shape == v.frames.shape
    assert out.frames.min() >= 0 and out.frames.max() <= 1
    assert out.frames.tobytes() == jitter_video(v, JitterSpec(kind, budget, seed)).frames.tobytes()


def test_jitter_factors_within_budget():
    f = defenses.jitter_factors(JitterSpec("contrast", 0.3, seed=1), 1000)
    assert f.min() >= 0.7 and f.max() <= 1.3 and f.std() > 0.1
    h = defenses.jitter_factors(JitterSpec("hue", 0.3, seed=1), 1000)
    assert h.min() >= -0.3 and h.max() <= 0.3


def test_noise_examples(rng):
    v = _video(rng)
    assert gaussian_noise_video(v, 0.0).frames.tobytes() == v.frames.tobytes()
    a, b = gaussian_noise_video(v, 10 / 255, seed=5), gaussian_noise_video(v, 10 / 255, seed=5)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.tobytes() != gaussian_noise_video(v, 10 / 255, seed=6).frames.tobytes()


def test_noise_std_measured():
    # mid-gray frame: clipping never triggers at 15/255
    std = 15 / 255
    v = Video(np.full((2, 255, 255, 3), 0.5, np.float32))
    out = gaussian_noise_video(v, std, seed=0)
    assert abs((out.frames - v.frames).std() / std - 1) < 0.05


@pytest.mark.parametrize("make", [lambda: JitterSpec("blur"), lambda: JitterSpec("hue", 0.6), lambda: PruneSpec(1.0), lambda: PruneSpec(0.2, 0.0)])
def test_spec_validation(make):
    with pytest.raises(ConfigurationError):
        make()


def test_noise_std_range(rng):
    with pytest.raises(ConfigurationError):
        gaussian_noise_video(_video(rng), 30 / 255)


def test_module_never_reads_trigger():
    src = inspect.getsource(defenses)
    assert ".trigger" not in src and "TriggerPattern" not in src


@pytest.fixture(scope="module")
def tune_set():
    from fsba.tracker import TrackerConfig
    from fsba.videodata import SyntheticSceneSpec

    cfg = TrackerConfig(template_size=39, search_size=79, channels=(4, 6, 8, 8))
    videos, anns = generate_benchmark(SyntheticSceneSpec(canvas=(64, 64), size_range=(10, 14), n_frames=12), 3, 8)
    return cfg, build_training_set(videos, anns, 16, 0, cfg)


def test_fine_tune_zero_epochs(tune_set):
    cfg, samples = tune_set
    model = TrackerModel(cfg, seed=3)
    model.meta["provenance"] = "fsba"
    tuned = fine_tune(model, samples, TrainConfig(epochs=0))
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), tuned.state_dict().values()))
    assert tuned.meta["provenance"] == "fsba+finetuned"


def test_fine_tune_changes_and_keeps_original(tune_set):
    cfg, samples = tune_set
    model = TrackerModel(cfg, seed=3)
    before = model.content_hash()
    tuned = fine_tune(model, samples, TrainConfig(epochs=1, lr=0.01, lr_final=0.01))
    assert model.content_hash() == before
    assert not torch.equal(model.layers[0].weight, tuned.layers[0].weight)
    with pytest.raises(ValueError):
        fine_tune(model, [], TrainConfig(epochs=1))


def test_prune_rate_zero_is_identity(small_cfg, rng):
    model = TrackerModel(small_cfg, seed=2)
    crops = list(rng.random((3, 79, 79, 3)).astype(np.float32))
    pruned = prune_channels(model, crops, PruneSpec(0.0))
    z, x = to_tensor(rng.random((1, 39, 39, 3))), to_tensor(rng.random((1, 79, 79, 3)))
    assert torch.equal(model(z, x), pruned(z, x))


@pytest.mark.parametrize("layer", [-1, 1])
def test_prune_one_channel_zeroes_it(small_cfg, rng, layer):
    model = TrackerModel(small_cfg, seed=2)
    crops = list(rng.random((3, 79, 79, 3)).astype(np.float32))
    c = small_cfg.channels[layer]
    pruned = prune_channels(model, crops, PruneSpec(1.0 / c, layer=layer))
    (ch,) = pruned.meta["pruned"]["channels"]
    act = pruned.features(to_tensor(rng.random((2, 79, 79, 3))), [layer])[0]
    assert (act[:, ch] == 0).all() and (act.abs().sum(dim=(0, 2, 3)) > 0).sum() == c - 1


def test_prune_ranking_brute_force(small_cfg, rng):
    model = TrackerModel(small_cfg, seed=4)
    crops = list(rng.random((3, 79, 79, 3)).astype(np.float32))
    means = []
    for ch in range(small_cfg.channels[-1]):
        vals = []
        for crop in crops:
            act = model.features(to_tensor(crop), [-1])[0][0, ch].detach().numpy()
            vals.extend(np.abs(act).ravel().tolist())
        means.append(sum(vals) / len(vals))
    np.testing.assert_allclose(channel_activation_means(model, crops), means, rtol=1e-6)
    pruned = prune_channels(model, crops, PruneSpec(0.25))
    assert pruned.meta["pruned"]["channels"] == sorted(np.argsort(means)[:2].tolist())


@given(st.floats(0, 0.99))
def test_prune_mask_size(rate):
    from fsba.tracker import TrackerConfig

    cfg = TrackerConfig(template_size=39, search_size=79, channels=(4, 6, 8, 10))
    crops = [np.full((79, 79, 3), 0.5, np.float32)]
    pruned = prune_channels(TrackerModel(cfg), crops, PruneSpec(rate))
    assert int((pruned.channel_mask(3) == 0).sum()) == int(np.floor(rate * 10 + 1e-9))


def test_prune_errors(small_cfg):
    with pytest.raises(ValueError):
        prune_channels(TrackerModel(small_cfg), [], PruneSpec(0.2))
