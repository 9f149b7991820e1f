import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import gradient_check, random_biases, relu_pattern

from fsba.errors import ConfigurationError, LabelingError
from fsba.tracker import (
    TrackerConfig,
    TrackerModel,
    crop_region,
    crop_search,
    crop_template,
    forward,
    load_checkpoint,
    make_label,
    save_checkpoint,
    template_side,
    to_tensor,
    track,
    tracking_loss,
)
from fsba.videodata import BoundingBox, SyntheticSceneSpec, generate_benchmark, generate_synthetic_video, iou_array

GOLDEN = Path(__file__).parent / "data" / "golden_scoremap_seed3.npz"


def test_reference_geometry():
    cfg = TrackerConfig(template_size=63, search_size=127)
    assert (cfg.feature_size(63), cfg.feature_size(127), cfg.score_size, cfg.total_stride) == (5, 13, 9, 8)
    assert TrackerConfig().score_size == TrackerConfig().feature_size(255) - TrackerConfig().feature_size(127) + 1


@pytest.mark.parametrize("changes", [{"strides": (2, 2)}, {"strides": (2, 0, 2, 1)}, {"template_size": 15}, {"template_size": 200, "search_size": 100}])
def test_config_validation(changes):
    with pytest.raises(ConfigurationError):
        TrackerConfig(**changes).validate()


def test_uniform_crop():
    frame = np.full((96, 96, 3), 0.3, np.float32)
    crop = crop_template(frame, BoundingBox(40, 40, 16, 16), TrackerConfig(template_size=63, search_size=127))
    np.testing.assert_allclose(crop, 0.3, atol=1e-6)


def test_crop_sides():
    box = BoundingBox(40, 40, 16, 16)
    assert template_side(box) == pytest.approx(32.0)
    frame = np.zeros((96, 96, 3), np.float32)
    _, geom = crop_search(frame, box, TrackerConfig())
    assert geom.side == pytest.approx(32 * 255 / 127) and geom.side == pytest.approx(64.25, abs=0.01)


@given(st.floats(5, 90), st.floats(5, 90), st.floats(2, 40), st.floats(2, 40))
def test_search_geometry_contract(x, y, w, h):
    box = BoundingBox(x, y, w, h)
    cfg = TrackerConfig(template_size=63, search_size=127)
    _, geom = crop_search(np.zeros((96, 96, 3), np.float32), box, cfg)
    assert geom.to_frame(63.5, 63.5) == pytest.approx(box.center)
    assert geom.side / template_side(box) == pytest.approx(127 / 63)
    u, v = geom.to_crop(*geom.to_frame(10.0, 20.0))
    assert (u, v) == pytest.approx((10.0, 20.0))


def test_crop_deterministic_and_centered(rng):
    frame = rng.random((96, 96, 3)).astype(np.float32)
    box = BoundingBox(30, 20, 16, 16)
    a = crop_template(frame, box, TrackerConfig(template_size=63))
    np.testing.assert_array_equal(a, crop_template(frame, box, TrackerConfig(template_size=63)))
    # identity resize: the crop reproduces frame pixels exactly
    crop = crop_region(frame, (48.0, 48.0), 32, 32)
    np.testing.assert_allclose(crop, frame[32:64, 32:64], atol=1e-6)


def test_crop_padding_uses_frame_mean(rng):
    frame = rng.random((40, 40, 3)).astype(np.float32)
    crop = crop_region(frame, (0.0, 0.0), 40, 40)
    np.testing.assert_allclose(crop[0, 0], frame.reshape(-1, 3).mean(axis=0), atol=1e-5)


def test_constant_inputs_give_constant_map(small_cfg):
    model = TrackerModel(small_cfg, seed=1)
    s = forward(model, np.full((39, 39, 3), 0.4), np.full((79, 79, 3), 0.4)).response
    assert s.shape == (small_cfg.score_size,) * 2
    np.testing.assert_allclose(s, s[0, 0], rtol=1e-5)


def test_forward_deterministic(small_cfg, rng):
    z, x = rng.random((39, 39, 3)), rng.random((79, 79, 3))
    a = forward(TrackerModel(small_cfg, seed=2), z, x).response
    b = forward(TrackerModel(small_cfg, seed=2), z, x).response
    np.testing.assert_array_equal(a, b)


def test_forward_shape_mismatch(small_cfg):
    model = TrackerModel(small_cfg)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 40, 40), torch.zeros(1, 3, 79, 79))
    with pytest.raises(ValueError):
        model.correlate(torch.zeros(2, 8, 2, 2), torch.zeros(3, 8, 7, 7))


def test_golden_score_map():
    data = np.load(GOLDEN)
    model = TrackerModel(TrackerConfig(template_size=63, search_size=127), seed=3).double()
    s = forward(model, data["z"], data["x"]).response
    np.testing.assert_allclose(s, data["response"], atol=1e-6, rtol=0)


def test_batched_correlation_matches_single(small_cfg, rng):
    model = TrackerModel(small_cfg, seed=4)
    z = to_tensor(rng.random((3, 39, 39, 3)))
    x = to_tensor(rng.random((3, 79, 79, 3)))
    batched = model(z, x)
    for i in range(3):
        torch.testing.assert_close(batched[i], model(z[i : i + 1], x[i : i + 1])[0])


@pytest.mark.parametrize(
    "scores, expected",
    [
        (np.zeros((5, 5)), math.log(2)),
        (None, math.log1p(math.exp(-2))),
    ],
)
def test_tracking_loss_values(scores, expected):
    labels = make_label((5, 5), 8, (0, 0), 12)
    if scores is None:
        scores = 2.0 * labels
    assert tracking_loss(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_tracking_loss_perfect_margin():
    labels = make_label((5, 5), 8, (0, 0), 12)
    assert tracking_loss(50.0 * labels, labels) < 1e-20


def test_tracking_loss_balanced_weights():
    # one positive, 24 negatives: each class carries half of the loss
    labels = -np.ones((5, 5)); labels[2, 2] = 1
    scores = np.zeros((5, 5)); scores[2, 2] = -1.0
    expected = 0.5 * math.log1p(math.e) + 0.5 * math.log(2)
    assert tracking_loss(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_tracking_loss_shape_mismatch():
    with pytest.raises(ValueError):
        tracking_loss(np.zeros((5, 5)), np.ones((4, 4)))


def test_label_disc():
    labels = make_label((9, 9), 8, (0.0, 0.0), 16)
    ii, jj = np.mgrid[0:9, 0:9]
    np.testing.assert_array_equal(labels > 0, np.hypot(ii - 4, jj - 4) <= 2)
    assert (labels > 0).sum() == 13


def test_label_limits():
    assert (make_label((9, 9), 8, (3.0, -5.0), 1e9) == 1).all()
    with pytest.raises(LabelingError):
        make_label((6, 6), 8, (0.0, 0.0), 3.0)  # centre between cells, radius < half a stride
    with pytest.raises(LabelingError):
        make_label((9, 9), 8, (0.0, 0.0), 0.0)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(4.0, 40.0))
def test_label_positives_within_radius(dx, dy, radius):
    try:
        labels = make_label((9, 9), 8, (dx, dy), radius)
    except LabelingError:
        return
    ys, xs = np.nonzero(labels > 0)
    assert (np.hypot(8 * (xs - 4) - dx, 8 * (ys - 4) - dy) <= radius + 1e-9).all()


@pytest.fixture
def grad_case(small_cfg, rng):
    model = random_biases(TrackerModel(small_cfg, seed=5).double())
    z = to_tensor(rng.random((2, 39, 39, 3)), torch.float64)
    x = to_tensor(rng.random((2, 79, 79, 3)), torch.float64)
    m = small_cfg.score_size
    y = torch.from_numpy(np.stack([make_label((m, m), 8, (4.0, 4.0), 16), make_label((m, m), 8, (-10.0, 3.0), 16)]))
    return model, z, x, y


def test_tracking_loss_gradient(grad_case):
    model, z, x, y = grad_case
    loss = lambda: tracking_loss(model(z, x), y)
    pattern = lambda: relu_pattern(model, z, x)
    err, n_smooth, _ = gradient_check(model, loss, pattern, eps=1e-3)
    assert err <= 1e-4
    assert n_smooth >= 0.5 * sum(p.numel() for p in model.parameters())
    # with a step small enough to avoid every kink, all coordinates agree
    assert gradient_check(model, loss, pattern, eps=1e-6)[2] <= 1e-4


def test_checkpoint_round_trip(tmp_path, small_cfg):
    model = TrackerModel(small_cfg, seed=6)
    model.meta["provenance"] = "fsba"
    digest = save_checkpoint(model, tmp_path / "m.npz")
    loaded = load_checkpoint(tmp_path / "m.npz")
    assert loaded.content_hash() == digest == model.content_hash()
    assert loaded.meta["provenance"] == "fsba"
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        torch.testing.assert_close(a, b, rtol=0, atol=0, msg=k)
    other = TrackerModel(small_cfg, seed=7)
    assert other.content_hash() != digest


def test_track_contract(toy_model):
    video, ann = generate_synthetic_video(SyntheticSceneSpec(n_frames=6), 3)
    init = ann.box(0)
    out = track(toy_model, video, init)
    assert len(out) == len(video) and out[0] == init
    assert out == track(toy_model, video, init)


@given(st.floats(0, 80), st.floats(0, 80), st.floats(4, 40), st.floats(4, 40))
def test_track_contract_any_init(toy_model, x, y, w, h):
    video, _ = generate_synthetic_video(SyntheticSceneSpec(n_frames=3), 1)
    init = BoundingBox(x, y, w, h)
    out = track(toy_model, video, init)
    assert len(out) == 3 and out[0] == init
    assert all(b.is_valid() for b in out)


def test_static_object_tracked(toy_model):
    spec = SyntheticSceneSpec(contrast=0.4, velocity_range=(0, 0), n_frames=10)
    videos, anns = generate_benchmark(spec, 4, 12)
    for video, ann in zip(videos, anns):
        pred = np.array([b.as_array() for b in track(toy_model, video, ann.box(0))])
        assert iou_array(pred, ann.boxes).mean() >= 0.5


@pytest.mark.parametrize("k", [-2, -1, 1, 2])
def test_translation_equivariance(toy_model, k):
    cfg = toy_model.cfg
    spec = SyntheticSceneSpec(contrast=0.4, n_distractors=0, velocity_range=(0, 0), n_frames=2)
    hits = 0
    for seed in range(8):
        video, ann = generate_synthetic_video(spec, seed)
        box = ann.box(0)
        z = crop_template(video.frames[0], box, cfg)
        x0, geom = crop_search(video.frames[0], box, cfg)
        # move the crop so the object lands k strides to the right of the centre
        shifted = BoundingBox.from_center(box.center[0] - k * cfg.total_stride * geom.scale, box.center[1], box.w, box.h)
        x1, _ = crop_search(video.frames[0], shifted, cfg)
        a = np.unravel_index(np.argmax(forward(toy_model, z, x0).response), (cfg.score_size,) * 2)
        b = np.unravel_index(np.argmax(forward(toy_model, z, x1).response), (cfg.score_size,) * 2)
        hits += abs((b[1] - a[1]) - k) <= 1 and abs(b[0] - a[0]) <= 1
    assert hits >= 7
