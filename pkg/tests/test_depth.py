import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import monodet3d.autodiff as ad
from monodet3d.autodiff import Tensor
from monodet3d.backbone import Backbone, MultiScaleFeatures
from monodet3d.depth import (
    DepthBinSpec,
    DepthPredictor,
    build_depth_target,
    depth_map_loss,
    expected_depth,
    expected_depth_map,
)
from monodet3d.heads import GroundTruthObject

from conftest import rel_err

LID = DepthBinSpec(d_min=0.0, d_max=80.0, k=80, mode="lid")


def _gt(box2d, depth, class_id=0):
    return GroundTruthObject(class_id=class_id, box2d=box2d, depth=depth,
                             dims=(1.5, 1.6, 3.9), heading=0.0,
                             location=(0.0, 1.5, depth), center3d_norm=(0.5, 0.5))


# -- bin algebra --------------------------------------------------------------


def test_lid_delta_exact():
    assert LID.delta == 160.0 / 6480.0
    assert LID.delta == 2.0 * 80.0 / (80 * 81)


def test_bin_index_boundaries():
    assert LID.bin_index(0.0) == 0
    assert LID.bin_index(LID.delta) == 1
    assert LID.bin_index(80.0) == 79  # clamped away from the background index


def test_bin_start_endpoints():
    assert LID.bin_start(0) == 0.0
    assert LID.bin_start(80) == 80.0  # background bin maps to d_max


@pytest.mark.parametrize("mode", ["lid", "ud", "sid"])
def test_bin_roundtrip_all_bins(mode):
    spec = DepthBinSpec(d_min=0.0, d_max=80.0, k=80, mode=mode)
    for i in range(spec.k):
        assert spec.bin_index(spec.bin_start(i)) == i


@pytest.mark.parametrize("mode", ["lid", "ud", "sid"])
def test_bin_index_monotone_sweep(mode):
    spec = DepthBinSpec(d_min=0.0, d_max=80.0, k=80, mode=mode)
    d = np.arange(0.0, 80.0 + 1e-9, 0.01)
    idx = spec.bin_index_array(d)
    assert np.all(np.diff(idx) >= 0)
    assert idx[0] == 0 and idx[-1] == spec.k - 1


def test_lid_widths_increase_by_delta():
    widths = np.diff([LID.bin_start(i) for i in range(LID.k)])
    steps = np.diff(widths)
    assert np.allclose(steps, LID.delta, atol=1e-12)


def test_bin_index_range_errors():
    with pytest.raises(ValueError):
        LID.bin_index(-0.1)
    with pytest.raises(ValueError):
        LID.bin_index(80.1)
    with pytest.raises(ValueError):
        LID.bin_start(81)
    with pytest.raises(ValueError):
        DepthBinSpec(d_min=5.0, d_max=5.0, k=10)


def test_sid_with_nonzero_dmin_uses_no_shift():
    spec = DepthBinSpec(d_min=2.0, d_max=80.0, k=40, mode="sid")
    assert spec.bin_start(0) == pytest.approx(2.0)
    for i in range(spec.k):
        assert spec.bin_index(spec.bin_start(i)) == i


# -- expected depth -----------------------------------------------------------


def test_expected_depth_one_hot_background():
    probs = np.zeros(LID.k + 1)
    probs[LID.k] = 1.0
    assert expected_depth(probs, LID) == 80.0


def test_expected_depth_one_hot_bins():
    for i in (0, 7, 79):
        probs = np.zeros(LID.k + 1)
        probs[i] = 1.0
        assert expected_depth(probs, LID) == LID.bin_start(i)


def test_expected_depth_uniform_hand_case():
    spec = DepthBinSpec(d_min=0.0, d_max=3.0, k=2, mode="lid")
    assert spec.delta == 1.0
    assert [spec.bin_start(i) for i in range(3)] == [0.0, 1.0, 3.0]
    val = expected_depth(np.full(3, 1.0 / 3.0), spec)
    assert val == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_expected_depth_argmax_mode():
    probs = np.asarray([0.2, 0.5, 0.3])
    spec = DepthBinSpec(d_min=0.0, d_max=3.0, k=2, mode="lid")
    assert expected_depth(probs, spec, mode="argmax") == spec.bin_start(1)


def test_expected_depth_rejects_unnormalized():
    with pytest.raises(ValueError):
        expected_depth(np.full(LID.k + 1, 0.5), LID)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=81, max_size=81))
def test_expected_depth_stays_in_range(raw):
    probs = np.asarray(raw)
    probs /= probs.sum()
    val = expected_depth(probs, LID)
    assert 0.0 <= val <= 80.0


# -- depth predictor ----------------------------------------------------------


def _zero_features(c, h16, w16):
    return MultiScaleFeatures(
        f8=Tensor(np.zeros((c, h16 * 2, w16 * 2))),
        f16=Tensor(np.zeros((c, h16, w16))),
        f32=Tensor(np.zeros((c, h16 // 2, w16 // 2))),
    )


def test_predictor_uniform_probs_on_zero_features():
    predictor = DepthPredictor(np.random.default_rng(0), channels=8, k=5)
    f_d, fg = predictor.forward(_zero_features(8, 4, 6))
    assert f_d.shape == (8, 4, 6)
    assert fg.logits.shape == (6, 4, 6)
    assert np.allclose(fg.probs.data, 1.0 / 6.0, atol=1e-15)


def test_predictor_output_shapes():
    rng = np.random.default_rng(1)
    predictor = DepthPredictor(rng, channels=8, k=12)
    ms = MultiScaleFeatures(
        f8=Tensor(rng.uniform(-1, 1, (8, 8, 12))),
        f16=Tensor(rng.uniform(-1, 1, (8, 4, 6))),
        f32=Tensor(rng.uniform(-1, 1, (8, 2, 3))),
    )
    f_d, fg = predictor.forward(ms)
    assert f_d.shape == (8, 4, 6)
    assert fg.logits.shape == (13, 4, 6)
    sums = fg.probs.data.sum(axis=0)
    assert np.allclose(sums, 1.0, atol=1e-9)


def test_depth_map_loss_perfect_is_zero():
    spec = DepthBinSpec(d_min=0.0, d_max=10.0, k=3, mode="lid")
    classes = np.asarray([[0, 1], [2, 3]])
    logits = np.full((4, 2, 2), -60.0)
    for r in range(2):
        for c in range(2):
            logits[classes[r, c], r, c] = 60.0
    from monodet3d.depth import ForegroundDepthMap

    lt = Tensor(logits)
    fg = ForegroundDepthMap(logits=lt, probs=ad.softmax(lt, axis=0))
    loss = depth_map_loss(fg, build_target_from_classes(classes))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def build_target_from_classes(classes):
    from monodet3d.depth import DepthMapTarget

    return DepthMapTarget(classes=np.asarray(classes))


def test_depth_map_loss_half_probability():
    # one pixel, two classes, equal logits: p_t = 0.5 and focal (gamma=2)
    # gives 0.25 * ln 2
    from monodet3d.depth import ForegroundDepthMap

    lt = Tensor(np.zeros((2, 1, 1)))
    fg = ForegroundDepthMap(logits=lt, probs=ad.softmax(lt, axis=0))
    loss = depth_map_loss(fg, build_target_from_classes([[0]]))
    assert loss.item() == pytest.approx(0.25 * np.log(2.0), abs=1e-12)


def test_depth_map_loss_gradient_vs_fd():
    rng = np.random.default_rng(2)
    predictor = DepthPredictor(rng, channels=4, k=4)
    ms = MultiScaleFeatures(
        f8=Tensor(rng.uniform(0.1, 1, (4, 4, 8))),
        f16=Tensor(rng.uniform(0.1, 1, (4, 2, 4))),
        f32=Tensor(rng.uniform(0.1, 1, (4, 1, 2))),
    )
    target = build_target_from_classes(rng.integers(0, 5, (2, 4)))

    def loss_value():
        _, fg = predictor.forward(ms)
        return depth_map_loss(fg, target).item()

    _, fg = predictor.forward(ms)
    loss = depth_map_loss(fg, target)
    loss.backward()
    w = predictor.proj8.w
    flat = w.data.reshape(-1)
    h = 1e-5
    for idx in np.random.default_rng(3).choice(flat.size, size=6, replace=False):
        saved = flat[idx]
        flat[idx] = saved + h
        up = loss_value()
        flat[idx] = saved - h
        down = loss_value()
        flat[idx] = saved
        fd = (up - down) / (2 * h)
        assert rel_err(fd, float(w.grad.reshape(-1)[idx]), floor=1e-5) < 1e-4


def test_depth_map_loss_decreases_under_gradient_descent():
    # plain gradient descent on a fixed two-object scene: the map loss must
    # fall monotonically for 50 small steps
    from monodet3d.data import SceneSpec, generate_scene

    spec = SceneSpec(image_h=32, image_w=64, min_objects=2, max_objects=2,
                     depth_min=4.0, depth_max=14.0, focal=60.0)
    scene = generate_scene(3, spec)
    assert len(scene.objects) == 2
    rng = np.random.default_rng(4)
    backbone = Backbone(rng, channels=8)
    predictor = DepthPredictor(rng, channels=8, k=16)
    bins = DepthBinSpec(d_min=0.0, d_max=16.0, k=16)
    target = build_depth_target(scene.objects, bins, 2, 4)
    params = {**backbone.params(), **predictor.params()}
    losses = []
    for _ in range(50):
        for p in params.values():
            p.grad = None
        _, fg = predictor.forward(backbone.forward(scene.image))
        loss = depth_map_loss(fg, target)
        loss.backward()
        losses.append(loss.item())
        for p in params.values():
            if p.grad is not None:
                p.data = p.data - 0.05 * p.grad
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- target construction ------------------------------------------------------


def test_target_no_objects_all_background():
    target = build_depth_target([], LID, 4, 6)
    assert np.all(target.classes == LID.k)


def test_target_full_image_object():
    obj = _gt((0.0, 0.0, 96.0, 64.0), depth=12.0)
    target = build_depth_target([obj], LID, 4, 6)
    assert np.all(target.classes == LID.bin_index(12.0))


def test_target_overlap_takes_nearer_object():
    far = _gt((0.0, 0.0, 96.0, 64.0), depth=30.0)
    near = _gt((32.0, 16.0, 64.0, 48.0), depth=10.0)
    for order in ([far, near], [near, far]):
        target = build_depth_target(order, LID, 4, 6)
        assert target.classes[1, 2] == LID.bin_index(10.0)
        assert target.classes[0, 0] == LID.bin_index(30.0)


def test_target_pixel_center_rule():
    # box [0, 16) in pixels covers exactly grid column 0 (center 0.5)
    obj = _gt((0.0, 0.0, 16.0, 16.0), depth=5.0)
    target = build_depth_target([obj], LID, 2, 2)
    assert target.classes[0, 0] == LID.bin_index(5.0)
    assert target.classes[0, 1] == LID.k
    assert target.classes[1, 0] == LID.k


def test_target_overlap_matches_bruteforce(rng):
    spec = LID
    for trial in range(20):
        r = np.random.default_rng(100 + trial)
        objs = [
            _gt(tuple(np.sort(r.uniform(0, 96, 2)).tolist())
                + tuple(np.sort(r.uniform(0, 64, 2)).tolist()), 0)
            for _ in range(4)
        ]
        # reorder box fields to (x1, y1, x2, y2) and set depths
        fixed = []
        for o in objs:
            x1, x2, y1, y2 = o.box2d
            depth = float(r.uniform(1, 79))
            fixed.append(_gt((x1, y1, x2, y2), depth))
        target = build_depth_target(fixed, spec, 4, 6)
        for row in range(4):
            for col in range(6):
                cx, cy = (col + 0.5) * 16, (row + 0.5) * 16
                covering = [o for o in fixed
                            if o.box2d[0] <= cx <= o.box2d[2]
                            and o.box2d[1] <= cy <= o.box2d[3]]
                if covering:
                    nearest = min(covering, key=lambda o: o.depth)
                    assert target.classes[row, col] == spec.bin_index(nearest.depth)
                else:
                    assert target.classes[row, col] == spec.k


def test_expected_depth_map_matches_vector_decode(rng):
    from monodet3d.depth import ForegroundDepthMap

    logits = Tensor(rng.uniform(-2, 2, (LID.k + 1, 2, 3)))
    fg = ForegroundDepthMap(logits=logits, probs=ad.softmax(logits, axis=0))
    grid = expected_depth_map(fg, LID)
    for r in range(2):
        for c in range(3):
            assert grid.data[r, c] == pytest.approx(
                expected_depth(fg.probs.data[:, r, c], LID), abs=1e-9
            )
    arg = expected_depth_map(fg, LID, mode="argmax")
    starts = LID.bin_starts()
    assert np.array_equal(arg.data, starts[np.argmax(fg.probs.data, axis=0)])
