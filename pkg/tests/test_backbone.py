import numpy as np
import pytest

import monodet3d.autodiff as ad
from monodet3d.autodiff import Tensor
from monodet3d.backbone import Backbone

from conftest import rel_err


def test_output_shapes_64x64():
    backbone = Backbone(np.random.default_rng(0), channels=32)
    ms = backbone.forward(Tensor(np.random.default_rng(1).uniform(0, 1, (3, 64, 64))))
    assert ms.f8.shape == (32, 8, 8)
    assert ms.f16.shape == (32, 4, 4)
    assert ms.f32.shape == (32, 2, 2)


def test_strides_exact_for_other_sizes():
    backbone = Backbone(np.random.default_rng(0), channels=16)
    ms = backbone.forward(Tensor(np.zeros((3, 96, 320))))
    assert ms.f8.shape == (16, 12, 40)
    assert ms.f16.shape == (16, 6, 20)
    assert ms.f32.shape == (16, 3, 10)


def test_zero_image_zero_bias_gives_zero_features():
    backbone = Backbone(np.random.default_rng(0), channels=16)
    ms = backbone.forward(Tensor(np.zeros((3, 32, 32))))
    for fmap in (ms.f8, ms.f16, ms.f32):
        assert np.all(fmap.data == 0.0)


def test_rejects_indivisible_extents():
    backbone = Backbone(np.random.default_rng(0), channels=16)
    with pytest.raises(ValueError):
        backbone.forward(Tensor(np.zeros((3, 48, 64))))
    with pytest.raises(ValueError):
        backbone.forward(Tensor(np.zeros((2, 32, 32))))


def test_deterministic_given_weights():
    image = np.random.default_rng(3).uniform(0, 1, (3, 32, 64))
    outs = []
    for _ in range(2):
        backbone = Backbone(np.random.default_rng(11), channels=16)
        outs.append(backbone.forward(Tensor(image)).f32.data)
    assert np.array_equal(outs[0], outs[1])


def test_first_layer_weight_gradient_matches_fd():
    rng = np.random.default_rng(5)
    backbone = Backbone(rng, channels=8)
    image = Tensor(rng.uniform(0.1, 1.0, (3, 32, 32)))

    def loss_value():
        return ad.tsum(backbone.forward(image).f32).item()

    loss = ad.tsum(backbone.forward(image).f32)
    loss.backward()
    w = backbone.stages[0][0].w
    flat = w.data.reshape(-1)
    picks = np.random.default_rng(6).choice(flat.size, size=5, replace=False)
    h = 1e-5
    for idx in picks:
        saved = flat[idx]
        flat[idx] = saved + h
        up = loss_value()
        flat[idx] = saved - h
        down = loss_value()
        flat[idx] = saved
        fd = (up - down) / (2 * h)
        assert rel_err(fd, float(w.grad.reshape(-1)[idx]), floor=1e-4) < 1e-4
