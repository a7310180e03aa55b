import math

import numpy as np
import pytest

from sphereloss.datagen import SphereDatasetSpec, gen_sphere_dataset
from sphereloss.exceptions import ConfigInvalid, NonFiniteGradient, ShapeMismatch, StaleCache
from sphereloss.gradcheck import check_gradient
from sphereloss.losses import MarginLossSpec
from sphereloss.nn import (
    LossStage,
    Primitive,
    PrimitiveSpec,
    TrainConfig,
    accuracy,
    adversarial_gradient_probe,
    dense_embedding_net,
    linear_softmax_loss,
    primitive_backward,
    primitive_forward,
    sgd_step,
    train,
)
from sphereloss.rng import CounterRNG

PRIMITIVE_CASES = [
    (PrimitiveSpec("Dense", 5, 3), (4, 5)),
    (PrimitiveSpec("LinearHead", 5, 3), (4, 5)),
    (PrimitiveSpec("PReLU", 3, 3), (4, 3, 5, 5)),
    (PrimitiveSpec("PReLU", 6, 6), (4, 6)),
    (PrimitiveSpec("BatchNorm", 3, 3), (4, 3, 5, 5)),
    (PrimitiveSpec("BatchNorm", 6, 6), (5, 6)),
    (PrimitiveSpec("Conv2D", 2, 3, 3, 1), (2, 2, 6, 6)),
    (PrimitiveSpec("Conv2D", 2, 3, 3, 2), (2, 2, 7, 7)),
    (PrimitiveSpec("Conv2D", 3, 4, 1, 1), (2, 3, 4, 4)),
    (PrimitiveSpec("Conv2D", 3, 4, 1, 2), (2, 3, 5, 5)),
    (PrimitiveSpec("DepthwiseConv2D", 3, 3, 3, 1), (2, 3, 5, 5)),
    (PrimitiveSpec("DepthwiseConv2D", 3, 3, 3, 2), (2, 3, 6, 6)),
    (PrimitiveSpec("GlobalDepthwiseConv", 3, 3, 4), (2, 3, 4, 4)),
    (PrimitiveSpec("Flatten", 3, 3), (2, 3, 2, 2)),
]


def _randomize(params, rng):
    for v in params.values():
        v[...] = rng.normal(size=v.shape)


@pytest.mark.parametrize("spec,shape", PRIMITIVE_CASES, ids=lambda v: getattr(v, "kind", None) or str(v))
def test_primitive_backward_matches_finite_differences(spec, shape, rng):
    layer = Primitive(spec, CounterRNG(1))
    _randomize(layer.params, rng)
    x = rng.normal(size=shape)
    y, cache = primitive_forward(spec, layer.params, x, True, None)
    r = rng.normal(size=y.shape)
    dx, grads = primitive_backward(spec, cache, r)
    f = lambda: float(np.sum(primitive_forward(spec, layer.params, x, True, None)[0] * r))  # noqa: E731
    assert check_gradient(f, x, dx) < 1e-4
    for name, p in layer.params.items():
        assert check_gradient(f, p, grads[name]) < 1e-4


def test_primitive_examples():
    d = PrimitiveSpec("Dense", 3, 3)
    x = np.array([[1.0, -2.0, 3.0]])
    y, cache = primitive_forward(d, {"W": np.eye(3)}, x)
    np.testing.assert_array_equal(y, x)
    dx, g = primitive_backward(d, cache, np.zeros_like(y))
    assert not dx.any() and not g["W"].any()

    p = PrimitiveSpec("PReLU", 2, 2)
    y, cache = primitive_forward(p, {"alpha": np.full(2, 0.25)}, [[-4.0, 2.0]])
    np.testing.assert_array_equal(y, [[-1.0, 2.0]])
    xp = np.array([[1.5, 0.5]])
    y, cache = primitive_forward(p, {"alpha": np.full(2, 0.25)}, xp)
    dx, g = primitive_backward(p, cache, [[0.3, -0.7]])
    np.testing.assert_array_equal(dx, [[0.3, -0.7]])
    np.testing.assert_array_equal(g["alpha"], [0.0, 0.0])

    gdc = PrimitiveSpec("GlobalDepthwiseConv", 4, 4, 7)
    x = np.random.default_rng(0).normal(size=(2, 4, 7, 7))
    y, _ = primitive_forward(gdc, {"W": np.ones((4, 7, 7))}, x)
    np.testing.assert_allclose(y[:, :, 0, 0], x.sum(axis=(2, 3)), rtol=1e-13)


def test_primitive_errors():
    spec = PrimitiveSpec("Dense", 3, 2)
    with pytest.raises(ShapeMismatch):
        primitive_forward(spec, {"W": np.ones((3, 2))}, np.ones((1, 4)))
    _, cache = primitive_forward(spec, {"W": np.ones((3, 2))}, np.ones((1, 3)))
    with pytest.raises(StaleCache):
        primitive_backward(PrimitiveSpec("Dense", 3, 5), cache, np.ones((1, 2)))
    with pytest.raises(ConfigInvalid):
        PrimitiveSpec("Conv2D", 1, 1, 2)
    with pytest.raises(ConfigInvalid):
        PrimitiveSpec("Conv2D", 1, 1, 3, 3)


def test_same_padding_stride_two_ceil():
    spec = PrimitiveSpec("Conv2D", 1, 1, 3, 2)
    y, _ = primitive_forward(spec, {"W": np.ones((1, 1, 3, 3))}, np.ones((1, 1, 7, 7)))
    assert y.shape == (1, 1, 4, 4)
    # corner sees a 2x2 patch under zero padding, interior a full 3x3 one
    assert y[0, 0, 0, 0] == 4.0 and y[0, 0, 1, 1] == 9.0


def test_linear_softmax_loss_gradients(rng):
    E, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    y = rng.integers(0, 3, size=5)
    loss, p, gE, gW, gb = linear_softmax_loss(E, W, b, y)
    f = lambda: linear_softmax_loss(E, W, b, y)[0]  # noqa: E731
    for arr, g in ((E, gE), (W, gW), (b, gb)):
        assert check_gradient(f, arr, g) < 1e-4


# -- optimizer ---------------------------------------------------------------


def _cfg(**kw):
    base = dict(lr_schedule=[(0, 0.1)], momentum=0.0, weight_decay=0.0, wd_mult={})
    base.update(kw)
    return TrainConfig(max_steps=0, **base)


def test_sgd_examples():
    w = {"w": np.array([1.0])}
    sgd_step(w, {"w": np.array([0.1])}, _cfg(), {})
    assert w["w"][0] == pytest.approx(0.99, abs=1e-15)

    w = {"w": np.array([1.0])}
    sgd_step(w, {"w": np.array([0.0])}, _cfg(weight_decay=5e-4, wd_mult={"embedding": 10.0}), {}, groups={"w": "embedding"})
    assert w["w"][0] == pytest.approx(0.9995, abs=1e-15)

    # zero gradient, no decay, fresh state: nothing moves
    w = {"w": np.array([1.0, -2.0])}
    state = {}
    sgd_step(w, {"w": np.zeros(2)}, _cfg(momentum=0.9), state)
    np.testing.assert_array_equal(w["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state["velocity"]["w"], [0.0, 0.0])

    # warm state: velocity decays by the momentum factor
    state = {"velocity": {"w": np.array([1.0, 1.0])}}
    sgd_step(w, {"w": np.zeros(2)}, _cfg(momentum=0.9), state)
    np.testing.assert_allclose(state["velocity"]["w"], [0.9, 0.9], rtol=1e-15)


def test_sgd_rejects_nonfinite_gradients_without_touching_params():
    w = {"a": np.array([1.0]), "b": np.array([2.0])}
    with pytest.raises(NonFiniteGradient):
        sgd_step(w, {"a": np.array([0.1]), "b": np.array([np.inf])}, _cfg(), {})
    assert w["a"][0] == 1.0 and w["b"][0] == 2.0


def test_train_config_validation():
    spec = MarginLossSpec()
    with pytest.raises(ConfigInvalid):
        TrainConfig(max_steps=10, loss_stages=[LossStage(spec, 0, 5)])
    with pytest.raises(ConfigInvalid):
        TrainConfig(max_steps=10, loss_stages=[LossStage(spec, 0, 6), LossStage(spec, 5, 10)])
    with pytest.raises(ConfigInvalid):
        TrainConfig.single_stage(spec, 10, momentum=1.0)
    with pytest.raises(ConfigInvalid):
        TrainConfig.single_stage(spec, 10, lr_schedule=[(0, 0.0)])
    cfg = TrainConfig.single_stage(spec, 10, lr_schedule=[(0, 0.1), (5, 0.01)])
    assert cfg.lr_at(4) == 0.1 and cfg.lr_at(5) == 0.01


# -- training -----------------------------------------------------------------


def _small_task(seed=5):
    return gen_sphere_dataset(SphereDatasetSpec(classes=10, dim=8, samples_per_class=20, noise_sigma=0.1, seed=seed))


def test_train_zero_steps_leaves_model_unchanged():
    X, y = _small_task()
    net = dense_embedding_net(8, 16, 8, 10, seed=1)
    before = net.snapshot()
    h = train(net, (X, y), TrainConfig.single_stage(MarginLossSpec(), 0))
    assert len(h) == 0
    for k, v in net.named_parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_train_is_deterministic(tmp_path):
    X, y = _small_task()
    cfg = TrainConfig.single_stage(MarginLossSpec(), 60, batch_size=32, seed=9)
    a = train(dense_embedding_net(8, 16, 8, 10, seed=1), (X, y), cfg)
    b = train(dense_embedding_net(8, 16, 8, 10, seed=1), (X, y), cfg)
    assert a.rows() == b.rows()
    assert a.write_csv(tmp_path / "a.csv").read_bytes() == b.write_csv(tmp_path / "b.csv").read_bytes()


def test_weight_decay_zero_makes_wd_mult_irrelevant():
    X, y = _small_task()
    rows = []
    for mult in ({}, {"embedding": 10.0}, {"embedding": 0.0, "head": 3.0, "body": 7.0}):
        cfg = TrainConfig.single_stage(MarginLossSpec(), 40, batch_size=32, weight_decay=0.0, wd_mult=mult)
        rows.append(train(dense_embedding_net(8, 16, 8, 10, seed=2), (X, y), cfg).rows())
    assert rows[0] == rows[1] == rows[2]


def test_stage_switch_carries_parameters_bit_exactly():
    X, y = _small_task()
    ns, arc = MarginLossSpec("NSoftmax", s=64.0), MarginLossSpec("ArcFace", s=64.0, m=0.5)
    two = TrainConfig(max_steps=50, batch_size=32, loss_stages=[LossStage(ns, 0, 30), LossStage(arc, 30, 50)])
    seen = {}
    net = dense_embedding_net(8, 16, 8, 10, seed=3)
    h = train(net, (X, y), two, on_stage_start=lambda step, m: seen.__setitem__(step, m.snapshot()))
    assert sorted(seen) == [0, 30] and h.stage_boundaries == {0: "NSoftmax", 30: "ArcFace(m=0.5)"}
    ref = dense_embedding_net(8, 16, 8, 10, seed=3)
    train(ref, (X, y), TrainConfig(max_steps=30, batch_size=32, loss_stages=[LossStage(ns, 0, 30)]))
    for k, v in ref.named_parameters().items():
        assert np.array_equal(seen[30][k], v), k


def test_divergence_flag_on_nonfinite_loss():
    X, y = _small_task()
    net = dense_embedding_net(8, 16, 8, 10, seed=4)
    net.backbone.children[0][1].params["W"][0, 0] = np.inf
    h = train(net, (X, y), TrainConfig.single_stage(MarginLossSpec(), 20, batch_size=32))
    assert h.diverged and h.divergence_step == 0 and len(h) == 1
    assert h.summary()["divergence_step"] == 0


def test_convergence_smoke_plain_softmax_stage():
    X, y = _small_task()
    net = dense_embedding_net(8, 32, 8, 10, seed=6)
    cfg = TrainConfig.single_stage(MarginLossSpec("Softmax"), 300, batch_size=64)
    h = train(net, (X, y), cfg)
    assert not h.diverged
    assert accuracy(net, X, y, MarginLossSpec("Softmax")) >= 0.95


def test_adversarial_probe_examples():
    assert adversarial_gradient_probe(MarginLossSpec("LiArcFace", s=64, m=0.4), math.pi / 2) < 0
    assert adversarial_gradient_probe(MarginLossSpec("ArcFace", s=64, m=0.5), 3.0) > 0
    assert adversarial_gradient_probe(MarginLossSpec("ArcFace", s=64, m=0.5, arcface_clip=True), 3.0) <= 0
    for th in np.linspace(0.05, 3.1, 25):
        assert adversarial_gradient_probe(MarginLossSpec("LiArcFace", s=64, m=0.2), th) < 0
