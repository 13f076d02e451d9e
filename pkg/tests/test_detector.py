import numpy as np
import pytest

from sfdaca.core.boxes import Box, Detection, iou
from sfdaca.core.model import (ArchitectureMismatchError, DimensionMismatchError, EmptyTargetsError, clone_model,
                               detection_loss, get_parameters, infer, parameter_checksum, same_architecture,
                               set_parameters)
from sfdaca.core.optim import SGD, Adam
from sfdaca.toy.detector import ToyDetector

TARGETS = [Detection(Box(10, 10, 40, 30), 0), Detection(Box(60, 70, 90, 110), 2)]


def finite_difference_errors(model, image, targets, n, rng, h=1e-4):
    _, grads = detection_loss(model, image, targets)
    errs = []
    for _ in range(n):
        pi = int(rng.integers(len(model.parameters)))
        p = model.parameters[pi]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        lp = model.loss_value(image, targets)
        p[idx] = old - h
        lm = model.loss_value(image, targets)
        p[idx] = old
        fd = (lp - lm) / (2 * h)
        an = grads[pi][idx]
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return errs


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    model = ToyDetector(seed=1, dtype="float64")
    image = rng.random((128, 128, 3))
    errs = finite_difference_errors(model, image, TARGETS, 40, rng)
    assert max(errs) < 1e-2


def test_head_gradients_match_finite_differences():
    # the head is where most of the loss terms meet; check it densely
    rng = np.random.default_rng(5)
    model = ToyDetector(seed=2, dtype="float64")
    image = rng.random((128, 128, 3))
    _, grads = detection_loss(model, image, TARGETS)
    w = model.parameters[-2]
    h = 1e-5
    for idx in [(int(rng.integers(w.shape[0])), j) for j in range(w.shape[1])]:
        old = w[idx]
        w[idx] = old + h
        lp = model.loss_value(image, TARGETS)
        w[idx] = old - h
        lm = model.loss_value(image, TARGETS)
        w[idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grads[-2][idx]) <= 1e-2 * max(abs(fd), abs(grads[-2][idx]), 1e-8)


def test_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(1)
    model = ToyDetector(seed=0)
    image = rng.random((128, 128, 3))
    opt = Adam(model.parameters, lr=3e-3)
    first = model.loss_value(image, TARGETS)
    for _ in range(200):
        _, g = model.loss_and_grad(image, TARGETS)
        opt.step(g)
    assert model.loss_value(image, TARGETS) < 0.2 * first


def test_overfits_single_image():
    rng = np.random.default_rng(2)
    image = np.full((64, 64, 3), 0.4) + 0.02 * rng.standard_normal((64, 64, 3))
    image[20:44, 14:38] = (0.9, 0.1, 0.1)
    target = Detection(Box(14, 20, 38, 44), 1)
    model = ToyDetector(seed=0)
    opt = Adam(model.parameters, lr=3e-3)
    for _ in range(150):
        _, g = model.loss_and_grad(image, [target])
        opt.step(g)
    dets = model.infer(image)
    assert dets
    best = max(dets, key=lambda d: d.confidence)
    assert best.class_id == 1
    assert iou(best.box, target.box) >= 0.5


def test_infer_is_deterministic_and_well_formed():
    rng = np.random.default_rng(3)
    model = ToyDetector(seed=4, score_floor=0.0)
    image = rng.random((128, 128, 3))
    a, b = infer(model, image), infer(model, image)
    assert a == b
    confs = [d.confidence for d in a]
    assert confs == sorted(confs, reverse=True)
    for d in a:
        assert 0.0 <= d.confidence <= 1.0
        assert d.box.inside(0, 0, 128, 128)
        assert 0 <= d.class_id < 3
    assert model.infer_batch(image[None])[0] == a


def test_same_seed_same_parameters():
    assert parameter_checksum(ToyDetector(seed=7)) == parameter_checksum(ToyDetector(seed=7))
    assert parameter_checksum(ToyDetector(seed=7)) != parameter_checksum(ToyDetector(seed=8))


def test_clone_is_independent():
    model = ToyDetector(seed=0)
    twin = clone_model(model)
    assert same_architecture(model, twin)
    before = parameter_checksum(model)
    SGD(twin.parameters, lr=1e-2).step([np.ones_like(p) for p in twin.parameters])
    assert parameter_checksum(model) == before
    assert parameter_checksum(twin) != before


def test_dimension_errors():
    model = ToyDetector()
    with pytest.raises(DimensionMismatchError):
        model.infer(np.zeros((100, 100, 3)))
    with pytest.raises(DimensionMismatchError):
        model.infer(np.zeros((64, 64)))


def test_empty_targets_and_out_of_bounds_targets():
    model = ToyDetector()
    with pytest.raises(EmptyTargetsError):
        detection_loss(model, np.zeros((64, 64, 3)), [])
    with pytest.raises(ValueError):
        detection_loss(model, np.zeros((64, 64, 3)), [Detection(Box(50, 50, 70, 60), 0)])


def test_batch_loss_is_mean_of_single_losses():
    rng = np.random.default_rng(4)
    model = ToyDetector(seed=0, dtype="float64")
    imgs = rng.random((2, 64, 64, 3))
    tg = [[Detection(Box(4, 4, 20, 20), 0)], [Detection(Box(30, 30, 60, 50), 1)]]
    lb, gb = model.loss_and_grad_batch(imgs, tg)
    singles = [model.loss_and_grad(imgs[i], tg[i]) for i in range(2)]
    assert lb == pytest.approx((singles[0][0] + singles[1][0]) / 2, rel=1e-10)
    for j in range(len(gb)):
        np.testing.assert_allclose(gb[j], (singles[0][1][j] + singles[1][1][j]) / 2, rtol=1e-8, atol=1e-12)


def test_set_parameters_validates_shapes():
    model = ToyDetector()
    vals = get_parameters(model)
    set_parameters(model, vals)
    with pytest.raises(ArchitectureMismatchError):
        set_parameters(model, vals[:-1])
    with pytest.raises(ArchitectureMismatchError):
        set_parameters(model, [np.zeros(1)] * len(vals))


def test_init_kwargs_rebuild_same_architecture():
    model = ToyDetector(seed=3, channels=(4, 8, 8), strides=(2, 2, 2), loss_scale=0.5)
    rebuilt = ToyDetector(**model.init_kwargs())
    assert rebuilt.architecture == model.architecture
    assert parameter_checksum(rebuilt) == parameter_checksum(model)
