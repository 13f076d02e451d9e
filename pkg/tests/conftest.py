import numpy as np
import pytest

from sfdaca.core.model import DetectorModel
from sfdaca.toy.detector import ToyDetector
from sfdaca.toy.train import pretrain
from sfdaca.toy.world import DomainShift, SceneSpec, generate_dataset, strip_labels

TINY_SCENE = SceneSpec(height=64, width=64, min_objects=1, max_objects=3, min_size=12, max_size=24)
TINY_DETECTOR = dict(channels=(6, 12, 16, 16), strides=(2, 2, 2, 1))


class StubDetector(DetectorModel):
    """Scripted detector: fixed detections, a smooth closed-form loss."""

    num_classes = 3

    def __init__(self, dets=(), tag="stub", loss_offset=0.0):
        self.parameters = [np.arange(4, dtype=np.float64) / 10]
        self.dets = list(dets)
        self.tag = tag
        self.loss_offset = loss_offset
        self.calls = []

    @property
    def architecture(self):
        return {"name": "stub"}

    def infer(self, image):
        return list(self.dets)

    def loss_and_grad(self, image, targets):
        self.calls.append((image.shape, len(targets)))
        w = self.parameters[0]
        loss = len(targets) * (1.0 + float(image.mean())) + float(w @ w) + self.loss_offset
        return loss, [2 * w + len(targets) * np.ones_like(w)]


@pytest.fixture(scope="session")
def tiny_world():
    source = generate_dataset(TINY_SCENE, DomainShift(), 160, seed=11)
    target_eval = generate_dataset(TINY_SCENE, DomainShift("fog", 0.8), 40, seed=12)
    target = strip_labels(generate_dataset(TINY_SCENE, DomainShift("fog", 0.8), 24, seed=13))
    return source, target, target_eval


@pytest.fixture(scope="session")
def tiny_source_model(tiny_world):
    source, _, _ = tiny_world
    model = ToyDetector(seed=0, **TINY_DETECTOR)
    model, _ = pretrain(model, source, epochs=20, lr=5e-3, batch_size=8, seed=0)
    return model
