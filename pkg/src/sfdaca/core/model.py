"""The detector boundary.

Adaptation code talks to a detector only through :func:`infer`,
:func:`detection_loss`, :func:`clone_model` and the ``parameters`` list. Any
detector that subclasses :class:`DetectorModel` plugs into the adaptation loop.

A model instance is single-writer. Concurrent ``infer`` calls on one instance
are not supported (the toy detector caches activations); clone instead.
"""

from __future__ import annotations

import abc
import copy
import hashlib
from typing import Sequence

import numpy as np

from .boxes import Detection


class DimensionMismatchError(ValueError):
    """The raster shape is not accepted by the model."""


class EmptyTargetsError(ValueError):
    """A detection loss was requested with no targets."""


class ArchitectureMismatchError(ValueError):
    pass


class DetectorModel(abc.ABC):
    """Parameterized detector: inference plus a differentiable training loss."""

    num_classes: int
    parameters: list[np.ndarray]

    @property
    @abc.abstractmethod
    def architecture(self) -> dict:
        """Hashable-by-value description; equal descriptors imply equal parameter shapes."""

    @abc.abstractmethod
    def infer(self, image: np.ndarray) -> list[Detection]:
        ...

    @abc.abstractmethod
    def loss_and_grad(self, image: np.ndarray, targets: Sequence[Detection]) -> tuple[float, list[np.ndarray]]:
        """Training loss on one image and its gradient w.r.t. every parameter array."""

    def buffers(self) -> list[np.ndarray]:
        """Non-learned state that must follow the parameters (running statistics)."""
        return []


def infer(model: DetectorModel, image: np.ndarray) -> list[Detection]:
    return model.infer(image)


def detection_loss(model: DetectorModel, image: np.ndarray, targets: Sequence[Detection]) -> tuple[float, list[np.ndarray]]:
    if len(targets) == 0:
        raise EmptyTargetsError("detection_loss needs at least one target")
    h, w = image.shape[:2]
    for t in targets:
        if not t.box.inside(0, 0, w, h):
            raise ValueError(f"target box {t.box} outside image {w}x{h}")
    return model.loss_and_grad(image, targets)


def clone_model(model: DetectorModel) -> DetectorModel:
    return copy.deepcopy(model)


def same_architecture(a: DetectorModel, b: DetectorModel) -> bool:
    return a.architecture == b.architecture


def state_arrays(model: DetectorModel) -> list[np.ndarray]:
    """Parameters followed by buffers, the full set an EMA must cover."""
    return list(model.parameters) + list(model.buffers())


def parameter_checksum(model: DetectorModel) -> str:
    h = hashlib.sha256()
    for arr in state_arrays(model):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def get_parameters(model: DetectorModel) -> list[np.ndarray]:
    return [p.copy() for p in model.parameters]


def set_parameters(model: DetectorModel, values: Sequence[np.ndarray]) -> None:
    if len(values) != len(model.parameters):
        raise ArchitectureMismatchError("parameter count mismatch")
    for p, v in zip(model.parameters, values):
        if p.shape != np.shape(v):
            raise ArchitectureMismatchError(f"shape {np.shape(v)} != {p.shape}")
        p[...] = v
