"""Boxes, detections and labeled images.

Boxes are corner form ``(x1, y1, x2, y2)`` in continuous pixel coordinates with
the origin at the top-left corner, x to the right and y down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"box has no positive area: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clip(self, x_min: float, y_min: float, x_max: float, y_max: float) -> "Box | None":
        """Clip to a rectangle; ``None`` when nothing with positive area remains."""
        x1, y1 = max(self.x1, x_min), max(self.y1, y_min)
        x2, y2 = min(self.x2, x_max), min(self.y2, y_max)
        if x1 < x2 and y1 < y2:
            return Box(x1, y1, x2, y2)
        return None

    def inside(self, x_min: float, y_min: float, x_max: float, y_max: float) -> bool:
        return self.x1 >= x_min and self.y1 >= y_min and self.x2 <= x_max and self.y2 <= y_max


@dataclass(frozen=True, slots=True)
class Detection:
    box: Box
    class_id: int
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    def with_box(self, box: Box) -> "Detection":
        return replace(self, box=box)

    def to_json(self) -> dict:
        return {"box": list(self.box.as_tuple()), "class": int(self.class_id), "conf": float(self.confidence)}

    @classmethod
    def from_json(cls, rec: dict) -> "Detection":
        return cls(Box(*(float(v) for v in rec["box"])), int(rec["class"]), float(rec["conf"]))


@dataclass
class LabeledImage:
    """An ``(H, W, 3)`` float raster in [0, 1] plus its labels.

    Unlabeled target images carry an empty label list.
    """

    image: np.ndarray
    labels: list[Detection] = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 raster, got shape {self.image.shape}")
        h, w = self.image.shape[:2]
        for det in self.labels:
            if not det.box.inside(0, 0, w, h):
                raise InvalidBoxError(f"label {det.box} outside image {w}x{h}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(dets: Sequence[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 4))
    return np.array([d.box.as_tuple() for d in dets], dtype=np.float64)


# -- JSON-lines serialization: one record per image --------------------------


def detections_record(image_id: str, dets: Iterable[Detection]) -> str:
    return json.dumps({"image_id": image_id, "detections": [d.to_json() for d in dets]})


def parse_detections_record(line: str) -> tuple[str, list[Detection]]:
    rec = json.loads(line)
    return str(rec["image_id"]), [Detection.from_json(d) for d in rec["detections"]]


def write_jsonl(path, records: Iterable[tuple[str, Sequence[Detection]]]) -> None:
    from ..fsutil import atomic_open
    with atomic_open(path, "w") as fh:
        for image_id, dets in records:
            fh.write(detections_record(image_id, dets) + "\n")


def read_jsonl(path) -> Iterator[tuple[str, list[Detection]]]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield parse_detections_record(line)
