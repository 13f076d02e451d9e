"""Detect, augment, compose: confident-region mining and composite construction.

The image is split into four quadrants at ``(floor(W/2), floor(H/2))``. A
detection belongs to the quadrant containing its box center, with centers on
a dividing line going left/top. The quadrant with the highest mean confidence
is cropped, augmented four times independently and tiled into a 2x2 composite.

Label geometry inside this module lives on a 1/1024-pixel lattice so that
translations and flips are exact in floating point (a flip applied twice
returns the original coordinates bit for bit).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import imaging
from .core.boxes import Box, Detection

LATTICE = 1024.0


def snap(v: float) -> float:
    return round(v * LATTICE) / LATTICE


def _snap_box(x1, y1, x2, y2) -> Box | None:
    x1, y1, x2, y2 = snap(x1), snap(y1), snap(x2), snap(y2)
    if x1 < x2 and y1 < y2:
        return Box(x1, y1, x2, y2)
    return None


class QuadrantId(enum.IntEnum):
    """Quadrants in tie-break priority order."""

    top_left = 0
    top_right = 1
    bottom_left = 2
    bottom_right = 3


def split_point(image_w: int, image_h: int) -> tuple[int, int]:
    return image_w // 2, image_h // 2


def quadrant_bounds(q: QuadrantId, image_w: int, image_h: int) -> tuple[int, int, int, int]:
    """Pixel rectangle ``(x0, y0, x1, y1)`` of a quadrant; odd remainders go right/bottom."""
    mx, my = split_point(image_w, image_h)
    col, row = q % 2, q // 2
    x0, x1 = (0, mx) if col == 0 else (mx, image_w)
    y0, y1 = (0, my) if row == 0 else (my, image_h)
    return x0, y0, x1, y1


def assign_quadrant(det: Detection, image_w: int, image_h: int) -> QuadrantId:
    cx, cy = det.box.center
    mx, my = split_point(image_w, image_h)
    col = 0 if cx <= mx else 1
    row = 0 if cy <= my else 1
    return QuadrantId(2 * row + col)


@dataclass
class RegionScores:
    mean_confidence: dict[QuadrantId, float | None]
    detection_count: dict[QuadrantId, int]


def _group(dets, image_w, image_h):
    groups = {q: [] for q in QuadrantId}
    for d in dets:
        groups[assign_quadrant(d, image_w, image_h)].append(d)
    return groups


def score_regions(dets: Sequence[Detection], image_w: int, image_h: int) -> RegionScores:
    groups = _group(dets, image_w, image_h)
    means = {q: (math.fsum(d.confidence for d in g) / len(g) if g else None) for q, g in groups.items()}
    return RegionScores(means, {q: len(g) for q, g in groups.items()})


@dataclass
class RegionSelection:
    quadrant: QuadrantId
    crop: np.ndarray
    labels: list[Detection]
    offset: tuple[int, int] = (0, 0)


def select_confident_region(image: np.ndarray, dets: Sequence[Detection]) -> RegionSelection | None:
    """Crop the quadrant with the highest mean detection confidence.

    Means are compared as exact rationals so that equal means resolve by the
    fixed priority top-left > top-right > bottom-left > bottom-right.
    Returns ``None`` when no quadrant holds a detection.
    """
    h, w = image.shape[:2]
    groups = _group(dets, w, h)
    best, best_mean = None, None
    for q in QuadrantId:
        g = groups[q]
        if not g:
            continue
        mean = sum((Fraction(d.confidence) for d in g), Fraction(0)) / len(g)
        if best_mean is None or mean > best_mean:
            best, best_mean = q, mean
    if best is None:
        return None
    x0, y0, x1, y1 = quadrant_bounds(best, w, h)
    crop = image[y0:y1, x0:x1].copy()
    labels = []
    for d in groups[best]:
        b = d.box
        nb = _snap_box(max(b.x1 - x0, 0.0), max(b.y1 - y0, 0.0), min(b.x2 - x0, x1 - x0), min(b.y2 - y0, y1 - y0))
        if nb is not None:
            labels.append(d.with_box(nb))
    if not labels:
        return None
    return RegionSelection(best, crop, labels, (x0, y0))


# -- augmentations -------------------------------------------------------------

AUGMENT_KINDS = ("horizontal_flip", "scale_jitter", "color_jitter", "grayscale", "gaussian_blur")
PHOTOMETRIC = frozenset({"color_jitter", "grayscale", "gaussian_blur"})


@dataclass
class AugmentConfig:
    kinds: tuple[str, ...] = AUGMENT_KINDS
    probability: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.25)
    color_range: tuple[float, float] = (0.6, 1.4)
    blur_max_sigma: float = 3.0
    min_box_area: float = 16.0
    pad_value: float = 0.5

    def __post_init__(self):
        unknown = set(self.kinds) - set(AUGMENT_KINDS)
        if unknown:
            raise ValueError(f"unknown augmentation kinds {sorted(unknown)}")
        self.kinds = tuple(self.kinds)
        self.scale_range = tuple(self.scale_range)
        self.color_range = tuple(self.color_range)
        lo, hi = self.scale_range
        if not 0.75 <= lo <= hi <= 1.25:
            raise ValueError("scale_range must lie within [0.75, 1.25]")
        lo, hi = self.color_range
        if not 0.6 <= lo <= hi <= 1.4:
            raise ValueError("color_range must lie within [0.6, 1.4]")
        if not 0 < self.blur_max_sigma <= 3.0:
            raise ValueError("blur_max_sigma must lie in (0, 3]")


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        p = self.params
        if self.kind == "scale_jitter" and not 0.75 <= p["factor"] <= 1.25:
            raise ValueError("scale factor outside [0.75, 1.25]")
        if self.kind == "gaussian_blur" and not 0 < p["sigma"] <= 3.0:
            raise ValueError("blur sigma outside (0, 3]")
        if self.kind == "color_jitter":
            for key in ("brightness", "contrast", "saturation"):
                if not 0.6 <= p[key] <= 1.4:
                    raise ValueError(f"color jitter {key} outside [0.6, 1.4]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, rec: dict) -> "AugmentOp":
        return cls(rec["kind"], dict(rec.get("params", {})), int(rec.get("seed", 0)))


def sample_augment_chain(rng: np.random.Generator, config: AugmentConfig | None = None) -> list[AugmentOp]:
    """Each enabled kind is included independently with ``config.probability``."""
    cfg = config or AugmentConfig()
    chain = []
    for kind in AUGMENT_KINDS:
        # draw for every kind so enabling/disabling one does not shift the others
        include = rng.random() < cfg.probability
        u = rng.random(3)
        seed = int(rng.integers(2**31 - 1))
        if not include or kind not in cfg.kinds:
            continue
        if kind == "scale_jitter":
            lo, hi = cfg.scale_range
            params = {"factor": float(lo + (hi - lo) * u[0])}
        elif kind == "color_jitter":
            lo, hi = cfg.color_range
            params = {k: float(lo + (hi - lo) * v) for k, v in zip(("brightness", "contrast", "saturation"), u)}
        elif kind == "gaussian_blur":
            params = {"sigma": float(cfg.blur_max_sigma * (1.0 - u[0]))}
        else:
            params = {}
        chain.append(AugmentOp(kind, params, seed))
    return chain


def _flip(crop, labels):
    w = crop.shape[1]
    out = []
    for d in labels:
        b = d.box
        out.append(d.with_box(Box(w - b.x2, b.y1, w - b.x1, b.y2)))
    return crop[:, ::-1].copy(), out


def _scale(crop, labels, factor, min_area, pad_value):
    h, w = crop.shape[:2]
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    sy, sx = nh / h, nw / w
    big = imaging.resize_bilinear(crop, nh, nw)
    out = np.full_like(crop, pad_value)
    # center-crop or center-pad back to (h, w); (dx, dy) maps scaled -> output coordinates
    if nw >= w:
        ox = (nw - w) // 2
        src_x, dst_x, dx = slice(ox, ox + w), slice(0, w), -ox
    else:
        px = (w - nw) // 2
        src_x, dst_x, dx = slice(0, nw), slice(px, px + nw), px
    if nh >= h:
        oy = (nh - h) // 2
        src_y, dst_y, dy = slice(oy, oy + h), slice(0, h), -oy
    else:
        py = (h - nh) // 2
        src_y, dst_y, dy = slice(0, nh), slice(py, py + nh), py
    out[dst_y, dst_x] = big[src_y, src_x]
    kept = []
    for d in labels:
        b = d.box
        x1, y1, x2, y2 = b.x1 * sx + dx, b.y1 * sy + dy, b.x2 * sx + dx, b.y2 * sy + dy
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        if not (0 <= cx <= w and 0 <= cy <= h):
            continue
        nb = _snap_box(max(x1, 0.0), max(y1, 0.0), min(x2, float(w)), min(y2, float(h)))
        if nb is None or nb.area < min_area:
            continue
        kept.append(d.with_box(nb))
    return out, kept


def apply_augment(op: AugmentOp, crop: np.ndarray, labels: Sequence[Detection],
                  min_box_area: float = 16.0, pad_value: float = 0.5) -> tuple[np.ndarray, list[Detection]]:
    labels = list(labels)
    if op.kind == "horizontal_flip":
        return _flip(crop, labels)
    if op.kind == "scale_jitter":
        return _scale(crop, labels, op.params["factor"], min_box_area, pad_value)
    if op.kind == "color_jitter":
        p = op.params
        return imaging.color_jitter(crop, p["brightness"], p["contrast"], p["saturation"]), labels
    if op.kind == "grayscale":
        return imaging.to_grayscale(crop), labels
    return np.clip(imaging.gaussian_blur(crop, op.params["sigma"]), 0.0, 1.0), labels


def apply_chain(chain: Sequence[AugmentOp], crop, labels, config: AugmentConfig | None = None):
    cfg = config or AugmentConfig()
    img, labs = crop, list(labels)
    for op in chain:
        img, labs = apply_augment(op, img, labs, cfg.min_box_area, cfg.pad_value)
    return img, labs


@dataclass
class CompositePackage:
    image: np.ndarray
    labels: list[Detection]
    provenance: list[list[AugmentOp]]
    slot_label_counts: list[int] = field(default_factory=list)

    def provenance_json(self) -> str:
        return json.dumps([[op.to_json() for op in chain] for chain in self.provenance])


def compose(selection: RegionSelection, chains: Sequence[Sequence[AugmentOp]],
            config: AugmentConfig | None = None) -> CompositePackage | None:
    """Tile four augmented copies of the crop as TL, TR, BL, BR.

    Returns ``None`` when augmentation dropped every label in every slot.
    """
    if len(chains) != 4:
        raise ValueError("compose needs exactly four augmentation chains")
    ch, cw = selection.crop.shape[:2]
    canvas = np.empty((2 * ch, 2 * cw, selection.crop.shape[2]), dtype=np.float64)
    labels, counts = [], []
    for slot, chain in enumerate(chains):
        r, c = divmod(slot, 2)
        img, labs = apply_chain(chain, selection.crop, selection.labels, config)
        canvas[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw] = img
        labels.extend(d.with_box(d.box.translate(c * cw, r * ch)) for d in labs)
        counts.append(len(labs))
    if not labels:
        return None
    return CompositePackage(canvas, labels, [list(ch_) for ch_ in chains], counts)


def provenance_from_json(text: str) -> list[list[AugmentOp]]:
    return [[AugmentOp.from_json(op) for op in chain] for chain in json.loads(text)]
