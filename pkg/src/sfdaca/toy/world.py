"""Procedural two-domain detection dataset.

Source images are clean renderings of simple filled shapes on a smooth
textured background. Target images are the same scenes passed through a
photometric domain shift (depth-dependent fog, blur or a color cast), so
labels are identical between domains for the same seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..fsutil import atomic_write_text
from ..imaging import gaussian_blur
from ..core.boxes import Box, Detection, LabeledImage, read_jsonl, write_jsonl

CLASS_NAMES = ("square", "circle", "triangle")
SHIFT_KINDS = ("none", "fog", "blur", "color_shift")


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    min_objects: int = 1
    max_objects: int = 6
    num_classes: int = 3
    min_size: float = 12.0
    max_size: float = 32.0
    texture_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not 0 < self.min_size <= self.max_size < min(self.height, self.width):
            raise ValueError("object size range must fit inside the image")


@dataclass
class DomainShift:
    kind: str = "none"
    severity: float = 0.0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must be in [0, 1]")
        if self.kind == "none" and self.severity != 0.0:
            raise ValueError("kind 'none' requires severity 0")


# fog: transmission exp(-FOG_DENSITY * severity * depth) toward a white airlight
FOG_DENSITY = 2.0
FOG_AIRLIGHT = 0.85
SENSOR_NOISE = 0.01


def _upsample(grid, h, w):
    """Bilinear upsampling of a small (gh, gw, c) grid to (h, w, c)."""
    gh, gw = grid.shape[:2]
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _shape_mask(kind, box, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    x1, y1, x2, y2 = box
    if kind == 0:
        return (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    if kind == 1:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    # upward triangle with apex at the top-center and base on the bottom edge
    cx = (x1 + x2) / 2
    frac = (py - y1) / (y2 - y1)
    half = frac * (x2 - x1) / 2
    return (py >= y1) & (py <= y2) & (np.abs(px - cx) <= half)


def render_scene(spec: SceneSpec, rng: np.random.Generator):
    """One clean image, its labels and its synthetic depth map."""
    h, w = spec.height, spec.width
    base = rng.uniform(0.25, 0.65, size=(5, 5, 3))
    img = _upsample(base, h, w) + rng.normal(0.0, 0.02, size=(h, w, 3))

    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[tuple[float, float, float, float]] = []
    labels = []
    attempts = 0
    while len(boxes) < n and attempts < 200:
        attempts += 1
        bw = rng.uniform(spec.min_size, spec.max_size)
        bh = float(np.clip(bw * rng.uniform(0.75, 1.33), spec.min_size, spec.max_size))
        x1 = rng.uniform(0, w - bw)
        y1 = rng.uniform(0, h - bh)
        cand = (x1, y1, x1 + bw, y1 + bh)
        if any(cand[0] < b[2] + 2 and b[0] < cand[2] + 2 and cand[1] < b[3] + 2 and b[1] < cand[3] + 2
               for b in boxes):
            continue
        cls = int(rng.integers(spec.num_classes))
        mask = _shape_mask(cls, cand, h, w)
        if not mask.any():
            continue
        local = img[mask].mean(axis=0)
        for _ in range(20):
            color = rng.uniform(0.0, 1.0, size=3)
            if np.abs(color - local).max() >= 0.3:
                break
        img[mask] = color + rng.normal(0.0, 0.02, size=(int(mask.sum()), 3))
        boxes.append(cand)
        labels.append(Detection(Box(*cand), cls, 1.0))

    # depth grows toward the top of the frame, with a gently varying horizon
    ramp = 1.0 - (np.arange(h) + 0.5) / h
    wobble = _upsample(rng.normal(0.0, 0.08, size=(3, 4, 1)), h, w)[..., 0]
    depth = np.clip(ramp[:, None] + wobble, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0), labels, depth


def apply_shift(img, depth, shift: DomainShift, rng: np.random.Generator):
    if shift.kind == "none" or shift.severity == 0.0:
        return img
    s = shift.severity
    if shift.kind == "fog":
        t = np.exp(-FOG_DENSITY * s * depth)[..., None]
        out = img * t + FOG_AIRLIGHT * (1.0 - t)
        out = out + rng.normal(0.0, SENSOR_NOISE, size=img.shape)
    elif shift.kind == "blur":
        out = gaussian_blur(img, 3.0 * s)
    else:
        gain = 1.0 + s * np.array([0.5, -0.1, -0.4])
        out = img * gain + s * np.array([0.05, 0.0, -0.1])
    return np.clip(out, 0.0, 1.0)


def generate_dataset(spec: SceneSpec, shift: DomainShift, n_images: int, seed: int) -> list[LabeledImage]:
    """Deterministic under ``seed``; the scene (and so the labels) ignores ``shift``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = []
    for i in range(n_images):
        ss = np.random.SeedSequence([seed, spec.texture_seed, i])
        scene_rng, shift_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        img, labels, depth = render_scene(spec, scene_rng)
        img = apply_shift(img, depth, shift, shift_rng)
        out.append(LabeledImage(img, labels, image_id=f"{seed}-{i:05d}"))
    return out


def strip_labels(dataset: list[LabeledImage]) -> list[LabeledImage]:
    """Unlabeled copy of a dataset (what the adaptation loop is allowed to see)."""
    return [LabeledImage(d.image, [], d.image_id) for d in dataset]


# -- on-disk format -----------------------------------------------------------


def save_dataset(path, dataset: list[LabeledImage], spec: SceneSpec, shift: DomainShift, seed: int) -> None:
    """One ``.npy`` raster per image, ``labels.jsonl`` and an ``index.json`` with spec, shift and seed.

    Rasters are stored at full precision so a reload is bit-identical.
    """
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for item in dataset:
        np.save(root / "images" / f"{item.image_id}.npy", item.image, allow_pickle=False)
    write_jsonl(root / "labels.jsonl", ((d.image_id, d.labels) for d in dataset))
    index = {"spec": asdict(spec), "shift": asdict(shift), "seed": seed, "n_images": len(dataset)}
    atomic_write_text(root / "index.json", json.dumps(index, indent=2))


def load_dataset(path) -> tuple[list[LabeledImage], dict]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    out = []
    for image_id, labels in read_jsonl(root / "labels.jsonl"):
        arr = np.load(root / "images" / f"{image_id}.npy", allow_pickle=False)
        out.append(LabeledImage(arr, labels, image_id))
    return out, index
