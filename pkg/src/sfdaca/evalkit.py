"""AP@0.5 / mAP evaluation with greedy IoU matching and all-point interpolation."""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .core.boxes import Detection, LabeledImage, boxes_to_array


@dataclass
class EvalResult:
    ap: dict[int, float]
    mAP: float
    tp: dict[int, int]
    fp: dict[int, int]
    fn: dict[int, int]
    pr_curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d = {k: ({str(c): v for c, v in val.items()} if isinstance(val, dict) else val) for k, val in d.items()}
        return json.dumps(d, indent=2)

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class", "recall", "precision"])
            for c, pts in sorted(self.pr_curves.items()):
                for r, p in pts:
                    wr.writerow([c, f"{r:.6f}", f"{p:.6f}"])


def match_detections(preds: Sequence[Detection], gts: Sequence[Detection], iou_thr: float = 0.5) -> np.ndarray:
    """TP flags for ``preds`` (single image, single class), in the input order.

    Predictions are visited by descending confidence; each takes the unmatched
    ground truth of highest IoU at or above the threshold.
    """
    flags = np.zeros(len(preds), dtype=bool)
    if not preds or not gts:
        return flags
    ious = _accel.iou_matrix(boxes_to_array(preds), boxes_to_array(gts))
    order = np.argsort([-p.confidence for p in preds], kind="stable")
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[j] = True
            flags[i] = True
    return flags


def precision_recall(flags, confidences, n_gt):
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    f = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp, dtype=float)
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags, confidences, n_gt: int) -> float | None:
    """All-point interpolated AP; ``None`` when the class has no ground truth."""
    if n_gt <= 0:
        return None
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    f = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(f)
    precision = tp / np.arange(1, len(f) + 1)
    # rank holding the precision envelope (suffix maximum) at every rank
    best = np.arange(len(f))
    for k in range(len(f) - 2, -1, -1):
        if precision[best[k + 1]] > precision[k]:
            best[k] = best[k + 1]
    # recall rises by exactly 1/n_gt at each TP; summing in rationals keeps
    # results like 5/6 exact
    area = sum((Fraction(int(tp[j]), int(j) + 1) for j in best[f]), Fraction(0))
    return float(area / n_gt)


def evaluate_predictions(predictions: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[Detection]],
                         num_classes: int | None = None, iou_thr: float = 0.5) -> EvalResult:
    """Aggregate per-class matching over images, then AP per class and their mean.

    mAP averages over classes that appear in the ground truth.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth differ in length")
    classes = set()
    for gts in ground_truth:
        classes.update(g.class_id for g in gts)
    if num_classes is not None:
        classes_all = range(num_classes)
    else:
        classes_all = sorted(classes)
    flags = {c: [] for c in classes_all}
    confs = {c: [] for c in classes_all}
    n_gt = {c: 0 for c in classes_all}
    for preds, gts in zip(predictions, ground_truth):
        for c in classes_all:
            p_c = [p for p in preds if p.class_id == c]
            g_c = [g for g in gts if g.class_id == c]
            n_gt[c] += len(g_c)
            if p_c:
                flags[c].extend(match_detections(p_c, g_c, iou_thr))
                confs[c].extend(p.confidence for p in p_c)

    ap, tp, fp, fn, curves = {}, {}, {}, {}, {}
    for c in classes_all:
        f = np.asarray(flags[c], dtype=bool)
        tp[c] = int(f.sum())
        fp[c] = int((~f).sum())
        fn[c] = n_gt[c] - tp[c]
        a = average_precision(f, confs[c], n_gt[c])
        if a is None:
            continue
        ap[c] = a
        if len(f):
            r, p = precision_recall(f, confs[c], n_gt[c])
            curves[c] = list(zip(r.tolist(), p.tolist()))
        else:
            curves[c] = []
    m = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalResult(ap=ap, mAP=m, tp=tp, fp=fp, fn=fn, pr_curves=curves)


def evaluate(model, dataset: Sequence[LabeledImage], iou_thr: float = 0.5, batch_size: int = 32) -> EvalResult:
    """Run ``model`` over a labeled dataset and score it.

    Models exposing ``infer_batch`` are run in batches of same-size images.
    """
    preds = predict_all(model, dataset, batch_size)
    return evaluate_predictions(preds, [d.labels for d in dataset], getattr(model, "num_classes", None), iou_thr)


def predict_all(model, dataset: Sequence[LabeledImage], batch_size: int = 32) -> list[list[Detection]]:
    batched: Callable | None = getattr(model, "infer_batch", None)
    if batched is None:
        return [model.infer(d.image) for d in dataset]
    out = []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        if len({d.image.shape for d in chunk}) == 1:
            out.extend(batched(np.stack([d.image for d in chunk])))
        else:
            out.extend(model.infer(d.image) for d in chunk)
    return out
