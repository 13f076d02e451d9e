"""Source-free teacher-student adaptation with confident-region composites.

Per target image the student detects, keeps its confident detections, crops
the most confident quadrant and trains on a 2x2 augmented composite of it
(self-training loss). The frozen teacher labels the full image and the
student trains against those labels as well (consistency loss). The two
losses are summed with unit weights for a single momentum-SGD step on the
student. The teacher follows the student by an exponential moving average
once per epoch.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import daca
from .core.boxes import Detection, LabeledImage
from .core.model import (ArchitectureMismatchError, DetectorModel, detection_loss, infer, same_architecture,
                         state_arrays)
from .core.optim import SGD

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "iter", "l_s", "l_t", "l_tot", "skipped", "map_eval")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    selection_confidence: float = 0.5
    alpha: float = 0.9
    epochs: int = 12
    learning_rate: float = 1e-3
    momentum: float = 0.9
    enable_daca: bool = True
    enable_teacher: bool = True
    seed: int = 0
    eval_every: int = 0
    augment: daca.AugmentConfig = field(default_factory=daca.AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = daca.AugmentConfig(**self.augment)
        if not 0.0 < self.selection_confidence < 1.0:
            raise ValueError("selection_confidence must lie in (0, 1)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.eval_every < 0:
            raise ValueError("eval_every must be non-negative")


@dataclass
class IterationRecord:
    l_s: float | None
    l_t: float | None
    l_tot: float
    skipped: bool


@dataclass
class EpochStats:
    epoch: int
    l_s: float | None
    l_t: float | None
    l_tot: float | None
    skipped: int
    map_eval: float | None = None


@dataclass
class AdaptState:
    student: DetectorModel
    teacher: DetectorModel
    config: AdaptConfig
    optimizer: SGD
    rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    skipped: int = 0
    history: list[EpochStats] = field(default_factory=list)
    metrics: "MetricsLog" = field(default_factory=lambda: MetricsLog())


def new_state(student: DetectorModel, teacher: DetectorModel, config: AdaptConfig) -> AdaptState:
    if not same_architecture(student, teacher):
        raise ArchitectureMismatchError("student and teacher architectures differ")
    opt = SGD(student.parameters, lr=config.learning_rate, momentum=config.momentum)
    return AdaptState(student, teacher, config, opt, np.random.default_rng(config.seed))


def filter_pseudo_labels(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    return [d for d in dets if d.confidence >= threshold]


def build_composite(image: np.ndarray, dets: Sequence[Detection], rng: np.random.Generator,
                    augment: daca.AugmentConfig | None = None) -> daca.CompositePackage | None:
    selection = daca.select_confident_region(image, dets)
    if selection is None:
        return None
    chains = [daca.sample_augment_chain(rng, augment) for _ in range(4)]
    return daca.compose(selection, chains, augment)


def student_step(state: AdaptState, target_image: np.ndarray, student_dets: Sequence[Detection] | None = None):
    """Self-training loss on the composite; ``None`` marks a skipped step.

    ``student_dets`` lets the caller pass in the student's detections on the
    target image when it already has them.
    """
    cfg = state.config
    if student_dets is None:
        student_dets = infer(state.student, target_image)
    confident = filter_pseudo_labels(student_dets, cfg.selection_confidence)
    if not confident:
        return None
    package = build_composite(target_image, confident, state.rng, cfg.augment)
    if package is None:
        return None
    return detection_loss(state.student, package.image, package.labels)


def teacher_step(state: AdaptState, target_image: np.ndarray):
    """Consistency loss of the student against the teacher's confident detections."""
    targets = filter_pseudo_labels(infer(state.teacher, target_image), state.config.selection_confidence)
    if not targets:
        return None
    return detection_loss(state.student, target_image, targets)


def total_step(state: AdaptState, target_image: np.ndarray) -> IterationRecord:
    cfg = state.config
    s = student_step(state, target_image) if cfg.enable_daca else None
    t = teacher_step(state, target_image) if cfg.enable_teacher else None
    state.iteration += 1
    if s is None and t is None:
        state.skipped += 1
        return IterationRecord(None, None, 0.0, True)
    l_s = s[0] if s is not None else None
    l_t = t[0] if t is not None else None
    l_tot = (l_s or 0.0) + (l_t or 0.0)
    if not math.isfinite(l_tot):
        raise NonFiniteLossError(f"non-finite total loss at iteration {state.iteration}")
    if s is not None and t is not None:
        grads = [a + b for a, b in zip(s[1], t[1])]
    else:
        grads = (s or t)[1]
    state.optimizer.step(grads)
    return IterationRecord(l_s, l_t, l_tot, False)


def ema_update(teacher: DetectorModel, student: DetectorModel, alpha: float) -> DetectorModel:
    """In place: every teacher array becomes alpha * teacher + (1 - alpha) * student."""
    if not same_architecture(teacher, student):
        raise ArchitectureMismatchError("cannot average models with different architectures")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1.0:
        return teacher
    for t, s in zip(state_arrays(teacher), state_arrays(student)):
        t[...] = alpha * t.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)
    return teacher


# -- metrics log -----------------------------------------------------------------


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


class MetricsLog:
    """Rows of (epoch, iter, l_s, l_t, l_tot, skipped, map_eval), formatted deterministically."""

    def __init__(self):
        self.rows: list[dict] = []
        self._reset_window()

    def _reset_window(self):
        self._ls, self._lt, self._ltot, self._skip = [], [], [], 0

    def add(self, rec: IterationRecord):
        if rec.skipped:
            self._skip += 1
            return
        if rec.l_s is not None:
            self._ls.append(rec.l_s)
        if rec.l_t is not None:
            self._lt.append(rec.l_t)
        self._ltot.append(rec.l_tot)

    def flush(self, epoch: int, iteration: int, map_eval: float | None):
        mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
        row = {"epoch": epoch, "iter": iteration, "l_s": mean(self._ls), "l_t": mean(self._lt),
               "l_tot": mean(self._ltot), "skipped": self._skip, "map_eval": map_eval}
        self.rows.append(row)
        self._reset_window()
        return row

    def map_trajectory(self) -> list[tuple[int, float]]:
        return [(r["iter"], r["map_eval"]) for r in self.rows if r["map_eval"] is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for r in self.rows:
            wr.writerow([r["epoch"], r["iter"], _fmt(r["l_s"]), _fmt(r["l_t"]), _fmt(r["l_tot"]),
                         r["skipped"], _fmt(r["map_eval"])])
        return buf.getvalue()


# -- the loop ----------------------------------------------------------------------


def adapt(student: DetectorModel, teacher: DetectorModel, target_dataset: Sequence[LabeledImage],
          config: AdaptConfig, eval_split: Sequence[LabeledImage] | None = None,
          evaluator: Callable | None = None, state: AdaptState | None = None,
          on_epoch_end: Callable[[AdaptState], None] | None = None):
    """Run the full adaptation; returns ``(student, metrics_log, state)``.

    Target labels are never read. ``eval_split`` (labeled) is scored after every
    epoch and, if ``config.eval_every`` is set, every that many iterations;
    row ``iter == 0`` holds the pre-adaptation score. Passing a ``state``
    resumes from its epoch counter and continues its metrics log.
    """
    if evaluator is None:
        from .evalkit import evaluate as evaluator
    if state is None:
        state = new_state(student, teacher, config)
    metrics = state.metrics
    images = [d.image for d in target_dataset]

    def probe():
        return evaluator(state.student, eval_split).mAP if eval_split is not None else None

    if state.epoch == 0 and not metrics.rows:
        metrics.flush(0, 0, probe())
    while state.epoch < config.epochs:
        ep = state.epoch + 1
        order = state.rng.permutation(len(images))
        stats_s, stats_t, stats_tot, skipped0 = [], [], [], state.skipped
        for idx in order:
            rec = total_step(state, images[idx])
            metrics.add(rec)
            if not rec.skipped:
                stats_tot.append(rec.l_tot)
                if rec.l_s is not None:
                    stats_s.append(rec.l_s)
                if rec.l_t is not None:
                    stats_t.append(rec.l_t)
            if config.eval_every and state.iteration % config.eval_every == 0:
                metrics.flush(ep, state.iteration, probe())
        if config.enable_teacher:
            ema_update(state.teacher, state.student, config.alpha)
        state.epoch = ep
        mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
        if metrics.rows and metrics.rows[-1]["iter"] == state.iteration and state.iteration > 0:
            # the cadence probe already scored this exact student
            m_eval = metrics.rows[-1]["map_eval"]
        else:
            m_eval = probe()
            metrics.flush(ep, state.iteration, m_eval)
        stats = EpochStats(ep, mean(stats_s), mean(stats_t), mean(stats_tot), state.skipped - skipped0, m_eval)
        state.history.append(stats)
        log.info("epoch %d l_s=%s l_t=%s skipped=%d mAP=%s", ep, stats.l_s, stats.l_t, stats.skipped, m_eval)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state.student, metrics, state
