"""Experiment drivers behind the CLI: pretrain, adapt, eval, ablation sweeps and plots.

Every artifact is written atomically. Runs are reproducible: the same config
and seed give byte-identical metrics CSVs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .adapt import METRIC_COLUMNS, adapt, new_state
from .config import ExperimentConfig
from .core.boxes import LabeledImage
from .core.model import clone_model
from .evalkit import evaluate
from .fsutil import atomic_write_bytes, atomic_write_text
from .toy.detector import ToyDetector
from .toy.train import pretrain
from .toy.world import DomainShift, generate_dataset, strip_labels

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    source: list[LabeledImage]
    source_eval: list[LabeledImage]
    target: list[LabeledImage]  # unlabeled
    target_eval: list[LabeledImage]


_DATA_CACHE: dict[str, Datasets] = {}


def make_datasets(cfg: ExperimentConfig) -> Datasets:
    """Source train / source eval / unlabeled target / labeled target eval.

    The two eval splits share a seed, so they show the same scenes with and
    without the shift.
    """
    w = cfg.world
    key = json.dumps(asdict(w), sort_keys=True)
    if key not in _DATA_CACHE:
        clear = DomainShift()
        _DATA_CACHE[key] = Datasets(
            source=generate_dataset(w.scene, clear, w.n_source, w.source_seed),
            source_eval=generate_dataset(w.scene, clear, w.n_eval, w.eval_seed),
            target=strip_labels(generate_dataset(w.scene, w.shift, w.n_target, w.target_seed)),
            target_eval=generate_dataset(w.scene, w.shift, w.n_eval, w.eval_seed),
        )
    return _DATA_CACHE[key]


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- pretrain ------------------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> dict:
    """Train on the source domain; writes ``model.npz`` and ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = make_datasets(cfg)
    p = cfg.pretrain
    seed = p.seed if seed is None else seed
    model = ToyDetector(**cfg.detector_kwargs())
    model, source_map = pretrain(model, data.source, p.epochs, lr=p.learning_rate, batch_size=p.batch_size,
                                 seed=seed, eval_split=data.source_eval)
    target_map = evaluate(model, data.target_eval).mAP
    report = {"source_map": source_map, "target_map": target_map, "config_digest": cfg.digest(),
              "pretrain_seed": seed}
    ckpt.save_model(out / "model.npz", model, extra=report)
    _write_json(out / "report.json", report)
    return report


# -- adapt ---------------------------------------------------------------------------


def _load_source_model(cfg: ExperimentConfig, checkpoint_path):
    model, meta = ckpt.load_model(checkpoint_path)
    expected = ToyDetector(**cfg.detector_kwargs()).architecture
    if model.architecture != expected:
        raise ckpt.ArchitectureMismatchError(
            f"{checkpoint_path}: architecture {model.architecture} does not match config {expected}")
    return model, meta


def run_adapt(cfg: ExperimentConfig, checkpoint_path, out_dir, seed: int | None = None,
              resume: bool = False, keep_epoch_checkpoints: bool = True, **overrides) -> dict:
    """Adapt a source checkpoint to the unlabeled target split.

    The checkpoint is cloned into both student and teacher. Writes
    ``epoch_XXX.npz`` (resumable state), ``metrics.csv`` after every epoch,
    and finally ``student.npz`` and ``report.json``. With ``resume`` the
    newest epoch checkpoint in ``out_dir`` is continued.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0] if seed is None else seed
    acfg = cfg.adapt_config(seed, **overrides)
    data = make_datasets(cfg)
    source, _ = _load_source_model(cfg, checkpoint_path)

    state = None
    existing = sorted(out.glob("epoch_*.npz"))
    if resume and existing:
        state = ckpt.load_adapt_state(existing[-1], acfg)
        log.info("resuming from %s (epoch %d)", existing[-1], state.epoch)
    if state is None:
        state = new_state(clone_model(source), clone_model(source), acfg)

    def on_epoch_end(st):
        path = out / f"epoch_{st.epoch:03d}.npz"
        ckpt.save_adapt_state(path, st)
        if not keep_epoch_checkpoints:
            for old in out.glob("epoch_*.npz"):
                if old != path:
                    old.unlink()
        atomic_write_text(out / "metrics.csv", st.metrics.to_csv())

    student, metrics, state = adapt(state.student, state.teacher, data.target, acfg,
                                    eval_split=data.target_eval, state=state, on_epoch_end=on_epoch_end)
    atomic_write_text(out / "metrics.csv", metrics.to_csv())
    traj = metrics.map_trajectory()
    report = {
        "seed": seed,
        "initial_map": traj[0][1] if traj else None,
        "final_map": traj[-1][1] if traj else None,
        "epochs": state.epoch,
        "skipped": state.skipped,
        "config_hash": ckpt.config_hash(acfg),
        "epoch_map": [h.map_eval for h in state.history],
        "enable_daca": acfg.enable_daca,
        "enable_teacher": acfg.enable_teacher,
    }
    ckpt.save_model(out / "student.npz", student, extra=report)
    _write_json(out / "report.json", report)
    return report


# -- eval ----------------------------------------------------------------------------


def run_eval(cfg: ExperimentConfig, checkpoint_path, out_dir=None) -> dict:
    model, _ = _load_source_model(cfg, checkpoint_path)
    data = make_datasets(cfg)
    src, tgt = evaluate(model, data.source_eval), evaluate(model, data.target_eval)
    report = {"source_map": src.mAP, "target_map": tgt.mAP,
              "source_ap": {str(k): v for k, v in src.ap.items()},
              "target_ap": {str(k): v for k, v in tgt.ap.items()}}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", report)
        tgt.write_pr_csv(out / "target_pr.csv")
        src.write_pr_csv(out / "source_pr.csv")
    return report


# -- ablation ------------------------------------------------------------------------

SWEEPS = {"threshold": "selection_confidence", "alpha": "alpha"}
ABLATION_COLUMNS = ("sweep", "value", "seed", "status", "source_only_map", "final_map", "gain", "error")


def _ablation_point(args):
    cfg_dict, checkpoint_path, out_dir, sweep, value, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg.eval_every = cfg.ablation.eval_every
    row = {"sweep": sweep, "value": value, "seed": seed, "status": "ok", "source_only_map": None,
           "final_map": None, "gain": None, "error": ""}
    try:
        rep = run_adapt(cfg, checkpoint_path, out_dir, seed=seed, resume=True, keep_epoch_checkpoints=False,
                        **{SWEEPS[sweep]: value})
        row.update(source_only_map=rep["initial_map"], final_map=rep["final_map"],
                   gain=rep["final_map"] - rep["initial_map"])
    except Exception as exc:  # recorded as an explicit failed row
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.error("ablation %s=%s seed=%s failed\n%s", sweep, value, seed, traceback.format_exc())
    return row


def run_ablation(cfg: ExperimentConfig, sweep: str, checkpoint_path, out_dir, seeds=None,
                 workers: int = 1) -> list[dict]:
    """One adaptation per (grid value, seed) from a shared source checkpoint.

    Writes ``<sweep>_runs.csv`` (one row per run, failures included),
    ``<sweep>_table.csv`` and ``<sweep>_table.md`` (mean over seeds).
    """
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    grid = cfg.ablation.threshold_grid if sweep == "threshold" else cfg.ablation.alpha_grid
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), str(checkpoint_path), str(out / f"{sweep}_{v:g}" / f"seed_{s}"), sweep, v, s)
            for v in grid for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_point, jobs))
    else:
        rows = [_ablation_point(j) for j in jobs]
    write_ablation(out, sweep, rows, grid, seeds)
    return rows


def _f(v):
    return "" if v is None else f"{v:.6f}"


def summarize_ablation(rows, grid, seeds):
    table = []
    for v in grid:
        runs = [r for r in rows if r["value"] == v]
        ok = [r for r in runs if r["status"] == "ok"]
        per_seed = {r["seed"]: (r["final_map"] if r["status"] == "ok" else None) for r in runs}
        table.append({
            "value": v,
            "seeds_ok": len(ok),
            "seeds_total": len(seeds),
            "mean_map": float(np.mean([r["final_map"] for r in ok])) if ok else None,
            "mean_gain": float(np.mean([r["gain"] for r in ok])) if ok else None,
            "per_seed": [per_seed.get(s) for s in seeds],
            "status": "ok" if len(ok) == len(seeds) else ("failed" if not ok else "partial"),
        })
    return table


def write_ablation(out: Path, sweep: str, rows, grid, seeds):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ABLATION_COLUMNS)
    for r in rows:
        wr.writerow([r["sweep"], f"{r['value']:g}", r["seed"], r["status"], _f(r["source_only_map"]),
                     _f(r["final_map"]), _f(r["gain"]), r["error"]])
    atomic_write_text(out / f"{sweep}_runs.csv", buf.getvalue())

    table = summarize_ablation(rows, grid, seeds)
    name = SWEEPS[sweep]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow([name, "mean_map", "mean_gain", "status"] + [f"seed_{s}" for s in seeds])
    md = [f"| {name} | mAP@0.5 (mean) | gain | status | " + " | ".join(f"seed {s}" for s in seeds) + " |",
          "|" + "---|" * (4 + len(seeds))]
    for t in table:
        wr.writerow([f"{t['value']:g}", _f(t["mean_map"]), _f(t["mean_gain"]), t["status"]]
                    + [_f(x) for x in t["per_seed"]])
        pct = lambda x: "n/a" if x is None else f"{100 * x:.2f}"  # noqa: E731
        md.append(f"| {t['value']:g} | {pct(t['mean_map'])} | {pct(t['mean_gain'])} | {t['status']} | "
                  + " | ".join(pct(x) for x in t["per_seed"]) + " |")
    atomic_write_text(out / f"{sweep}_table.csv", buf.getvalue())
    atomic_write_text(out / f"{sweep}_table.md", "\n".join(md) + "\n")
    return table


# -- plot ----------------------------------------------------------------------------


class PlotInputError(ValueError):
    pass


def read_metrics_csv(path) -> list[tuple[int, float]]:
    """``(iter, map_eval)`` points of a metrics CSV; raises on missing columns or no data."""
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise PlotInputError(f"{path}: empty file")
    missing = [c for c in ("iter", "map_eval") if c not in reader.fieldnames]
    if missing:
        raise PlotInputError(f"{path}: missing columns {missing} (expected {', '.join(METRIC_COLUMNS)})")
    pts = [(int(r["iter"]), float(r["map_eval"])) for r in reader if r["map_eval"] not in ("", None)]
    if not pts:
        raise PlotInputError(f"{path}: no mAP rows to plot")
    return pts


def plot_runs(csv_paths, out_path, labels=None, title="target mAP@0.5 during adaptation") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_paths = list(csv_paths)
    if not csv_paths:
        raise PlotInputError("no metrics files given")
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise PlotInputError("need one label per metrics file")
    series = [read_metrics_csv(p) for p in csv_paths]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for pts, lab in zip(series, labels):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="." if len(xs) < 60 else None, label=lab)
    lo = min(y for pts in series for _, y in pts)
    hi = max(y for pts in series for _, y in pts)
    pad = max(0.02, 0.05 * (hi - lo))
    ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
    ax.set_xlabel("iteration")
    ax.set_ylabel("mAP@0.5")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(out_path, buf.getvalue())
    return out_path


def is_collapsed(points, initial=None, ratio=0.1, within=None) -> bool:
    """True if mAP drops below ``ratio * initial`` by iteration ``within`` and never recovers."""
    if initial is None:
        initial = points[0][1]
    limit = ratio * initial
    after = [(i, m) for i, m in points if i > 0]
    first = next((i for i, m in after if m < limit), None)
    if first is None or (within is not None and first > within):
        return False
    return all(m < limit for i, m in after if i >= first) and math.isfinite(limit)
