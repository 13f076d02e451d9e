"""Versioned ``.npz`` checkpoints for detectors and resumable adaptation state.

A checkpoint holds the parameter arrays plus a JSON metadata blob stored as a
byte array under ``__meta__``. The metadata records the format version, the
detector's constructor arguments and architecture, and for adaptation state
the epoch, optimizer velocity, rng state, metrics rows and a hash of the
adaptation config.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core.model import ArchitectureMismatchError, DetectorModel, state_arrays
from .fsutil import atomic_write_bytes

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _registry():
    from .toy.detector import ToyDetector
    return {"toy_grid_detector": ToyDetector}


def build_model(architecture_name: str, init_kwargs: dict) -> DetectorModel:
    try:
        cls = _registry()[architecture_name]
    except KeyError:
        raise CheckpointError(f"unknown detector architecture {architecture_name!r}") from None
    return cls(**init_kwargs)


def config_hash(config) -> str:
    """Hash of an AdaptConfig, ignoring fields that only extend or observe a run."""
    d = asdict(config)
    d.pop("epochs", None)
    d.pop("eval_every", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _model_meta(model: DetectorModel) -> dict:
    if not hasattr(model, "init_kwargs"):
        raise CheckpointError(f"{type(model).__name__} does not expose init_kwargs()")
    return {"architecture": model.architecture, "init_kwargs": model.init_kwargs(),
            "n_arrays": len(state_arrays(model))}


def _write(path, arrays: dict, meta: dict) -> None:
    meta = {"format_version": FORMAT_VERSION, **meta}
    arrays = dict(arrays)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def _read(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return arrays, meta


def _pack(prefix: str, model: DetectorModel) -> dict:
    return {f"{prefix}/{i:03d}": a for i, a in enumerate(state_arrays(model))}


def _unpack_into(prefix: str, model: DetectorModel, arrays: dict) -> None:
    targets = state_arrays(model)
    for i, t in enumerate(targets):
        key = f"{prefix}/{i:03d}"
        if key not in arrays or arrays[key].shape != t.shape:
            raise ArchitectureMismatchError(f"checkpoint array {key} does not fit the model")
        t[...] = arrays[key]


def _restore_model(meta: dict, arrays: dict, prefix: str) -> DetectorModel:
    model = build_model(meta["architecture"]["name"], meta["init_kwargs"])
    if model.architecture != meta["architecture"]:
        raise ArchitectureMismatchError("rebuilt model does not match the recorded architecture")
    _unpack_into(prefix, model, arrays)
    return model


# -- plain model checkpoints ---------------------------------------------------------


def save_model(path, model: DetectorModel, extra: dict | None = None) -> None:
    meta = {"kind": "model", **_model_meta(model), "extra": extra or {}}
    _write(path, _pack("model", model), meta)


def load_model(path, expect_architecture: dict | None = None) -> tuple[DetectorModel, dict]:
    arrays, meta = _read(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {meta.get('kind')!r}")
    if expect_architecture is not None and meta["architecture"] != expect_architecture:
        raise ArchitectureMismatchError(
            f"checkpoint architecture {meta['architecture']} != expected {expect_architecture}")
    return _restore_model(meta, arrays, "model"), meta


# -- adaptation state ------------------------------------------------------------------


def save_adapt_state(path, state, extra: dict | None = None) -> None:
    arrays = {**_pack("student", state.student), **_pack("teacher", state.teacher)}
    opt = state.optimizer.state_dict()
    arrays.update({f"velocity/{i:03d}": v for i, v in enumerate(opt["velocity"])})
    meta = {
        "kind": "adapt",
        **_model_meta(state.student),
        "config": asdict(state.config),
        "config_hash": config_hash(state.config),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "skipped": state.skipped,
        "optimizer": {k: v for k, v in opt.items() if k != "velocity"},
        "rng_state": state.rng.bit_generator.state,
        "history": [asdict(h) for h in state.history],
        "metrics_rows": state.metrics.rows,
        "extra": extra or {},
    }
    _write(path, arrays, meta)


def load_adapt_state(path, config=None):
    """Rebuild an :class:`~sfdaca.adapt.AdaptState` ready to pass to ``adapt(state=...)``.

    With ``config`` given, its hash must match the checkpoint's; the stored
    config is used otherwise.
    """
    from .adapt import AdaptConfig, AdaptState, EpochStats, MetricsLog
    from .core.optim import SGD

    arrays, meta = _read(path)
    if meta.get("kind") != "adapt":
        raise CheckpointError(f"{path}: expected an adaptation checkpoint, found {meta.get('kind')!r}")
    if config is None:
        config = AdaptConfig(**meta["config"])
    elif config_hash(config) != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash {config_hash(config)} != checkpoint {meta['config_hash']}")
    student = _restore_model(meta, arrays, "student")
    teacher = _restore_model(meta, arrays, "teacher")
    opt = SGD(student.parameters, lr=config.learning_rate, momentum=config.momentum)
    velocity = [arrays[f"velocity/{i:03d}"] for i in range(len(student.parameters))]
    opt.load_state_dict({**meta["optimizer"], "velocity": velocity})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    metrics = MetricsLog()
    metrics.rows = [dict(r) for r in meta["metrics_rows"]]
    return AdaptState(student, teacher, config, opt, rng, epoch=meta["epoch"], iteration=meta["iteration"],
                      skipped=meta["skipped"], history=[EpochStats(**h) for h in meta["history"]],
                      metrics=metrics)
