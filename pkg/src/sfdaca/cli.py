"""Command line entry point: ``sfdaca {pretrain,adapt,eval,ablate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .core.model import ArchitectureMismatchError

log = logging.getLogger("sfdaca")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    return ExperimentConfig.load(path)


def _out(args, cfg, name) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir) / name


def _need_checkpoint(args):
    if not args.checkpoint:
        raise CheckpointError("--checkpoint is required (run `sfdaca pretrain` first)")
    return args.checkpoint


def cmd_pretrain(args) -> int:
    from .experiments import run_pretrain
    cfg = _config(args)
    out = _out(args, cfg, "pretrain")
    rep = run_pretrain(cfg, out, seed=args.seed)
    cfg.save(out / "config.yaml")
    print(f"source-only  source mAP@0.5 = {100 * rep['source_map']:.2f}  "
          f"target mAP@0.5 = {100 * rep['target_map']:.2f}")
    print(f"checkpoint: {out / 'model.npz'}")
    return 0


def cmd_adapt(args) -> int:
    from .experiments import run_adapt
    cfg = _config(args)
    overrides = {}
    if args.no_teacher:
        overrides["enable_teacher"] = False
    if args.no_daca:
        overrides["enable_daca"] = False
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = _out(args, cfg, f"adapt_seed{seed}")
    rep = run_adapt(cfg, _need_checkpoint(args), out, seed=seed, resume=args.resume, **overrides)
    cfg.save(out / "config.yaml")
    print(f"seed {seed}: target mAP@0.5 {100 * rep['initial_map']:.2f} -> {100 * rep['final_map']:.2f} "
          f"(gain {100 * (rep['final_map'] - rep['initial_map']):+.2f})")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import run_eval
    cfg = _config(args)
    rep = run_eval(cfg, _need_checkpoint(args), args.out)
    print(json.dumps({"source_map": rep["source_map"], "target_map": rep["target_map"]}, indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation, run_pretrain
    cfg = _config(args)
    out = _out(args, cfg, f"ablate_{args.sweep}")
    checkpoint = args.checkpoint
    if checkpoint is None:
        log.info("no --checkpoint given; pretraining a shared source model first")
        run_pretrain(cfg, out / "pretrain")
        checkpoint = out / "pretrain" / "model.npz"
    seeds = (args.seed,) if args.seed is not None else None
    rows = run_ablation(cfg, args.sweep, checkpoint, out, seeds=seeds, workers=args.workers)
    cfg.save(out / "config.yaml")
    print((out / f"{args.sweep}_table.md").read_text(), end="")
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} run(s) failed; see {out / f'{args.sweep}_runs.csv'}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args) -> int:
    from .experiments import plot_runs
    out = Path(args.out) if args.out else Path("mAP_trajectory.png")
    if out.suffix.lower() != ".png":
        out = out / "mAP_trajectory.png"
    plot_runs(args.metrics, out, labels=args.labels)
    print(f"plot: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfdaca", description="Source-free detector adaptation on a toy benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults if omitted)")
        if checkpoint:
            sp.add_argument("--checkpoint", metavar="PATH", help="source-pretrained model checkpoint (.npz)")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--out", metavar="DIR", help="output directory")

    sp = sub.add_parser("pretrain", help="train the toy detector on the source domain")
    common(sp, checkpoint=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="adapt a source checkpoint to the unlabeled target domain")
    common(sp)
    sp.add_argument("--no-teacher", action="store_true", help="drop the teacher (consistency loss and EMA)")
    sp.add_argument("--no-daca", action="store_true", help="drop the composite self-training loss")
    sp.add_argument("--resume", action="store_true", help="continue from the newest epoch checkpoint in --out")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="mAP@0.5 of a checkpoint on the source and target eval splits")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="selection-confidence or EMA-momentum sweep")
    common(sp)
    sp.add_argument("--sweep", choices=("threshold", "alpha"), required=True)
    sp.add_argument("--workers", type=int, default=1, help="parallel grid points")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="mAP-vs-iteration chart from one or more metrics CSVs")
    sp.add_argument("metrics", nargs="+", metavar="CSV")
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--out", metavar="DIR", help="output directory or .png path")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .experiments import PlotInputError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (CheckpointError, ArchitectureMismatchError, FileNotFoundError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
    except PlotInputError as exc:
        print(f"plot error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
