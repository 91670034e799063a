"""Command-line entry point: ``stochlab <subcommand> --config run.json --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BaselineKind
from .checkpoint import CorruptionError, load_model, save_model
from .datagen import source_dataset, subsample
from .harness import (
    ALL_METHODS,
    RunConfig,
    obtain_frozen,
    pretrain_from_config,
    run_dg,
    run_similarity,
    run_transfer,
    sweep_p,
    target_dataset,
    train_one,
)
from .training import accuracy
from .vit import ConfigError

log = logging.getLogger("stochlab")

OUT_ENV = "STOCHLAB_OUT"
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, default=None,
                       help=f"output directory (default: ${OUT_ENV} or ./runs/<command>)")
        p.add_argument("--seeds", type=_ints, help="comma-separated seed override")
        p.add_argument("--checkpoint", help="frozen pretrained model directory")
        p.add_argument("-v", "--verbose", action="count", default=0)
        return p

    common(sub.add_parser("pretrain", help="train the frozen source model"))
    t = common(sub.add_parser("train", help="transfer-learning run"))
    t.add_argument("--method", help=f"one of {', '.join(ALL_METHODS)}")
    t.add_argument("--methods", help="comma list, or 'all' for every method")
    t.add_argument("--p", type=float, help="fixed cross-attention probability (disables p search)")
    t.add_argument("--rates", type=_floats, help="sampling rates, e.g. 0.15,0.3,0.5,1.0")
    t.add_argument("--save-models", action="store_true", help="save one trained model per seed")
    e = common(sub.add_parser("eval", help="test accuracy of a saved target model"))
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--method", default="ft", help="inference path (ftca needs the frozen model)")
    s = common(sub.add_parser("sweep", help="cross-attention probability sweep"))
    s.add_argument("--grid", type=_floats, default=None)
    s.add_argument("--rates", type=_floats)
    d = common(sub.add_parser("dg", help="leave-one-domain-out domain generalization"))
    d.add_argument("--methods", help="comma list of methods")
    common(sub.add_parser("analyze", help="Q/K/V cosine similarity to the frozen model"))
    return parser


def load_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(data)
    overrides = {}
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if getattr(args, "method", None) and args.command != "eval":
        overrides["method"] = args.method
    if getattr(args, "p", None) is not None:
        overrides["p"] = args.p
        overrides["p_grid"] = ()
    if getattr(args, "rates", None):
        overrides["rates"] = tuple(args.rates)
    if args.command == "dg":
        overrides["protocol"] = "DG"
    elif args.command == "sweep":
        overrides["protocol"] = "ablation"
        overrides.setdefault("method", "stochca")
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _echo(out: Path, cfg: RunConfig, args) -> None:
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "run.json", {"command": args.command, "version": __version__, "seeds": list(cfg.seeds)})


def _methods(text: str | None, default: str) -> tuple[str, ...]:
    if not text:
        return (default,)
    if text == "all":
        return ALL_METHODS
    return tuple(m.strip() for m in text.split(",") if m.strip())


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> dict:
    frozen = pretrain_from_config(cfg)
    save_model(frozen, out / "frozen")
    source = source_dataset(cfg.pretrain.source_n_per_class, cfg.pretrain.seed)
    xi, yi = source.take("train")
    xv, yv = source.take("val")
    summary = {
        "param_hash": frozen.param_hash(),
        "source_train_accuracy": accuracy(BaselineKind.FT, frozen, None, xi, yi),
        "source_val_accuracy": accuracy(BaselineKind.FT, frozen, None, xv, yv),
        "checkpoint": "frozen",
        "config": cfg.to_dict(),
        "version": __version__,
    }
    _write_json(out / "pretrain_report.json", summary)
    return summary


def cmd_train(args, cfg: RunConfig, out: Path):
    frozen = obtain_frozen(cfg)
    report = run_transfer(cfg, frozen, _methods(args.methods, cfg.method))
    if args.save_models:
        _save_models(cfg, frozen, out)
    return report


def _save_models(cfg: RunConfig, frozen, out: Path) -> None:
    """Fixed-hyperparameter (cfg.p / cfg.lam) retrain on train+val, one model per seed."""
    kind = cfg.kind
    ds = subsample(target_dataset(cfg), cfg.sampling_rate, cfg.data.data_seed)
    x, y = ds.take("train")
    xv, yv = ds.take("val")
    value = cfg.p if kind is BaselineKind.STOCHCA else cfg.lam
    for s in cfg.seeds:
        model = train_one(cfg, kind, frozen, ds.num_classes,
                          np.concatenate([x, xv]), np.concatenate([y, yv]), s, value)
        save_model(model, out / "models" / f"{kind.value}_s{s}")


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    model = load_model(args.model)
    kind = BaselineKind.parse(args.method)
    frozen = obtain_frozen(cfg) if kind.uses_frozen_at_inference else None
    ds = target_dataset(cfg)
    xt, yt = ds.take("test")
    result = {
        "model": str(args.model),
        "param_hash": model.param_hash(),
        "method": kind.value,
        "test_accuracy": accuracy(kind, model, frozen, xt, yt),
        "version": __version__,
    }
    _write_json(out / "eval_report.json", result)
    return result


def cmd_sweep(args, cfg, out):
    grid = tuple(args.grid) if args.grid else cfg.p_grid or (0.1, 0.3, 0.5, 0.7)
    return sweep_p(cfg, grid, obtain_frozen(cfg))


def cmd_dg(args, cfg, out):
    return run_dg(cfg, obtain_frozen(cfg), _methods(args.methods, cfg.method))


def cmd_analyze(args, cfg, out):
    return run_similarity(cfg, obtain_frozen(cfg), out)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "dg": cmd_dg,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, cfg, args)
    started = time.perf_counter()
    try:
        result = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT if "checkpoint" in str(exc) else EXIT_CONFIG
    except (CorruptionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    if hasattr(result, "write"):
        paths = result.write(out)
        print(result.to_text(), end="")
        log.info("report written to %s", paths["json"])
    else:
        print(json.dumps({k: v for k, v in result.items() if k != "config"}, indent=2, sort_keys=True))
    _write_json(out / "timing.json", {"wall_time_s": round(time.perf_counter() - started, 3)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
