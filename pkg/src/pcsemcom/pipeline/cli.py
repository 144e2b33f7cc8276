"""Command-line front end: ``pcsemcom <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .. import metrics
from ..channel_link import lossless_budget
from ..dataset_io import load_checkpoint, load_dataset, read_ply, save_checkpoint, write_ply
from .config import PRESETS, ExperimentConfig, field_types, load_config, parse_value, render_config
from .evaluation import evaluate_model, sweep_global, sweep_rate
from .training import build_model, train_stage1, train_stage2

INF_SENTINEL = "inf"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config (overrides --config)")
    g.add_argument("--config", help="INI config file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    g.add_argument("--dump-config", metavar="PATH", help="write the effective config and continue")
    for name in field_types():
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE")


def _config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config) if args.config else PRESETS.get(args.preset or "desk")
        changes = {}
        for name in field_types():
            raw = getattr(args, f"cfg_{name}")
            if raw is not None:
                changes[name] = parse_value(name, raw)
        cfg = cfg.replace(**changes)
    except (ValueError, OSError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if args.dump_config:
        Path(args.dump_config).write_text(render_config(cfg))
    return cfg


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcsemcom", description="Point-cloud semantic communication over AWGN.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="sample, normalise and write clouds as PLY")
    _add_config_flags(p)
    p.add_argument("--split", default="train")
    p.add_argument("--out", help="destination directory (default <output>/data/<split>)")

    p = sub.add_parser("train", help="run one training stage")
    _add_config_flags(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--ckpt", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--out", help="checkpoint path")

    p = sub.add_parser("eval", help="evaluate a checkpoint over SNRs")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--snr", type=_floats, required=True, help="comma-separated SNRs in dB")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="CSV path (default <output>/eval.csv)")
    p.add_argument("--dump-ply", metavar="DIR", help="write reconstructions at the first SNR")

    p = sub.add_parser("sweep", help="train and evaluate over a parameter sweep")
    _add_config_flags(p)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--snr", type=_floats, help="SNR sweep of a trained checkpoint")
    mode.add_argument("--rate", help="S:d pairs, e.g. 8:8,16:8,32:4")
    mode.add_argument("--global", dest="global_", type=_floats, help="D' values to ablate")
    p.add_argument("--ckpt", help="checkpoint for --snr")
    p.add_argument("--out", help="CSV path (default <output>/sweep.csv)")

    p = sub.add_parser("budget", help="lossless link budget calculator")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--p", type=float, default=0.9)

    p = sub.add_parser("metrics", help="D1/D2 PSNR of B against reference A")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--normal-k", type=int, default=12)
    return parser


def _fmt_psnr(value: float) -> str:
    return INF_SENTINEL if math.isinf(value) else f"{value:.4f}"


def _cmd_prepare(args) -> int:
    cfg = _config(args)
    clouds, names = load_dataset(cfg.dataset(args.split))
    out = Path(args.out) if args.out else cfg.resolved_output_dir() / "data" / args.split
    out.mkdir(parents=True, exist_ok=True)
    for cloud, name in zip(clouds, names):
        write_ply(out / f"{name}.ply", cloud)
    print(f"wrote {len(clouds)} clouds to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage == 2 and not args.ckpt:
        raise UsageError("train --stage 2 needs --ckpt pointing at a stage-1 checkpoint")
    clouds, names = load_dataset(cfg.dataset("train"))
    if args.stage == 2:
        ckpt = train_stage2(cfg, load_checkpoint(args.ckpt), clouds, names)
    else:
        ckpt = train_stage1(cfg, clouds, names)
    out = Path(args.out) if args.out else cfg.resolved_output_dir() / f"stage{args.stage}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    if ckpt.history:
        print(f"stage {args.stage}: chamfer {ckpt.history[0]:.6f} -> {ckpt.history[-1]:.6f}")
    print(f"saved {out}")
    return 0


def _emit(result, cfg: ExperimentConfig, out, default_name: str) -> None:
    path = Path(out) if out else cfg.resolved_output_dir() / default_name
    sys.stdout.write(result.to_csv(path, cfg.record_timing))


def _cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt)
    clouds, names = load_dataset(cfg.dataset(args.split))
    _emit(evaluate_model(ckpt, cfg, clouds, args.snr, names), cfg, args.out, "eval.csv")
    if args.dump_ply:
        model = build_model(cfg, ckpt)
        rng = np.random.default_rng([cfg.seed, 7, 0])
        out = Path(args.dump_ply)
        out.mkdir(parents=True, exist_ok=True)
        for p in model.prepare(clouds, names):
            write_ply(out / f"{p.name}.ply", model.reconstruct(p, args.snr[0], rng, ckpt.stage != "stage1"))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.snr is not None:
        if not args.ckpt:
            raise UsageError("sweep --snr needs --ckpt")
        clouds, names = load_dataset(cfg.dataset("test"))
        result = evaluate_model(load_checkpoint(args.ckpt), cfg, clouds, args.snr, names)
    else:
        train, _ = load_dataset(cfg.dataset("train"))
        test, _ = load_dataset(cfg.dataset("test"))
        if args.rate is not None:
            try:
                pairs = [tuple(int(v) for v in item.split(":")) for item in args.rate.split(",")]
                if any(len(p) != 2 for p in pairs):
                    raise ValueError(args.rate)
            except ValueError as exc:
                raise UsageError(f"--rate expects S:d pairs, got {args.rate!r}") from exc
            result = sweep_rate(cfg, train, test, pairs)
        else:
            result = sweep_global(cfg, train, test, [int(v) for v in args.global_])
    _emit(result, cfg, args.out, "sweep.csv")
    return 0


def _cmd_budget(args) -> int:
    b = lossless_budget(args.bits, args.snr, args.p)
    print(b.symbol_use)
    return 0


def _cmd_metrics(args) -> int:
    q = metrics.evaluate(read_ply(args.a), read_ply(args.b), args.normal_k)
    print(f"d1_psnr_db {_fmt_psnr(q.d1_psnr_db)}")
    print(f"d2_psnr_db {_fmt_psnr(q.d2_psnr_db)}")
    print(f"d1_psnr_symmetric_db {_fmt_psnr(q.d1_psnr_symmetric_db)}")
    print(f"d2_psnr_symmetric_db {_fmt_psnr(q.d2_psnr_symmetric_db)}")
    return 0


_COMMANDS = {"prepare": _cmd_prepare, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
             "budget": _cmd_budget, "metrics": _cmd_metrics}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"pcsemcom: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
