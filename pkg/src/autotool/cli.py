"""Command-line entry point: train, eval, score, sweep, gen-fixtures.

Exit codes: 0 success, 1 usage or validation error (message on stderr),
2 runtime abort (diagnostics bundle path printed). Flags override config
files; every training run snapshots its fully resolved config next to its
outputs, and that snapshot is itself a valid --config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import fixtures
from .rewards import DEFAULT_TOOL_PENALTY, score_rollout_rows
from .trainer import TrainConfig, TrainingAborted, evaluate, run, sweep
from .trajectory import ROLLOUT_ROW_KEYS
from .zoomworld import EnvConfig

__all__ = ["entry", "main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        raise UsageError(f"{self.prog}: {message}")


_TRAIN_FIELD_FLAGS = {
    # flag name -> (TrainConfig field, type)
    "iters": ("iterations", int),
    "batch-queries": ("batch_queries", int),
    "group-size": ("group_size", int),
    "mini-batches": ("mini_batches", int),
    "epsilon": ("epsilon", float),
    "lambda-base": ("lambda_base", float),
    "penalty": ("penalty", float),
    "free-at": ("free_stage_at", int),
    "amb": ("amb_schedule", str),
    "lr": ("lr", float),
    "weight-decay": ("weight_decay", float),
    "refresh": ("refresh", str),
    "seed": ("seed", int),
    "checkpoint-every": ("checkpoint_every", int),
}

_ENV_FIELD_FLAGS = {
    "width": ("width", int),
    "height": ("height", int),
    "colors": ("n_colors", int),
    "glyphs": ("n_glyphs", int),
    "fine-fraction": ("fine_query_fraction", float),
    "kind-noise": ("kind_signal_noise", float),
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file (flags override it)")
    for flag, (field, typ) in _TRAIN_FIELD_FLAGS.items():
        if flag == "amb":
            p.add_argument("--amb", choices=["adaptive", "linear", "off"], default=argparse.SUPPRESS)
        elif flag == "refresh":
            p.add_argument("--refresh", choices=["batch", "minibatch"], default=argparse.SUPPRESS)
        else:
            p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=argparse.SUPPRESS)
    for flag, (field, typ) in _ENV_FIELD_FLAGS.items():
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=argparse.SUPPRESS)


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    top: dict = {}
    env: dict = {}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        env.update(loaded.pop("env", {}))
        known = {f.name for f in dataclasses.fields(TrainConfig)} - {"env"}
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        top.update(loaded)
    for flag, (field, _) in _TRAIN_FIELD_FLAGS.items():
        attr = flag.replace("-", "_")
        if hasattr(args, attr):
            top[field] = getattr(args, attr)
    for flag, (field, _) in _ENV_FIELD_FLAGS.items():
        attr = flag.replace("-", "_")
        if hasattr(args, attr):
            env[field] = getattr(args, attr)
    return TrainConfig(env=EnvConfig(**env), **top)


def build_parser() -> _Parser:
    parser = _Parser(prog="autotool", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[], help="run a training loop")
    _add_train_flags(p_train)
    p_train.add_argument("--out", type=Path, required=True, help="output directory")
    p_train.add_argument("--dump-rollouts", action="store_true", help="write rollouts.jsonl")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--episodes", type=int, default=2000)
    p_eval.add_argument("--force-mode", choices=["auto", "on", "off"], default="auto")
    p_eval.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p_eval.add_argument("--eval-seed", type=int, default=12345)
    p_eval.add_argument("--config", type=Path, default=None, help="verify the checkpoint against this config")
    p_eval.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")

    p_score = sub.add_parser("score", help="score a rollout JSONL file offline")
    p_score.add_argument("--in", dest="in_path", type=Path, required=True)
    p_score.add_argument("--lambda-base", type=float, default=1.2)
    p_score.add_argument("--f-on", type=float, default=None, help="override the file-computed tool-on frequency")
    p_score.add_argument("--penalty", type=float, default=DEFAULT_TOOL_PENALTY)
    p_score.add_argument("--out", type=Path, default=None, help="write JSONL here instead of stdout")
    p_score.add_argument("--strict", action="store_true", help="exit 1 on any malformed line")

    p_sweep = sub.add_parser("sweep", help="run an ablation sweep, one training run per value")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--axis", choices=["lambda-base", "penalty", "free-at"], required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values, e.g. 0,-0.2,-0.5,-0.8")
    p_sweep.add_argument("--out", type=Path, required=True)

    p_fix = sub.add_parser("gen-fixtures", help="emit the golden fixture files")
    p_fix.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    result = run(cfg, args.out, dump_rollouts=args.dump_rollouts)
    print(f"run complete: {result.metrics_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = None
    if args.config is not None:
        cfg = _resolve_train_config(argparse.Namespace(config=args.config))
    report = evaluate(
        args.checkpoint,
        episodes=args.episodes,
        force_mode=args.force_mode,
        sample=not args.greedy,
        eval_seed=args.eval_seed,
        config=cfg,
    )
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    try:
        raw_lines = Path(args.in_path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {args.in_path}: {exc}") from exc

    rows = []
    malformed: list[tuple[int, str]] = []
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict):
                raise ValueError("line is not a JSON object")
            missing = [k for k in ROLLOUT_ROW_KEYS if k not in row]
            if missing:
                raise ValueError(f"missing keys {missing}")
        except ValueError as exc:
            malformed.append((lineno, str(exc)))
            continue
        rows.append(row)

    for lineno, why in malformed:
        print(f"{args.in_path}:{lineno}: malformed line: {why}", file=sys.stderr)
    if malformed and args.strict:
        print(f"{len(malformed)} malformed line(s) under --strict", file=sys.stderr)
        return 1
    if not rows:
        print(f"{args.in_path}: nothing to score", file=sys.stderr)
        return 1

    scored, summary = score_rollout_rows(
        rows, lambda_base=args.lambda_base, f_on=args.f_on, penalty=args.penalty
    )
    summary["malformed"] = len(malformed)
    lines = [json.dumps(r) for r in scored]
    lines.append(json.dumps({"summary": summary}))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    axis = {"lambda-base": "lambda_base", "penalty": "penalty", "free-at": "free_stage_at"}[args.axis]
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    path = sweep(cfg, axis, values, args.out)
    print(f"sweep complete: {path}")
    return 0


def _cmd_gen_fixtures(args: argparse.Namespace) -> int:
    written = fixtures.write_fixture_files(args.out)
    for p in written:
        print(p)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "sweep": _cmd_sweep,
    "gen-fixtures": _cmd_gen_fixtures,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"{exc}\ndiagnostics bundle: {exc.bundle_dir}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
