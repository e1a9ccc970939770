"""``clvd`` command line.

Exit codes: 0 success, 1 usage error, 2 input/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import datasynth as D
from . import experiment as X
from .errors import ConfigError, InputError, TrainingDiverged
from .metrics import corpus_report, load_caption_file
from .schedules import DropoutSchedule, NoiseSchedule, write_schedule_csv
from .tensor import CHECKPOINT_VERSION

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

PRECEDENCE = "Settings resolve as: command-line flags > --config JSON file > built-in defaults."


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- config plumbing


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("noise", "dropout"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _curriculum_flag(current: dict, mode, value, max_key: str, max_value, e_max):
    if mode is None and value is None and max_value is None:
        if e_max is not None and current.get("kind", "schedule") == "schedule":
            return {**current, "e_max": e_max}
        return None
    if mode is None:
        mode = "fixed" if value is not None else "schedule"
    if mode == "off":
        return {"kind": "off"}
    if mode == "fixed":
        if value is None:
            raise ConfigError("a fixed setting needs a value (--sigma / --delta)")
        return {"kind": "fixed", "value": value}
    d = {"kind": "schedule"}
    if current.get("kind", "schedule") == "schedule":
        d.update(current)
    if max_value is not None:
        d[max_key] = max_value
    if e_max is not None:
        d["e_max"] = e_max
    return d


def build_config(args) -> X.ExperimentConfig:
    """Defaults, then the JSON file, then explicit flags."""
    d = X.ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        d = _merge(d, _read_json(args.config))
    flags: dict = {}
    for attr, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("activation", "activation"), ("name", "name")):
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
        flags["synth"] = {"seed": args.seed}
    for attr, key in (("n_train", "n_train"), ("n_val", "n_val")):
        v = getattr(args, attr, None)
        if v is not None:
            flags.setdefault("synth", {})[key] = v
    noise = _curriculum_flag(d["noise"], getattr(args, "noise", None), getattr(args, "sigma", None), "sigma_max",
                             getattr(args, "sigma_max", None), getattr(args, "e_max", None))
    if noise is not None:
        flags["noise"] = noise
    drop = _curriculum_flag(d["dropout"], getattr(args, "dropout", None), getattr(args, "delta", None), "delta_max",
                            getattr(args, "delta_max", None), getattr(args, "e_max", None))
    if drop is not None:
        flags["dropout"] = drop
    try:
        return X.ExperimentConfig.from_dict(_merge(d, flags))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from None


def _write_report(report, out) -> None:
    text = report.to_json() + "\n" if str(out).endswith(".json") else report.to_csv()
    Path(out).write_text(text, encoding="utf-8")


def _summary(report) -> str:
    c = report.corpus
    return (f"bleu4={c.bleu4:.4f} rouge_l={c.rouge_l:.4f} cider_d={c.cider_d:.4f} "
            f"div2={c.div2:.4f} re4={c.re4:.4f}")


# ---------------------------------------------------------------- commands


def cmd_schedule(args) -> int:
    try:
        if args.kind == "noise":
            s = NoiseSchedule(args.sigma_max if args.sigma_max is not None else 0.3, args.e_max)
        else:
            s = DropoutSchedule(args.delta_max if args.delta_max is not None else 0.25, args.e_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.epochs < 0:
        raise ConfigError(f"--epochs must be >= 0 (got {args.epochs})")
    if args.out:
        write_schedule_csv(s, args.epochs, args.out)
    else:
        from .schedules import schedule_table, table_to_csv
        sys.stdout.write(table_to_csv(schedule_table(s, args.epochs)))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = build_config(args)
    data = D.generate(cfg.synth, cfg.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.save_jsonl(data.train, out / "train.jsonl")
    D.save_jsonl(data.val, out / "val.jsonl")
    (out / "synth.json").write_text(json.dumps(cfg.synth.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    print(f"wrote {len(data.train)} train and {len(data.val)} val samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    run_dir = Path(args.runs_dir) / cfg.name
    res = X.train(cfg, run_dir=run_dir)
    tlog = res.log
    print(f"run written to {run_dir}")
    print(f"train loss (eval mode) {tlog.initial_train_loss:.4f} -> {tlog.final_train_loss:.4f}")
    if tlog.report is not None:
        print("val: " + _summary(tlog.report))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.run:
        run = Path(args.run)
        if not (run / "config.json").is_file() or not (run / "model.ckpt").is_file():
            raise InputError(f"{run} is not a run directory (needs config.json and model.ckpt)")
        cfg = X.ExperimentConfig.load(run / "config.json")
        checkpoint = run
    else:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise InputError(f"checkpoint not found: {ckpt}")
        cfg = X.ExperimentConfig.load(args.config) if args.config else None
        if cfg is None:
            side = ckpt.parent / "config.json"
            if not side.is_file():
                raise ConfigError(f"no --config given and no config.json next to {ckpt}")
            cfg = X.ExperimentConfig.load(side)
        checkpoint = ckpt
    vocab = D.Vocab.for_config(cfg.synth)
    if args.data:
        if not Path(args.data).is_file():
            raise InputError(f"data file not found: {args.data}")
        split = D.load_jsonl(args.data)
    else:
        split = getattr(D.generate(cfg.synth, cfg.model), args.split)
    report = X.evaluate(checkpoint, split, vocab, config=cfg, ground_truth=args.ground_truth)
    if args.out:
        _write_report(report, args.out)
    print(_summary(report))
    return EXIT_OK


def cmd_eval_captions(args) -> int:
    if not Path(args.pred).is_file():
        raise InputError(f"caption file not found: {args.pred}")
    report = corpus_report(load_caption_file(args.pred))
    if args.out:
        _write_report(report, args.out)
    print(_summary(report))
    return EXIT_OK


def _seed_list(args, cfg) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers (got {args.seeds!r})") from None
    return [cfg.seed]


def _emit_table(table, out) -> None:
    if out:
        Path(out).write_text(table.to_csv(), encoding="utf-8")
    sys.stdout.write(table.to_text())


def cmd_ablate_noise(args) -> int:
    cfg = build_config(args)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sigmas must be comma-separated numbers (got {args.sigmas!r})") from None
    out_dir = Path(args.runs_dir) / cfg.name if args.keep_runs else None
    table = X.ablate_noise(cfg, sigmas, seeds=_seed_list(args, cfg), jobs=args.jobs, out_dir=out_dir)
    _emit_table(table, args.out)
    return EXIT_OK


def cmd_ablate_grid(args) -> int:
    cfg = build_config(args)
    out_dir = Path(args.runs_dir) / cfg.name if args.keep_runs else None
    table = X.ablate_grid(cfg, seeds=_seed_list(args, cfg), jobs=args.jobs, out_dir=out_dir)
    _emit_table(table, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _training_flags(p) -> None:
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--seed", type=int, help="master seed for every RNG stream and the synthetic data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--activation", choices=["mish", "relu", "gelu"])
    p.add_argument("--n-train", type=int, help="synthetic training samples")
    p.add_argument("--n-val", type=int, help="synthetic validation samples")
    p.add_argument("--noise", choices=["schedule", "fixed", "off"], help="input-noise curriculum mode")
    p.add_argument("--sigma", type=float, help="fixed noise std (implies --noise fixed)")
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--dropout", choices=["schedule", "fixed", "off"], help="dropout curriculum mode")
    p.add_argument("--delta", type=float, help="fixed dropout rate (implies --dropout fixed)")
    p.add_argument("--delta-max", type=float)
    p.add_argument("--e-max", type=int, help="epoch at which schedules saturate")
    p.add_argument("--name", help="run name (directory under --runs-dir)")
    p.add_argument("--runs-dir", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clvd", description="Curriculum noise/dropout video describer at desk scale. " + PRECEDENCE)
    parser.add_argument("--version", action="version",
                        version=f"clvd {__version__} (checkpoint format {CHECKPOINT_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("schedule", help="emit a noise or dropout schedule as CSV")
    p.add_argument("--kind", choices=["noise", "dropout"], required=True)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--delta-max", type=float)
    p.add_argument("--e-max", type=int, default=25)
    p.add_argument("--epochs", type=int, default=50, help="last epoch to tabulate")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("synth", help="write the synthetic train/val splits as JSONL", epilog=PRECEDENCE)
    _training_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write runs/<name>/", epilog=PRECEDENCE)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a split and score it")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="run directory with config.json and model.ckpt")
    src.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--config", help="experiment config for --checkpoint")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--data", help="JSONL split to score instead of the regenerated one")
    p.add_argument("--ground-truth", action="store_true", help="score references against themselves")
    p.add_argument("--out", help="report path (.json for JSON, otherwise CSV)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-captions", help="score a caption JSON file")
    p.add_argument("--pred", required=True, help='{"id": {"candidate": str, "references": [str, ...]}}')
    p.add_argument("--out", help="report path (.json for JSON, otherwise CSV)")
    p.set_defaults(func=cmd_eval_captions)

    for name, func, help_ in (("ablate-noise", cmd_ablate_noise, "scheduled vs fixed noise table"),
                              ("ablate-grid", cmd_ablate_grid, "8-row noise/dropout/mish grid")):
        p = sub.add_parser(name, help=help_, epilog=PRECEDENCE)
        _training_flags(p)
        if name == "ablate-noise":
            p.add_argument("--sigmas", default="0.1,0.2,0.3,0.4,0.5", help="comma-separated fixed sigmas")
        p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", help="CSV table path")
        p.add_argument("--keep-runs", action="store_true", help="write every cell under runs/<name>/")
        p.set_defaults(func=func, name_default=name)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("clvd: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("clvd: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "name_default", None) and getattr(args, "name", None) is None and not getattr(args, "config", None):
        args.name = args.name_default
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"clvd: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"clvd: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"clvd: I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
