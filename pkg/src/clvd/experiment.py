"""Training recipe, evaluation, and the two ablation studies.

The recipe: Adam (beta1 0.9, beta2 0.99) with decoupled weight decay 0.01,
linear learning-rate warm-up over the first five epochs, label smoothing 0.1,
curriculum noise/dropout evaluated once per epoch, seed 2019.  The default
learning rate (2e-3, batch 8) is tuned for the small synthetic task; 1e-4 is
the setting for full-size models.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import model as M
from .activation import ActivationKind
from .datasynth import (Dataset, Sample, SynthConfig, Vocab, encode_targets, generate, stack_features,
                        to_caption_corpus)
from .errors import ConfigError, InputError, TrainingDiverged
from .metrics import MetricReport, corpus_report
from .rng import DEFAULT_SEED, Streams
from .schedules import DropoutSchedule, NoiseSchedule, delta_at, sigma_at
from .tensor import Tape

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("bleu4", "rouge_l", "cider_d", "div2", "re4")
LOG_COLUMNS = ("epoch", "loss", "sigma", "delta", "lr", "seconds")


# ---------------------------------------------------------------- config


def _schedule_from_dict(d, kind: str):
    """``{"kind": "schedule"|"fixed"|"off", ...}`` -> schedule, float or None."""
    if d is None:
        return None
    if isinstance(d, (NoiseSchedule, DropoutSchedule, float, int)):
        return float(d) if isinstance(d, int) else d
    mode = d.get("kind", "schedule")
    if mode == "off":
        return None
    if mode == "fixed":
        value = float(d["value"])
        if kind == "noise" and value < 0:
            raise ConfigError(f"fixed noise sigma must be >= 0, got {value}")
        if kind == "dropout" and not 0 <= value < 1:
            raise ConfigError(f"fixed dropout rate must lie in [0, 1), got {value}")
        return value
    if mode == "schedule":
        try:
            if kind == "noise":
                return NoiseSchedule(float(d.get("sigma_max", 0.3)), int(d.get("e_max", 25)))
            return DropoutSchedule(float(d.get("delta_max", 0.25)), int(d.get("e_max", 25)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown {kind} setting kind {mode!r} (expected schedule, fixed or off)")


def _schedule_to_dict(s) -> dict:
    if s is None:
        return {"kind": "off"}
    if isinstance(s, NoiseSchedule):
        return {"kind": "schedule", "sigma_max": s.sigma_max, "e_max": s.e_max}
    if isinstance(s, DropoutSchedule):
        return {"kind": "schedule", "delta_max": s.delta_max, "e_max": s.e_max}
    return {"kind": "fixed", "value": float(s)}


@dataclass
class ExperimentConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    epsilon_smoothing: float = 0.1
    noise: Union[NoiseSchedule, float, None] = field(default_factory=NoiseSchedule)
    dropout: Union[DropoutSchedule, float, None] = field(default_factory=DropoutSchedule)
    activation: str = "mish"
    baseline_activation: str = "gelu"
    seed: int = DEFAULT_SEED
    name: str = "run"
    log_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig.from_dict(self.model)
        if isinstance(self.synth, dict):
            self.synth = SynthConfig.from_dict(self.synth)
        self.noise = _schedule_from_dict(self.noise, "noise")
        self.dropout = _schedule_from_dict(self.dropout, "dropout")
        try:
            self.activation = ActivationKind.parse(self.activation).value
            self.baseline_activation = ActivationKind.parse(self.baseline_activation).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.model.activation = self.activation
        problems = []
        if int(self.epochs) != self.epochs or self.epochs < 0:
            problems.append(f"epochs must be a non-negative integer (got {self.epochs})")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            problems.append(f"batch_size must be a positive integer (got {self.batch_size})")
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if not self.eps_adam > 0:
            problems.append("eps_adam must be > 0")
        if not 0 <= self.epsilon_smoothing < 1:
            problems.append(f"epsilon_smoothing must lie in [0, 1) (got {self.epsilon_smoothing})")
        if self.warmup_epochs < 0 or (self.epochs >= 1 and self.warmup_epochs > self.epochs):
            problems.append(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs}]")
        if self.synth.feat_dim != self.model.feat_dim:
            problems.append(f"synth.feat_dim={self.synth.feat_dim} differs from model.feat_dim={self.model.feat_dim}")
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in changes.items():
            d[k] = _schedule_to_dict(v) if k in ("noise", "dropout") else v
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["synth"] = self.synth.to_dict()
        d["noise"] = _schedule_to_dict(self.noise)
        d["dropout"] = _schedule_to_dict(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {', '.join(unknown)}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = M.ModelConfig.from_dict(d["model"])
        if "synth" in d and isinstance(d["synth"], dict):
            d["synth"] = SynthConfig.from_dict(d["synth"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def sigma_for(config: ExperimentConfig, epoch: int) -> float:
    s = config.noise
    return 0.0 if s is None else sigma_at(s, epoch) if isinstance(s, NoiseSchedule) else float(s)


def delta_for(config: ExperimentConfig, epoch: int) -> float:
    s = config.dropout
    return 0.0 if s is None else delta_at(s, epoch) if isinstance(s, DropoutSchedule) else float(s)


# ---------------------------------------------------------------- optimiser


def lr_at(config: ExperimentConfig, global_step: int, steps_per_epoch: int) -> float:
    """Linear per-step warm-up from 0 to ``config.lr``, then constant."""
    warm = config.warmup_epochs * steps_per_epoch
    if global_step >= warm:
        return config.lr
    return config.lr * global_step / warm


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.99,
              weight_decay: float = 0.0, eps_adam: float = 1e-8):
    """One in-place Adam update with bias correction and decoupled weight decay.

    ``params``/``grads`` are parallel lists of arrays.  Decay is applied as
    ``p -= lr * weight_decay * p`` before the moment update.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: parameter shape {p.shape} vs gradient shape {g.shape}")
        if weight_decay:
            p -= lr * weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
    return params, state


# ---------------------------------------------------------------- training


@dataclass
class EpochRow:
    epoch: int
    loss: float
    sigma: float
    delta: float
    lr: float
    seconds: float


@dataclass
class TrainingLog:
    rows: list[EpochRow] = field(default_factory=list)
    report: MetricReport | None = None
    # eval-mode loss on the whole training split, before and after training
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in LOG_COLUMNS[1:]])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: M.DescriberModel
    log: TrainingLog
    dataset: Dataset
    run_dir: Path | None = None


def split_loss(model: M.DescriberModel, feats, targets, epsilon: float, batch_size: int = 128) -> float:
    """Eval-mode (no noise, no dropout) smoothed loss, averaged over non-pad tokens."""
    total, count = 0.0, 0
    for start in range(0, len(feats), batch_size):
        t = targets[start : start + batch_size]
        k = int((t != M.PAD).sum())
        loss = M.forward_loss(model, (feats[start : start + batch_size], t), 0, None, None, epsilon, None, False)
        total += loss.item() * k
        count += k
    return total / max(count, 1)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(config: ExperimentConfig, run_dir=None, dataset: Dataset | None = None,
          evaluate_split: str | None = "val") -> TrainResult:
    """Train a describer under ``config``; deterministic for a given config.

    With ``run_dir`` set, writes ``config.json``, ``log.csv``, ``model.ckpt``
    and (when ``evaluate_split`` is set) ``report.json`` there.
    """
    streams = Streams(config.seed)
    data = dataset or generate(config.synth, config.model)
    model = M.init(config.model, streams)
    params = model.parameters()
    opt = AdamState.zeros_like([p.data for p in params])

    train_split = data.train
    feats = stack_features(train_split)
    targets = encode_targets(train_split, data.vocab)
    n = len(train_split)
    spe = math.ceil(n / config.batch_size)
    tlog = TrainingLog()
    tlog.initial_train_loss = split_loss(model, feats, targets, config.epsilon_smoothing)
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = streams.epoch_shuffle(epoch).permutation(n)
        losses = []
        lr = 0.0
        for b, idx in enumerate(_batches(n, config.batch_size, order)):
            lr = lr_at(config, step, spe)
            with Tape() as tape:
                loss = M.forward_loss(model, (feats[idx], targets[idx]), epoch, config.noise, config.dropout,
                                      config.epsilon_smoothing, streams, True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {b} (global step {step})")
            grads = tape.backward(loss, params)
            adam_step([p.data for p in params], [grads[p] for p in params], opt, lr,
                      config.beta1, config.beta2, config.weight_decay, config.eps_adam)
            losses.append(value)
            step += 1
        elapsed = time.perf_counter() - t0
        row = EpochRow(epoch, float(np.mean(losses)), sigma_for(config, epoch), delta_for(config, epoch), lr,
                       elapsed if config.log_wall_time else 0.0)
        tlog.rows.append(row)
        log.info("epoch %d loss %.4f sigma %.3f delta %.3f lr %.2e (%.1fs)",
                 epoch, row.loss, row.sigma, row.delta, lr, elapsed)

    tlog.final_train_loss = split_loss(model, feats, targets, config.epsilon_smoothing)
    if evaluate_split:
        tlog.report = evaluate(model, getattr(data, evaluate_split), data.vocab)
    result = TrainResult(model, tlog, data, None)
    if run_dir is not None:
        result.run_dir = write_run(run_dir, config, model, tlog)
    return result


def write_run(run_dir, config: ExperimentConfig, model: M.DescriberModel, tlog: TrainingLog) -> Path:
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
        (run_dir / "log.csv").write_text(tlog.to_csv(), encoding="utf-8")
        model.save(run_dir / "model.ckpt")
        if tlog.report is not None:
            report = tlog.report.to_dict()
            report["training"] = {"initial_train_loss": tlog.initial_train_loss,
                                  "final_train_loss": tlog.final_train_loss}
            (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing run files under {run_dir}: {exc}") from exc
    return run_dir


def load_run_model(run_dir) -> tuple[ExperimentConfig, M.DescriberModel]:
    run_dir = Path(run_dir)
    config = ExperimentConfig.load(run_dir / "config.json")
    return config, M.DescriberModel.load(run_dir / "model.ckpt", config.model)


# ---------------------------------------------------------------- evaluation


def decode_split(model: M.DescriberModel, split: list[Sample], vocab: Vocab, batch_size: int = 128) -> list[list[str]]:
    feats = stack_features(split)
    out = []
    max_len = model.config.max_tgt_len
    for start in range(0, len(split), batch_size):
        for ids in M.greedy_decode_batch(model, feats[start : start + batch_size], max_len):
            out.append(vocab.decode(ids))
    return out


def _check_vocab(model: M.DescriberModel, split: list[Sample], vocab: Vocab) -> None:
    if len(vocab) > model.config.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} words does not fit model vocab_size={model.config.vocab_size}")
    for s in split:
        missing = [t for t in s.tokens() if t not in vocab.index]
        if missing:
            raise ConfigError(f"sample {s.id} uses words outside the model vocabulary: {missing[:5]}")


def evaluate(checkpoint, split: list[Sample], vocab: Vocab, config: ExperimentConfig | None = None,
             ground_truth: bool = False) -> MetricReport:
    """Greedy-decode ``split`` and score it.

    ``checkpoint`` is a model, a run directory or a ``.ckpt`` path (the latter
    needs ``config``).  ``ground_truth`` skips the model and scores the
    references against themselves.
    """
    if not split:
        raise InputError("cannot evaluate an empty split")
    if ground_truth:
        return corpus_report(to_caption_corpus(split, model_free=True))
    model = _resolve_model(checkpoint, config)
    _check_vocab(model, split, vocab)
    candidates = decode_split(model, split, vocab)
    return corpus_report(to_caption_corpus(split, model_free=False, candidates=candidates))


def _resolve_model(checkpoint, config) -> M.DescriberModel:
    if isinstance(checkpoint, M.DescriberModel):
        return checkpoint
    path = Path(checkpoint)
    if path.is_dir():
        return load_run_model(path)[1]
    if config is None:
        cfg_path = path.parent / "config.json"
        if not cfg_path.exists():
            raise ConfigError(f"no config given and no config.json next to {path}")
        config = ExperimentConfig.load(cfg_path)
    return M.DescriberModel.load(path, config.model)


def exact_match(model: M.DescriberModel, split: list[Sample], vocab: Vocab) -> float:
    """Fraction of samples whose greedy caption equals the reference token for token."""
    if not split:
        raise InputError("cannot score an empty split")
    decoded = decode_split(model, split, vocab)
    return sum(d == s.tokens() for d, s in zip(decoded, split)) / len(split)


# ---------------------------------------------------------------- ablations


@dataclass
class AblationTable:
    header: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]


def _run_cell(payload) -> dict:
    cfg_dict, run_dir = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    res = train(cfg, run_dir=run_dir)
    corpus = res.log.report.corpus
    return {k: getattr(corpus, k) for k in METRIC_COLUMNS}


def _run_cells(configs: list[ExperimentConfig], jobs: int, out_dir, names: list[str]) -> list[dict]:
    payloads = [(c.to_dict(), None if out_dir is None else str(Path(out_dir) / n)) for c, n in zip(configs, names)]
    if jobs <= 1:
        return [_run_cell(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, payloads))


def _average(results: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in results])) for k in METRIC_COLUMNS}


def ablate_noise(config: ExperimentConfig, sigmas, seeds=None, jobs: int = 1, out_dir=None,
                 base_model: bool = True) -> AblationTable:
    """Scheduled noise vs. each fixed sigma; metrics averaged over ``seeds``.

    With ``base_model`` the cells train without curriculum dropout and with the
    baseline activation, so noise is the only curriculum component.
    """
    sigmas = list(sigmas)
    if not sigmas:
        raise InputError("ablate_noise needs at least one fixed sigma")
    seeds = list(seeds) if seeds else [config.seed]
    base = config.replace(dropout=None, activation=config.baseline_activation) if base_model else config
    schedule = config.noise if isinstance(config.noise, NoiseSchedule) else NoiseSchedule()
    variants = [("CL by noise", "scheduled", schedule)] + [("Fixed noise", float(s), float(s)) for s in sigmas]
    configs, names = [], []
    for approach, label, setting in variants:
        for seed in seeds:
            configs.append(base.replace(noise=setting, seed=seed, name=f"noise-{label}-seed{seed}"))
            names.append(f"noise-{label}-seed{seed}")
    results = _run_cells(configs, jobs, out_dir, names)
    rows = []
    k = len(seeds)
    for i, (approach, label, _) in enumerate(variants):
        avg = _average(results[i * k : (i + 1) * k])
        rows.append([approach, label] + [avg[c] for c in METRIC_COLUMNS])
    return AblationTable(["approach", "sigma", *METRIC_COLUMNS], rows)


# base, single components, pairs, all three
GRID = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, False, True),
    (False, True, True),
    (True, True, False),
    (True, True, True),
]


def grid_config(config: ExperimentConfig, noise_on: bool, dropout_on: bool, mish_on: bool) -> ExperimentConfig:
    noise = config.noise if isinstance(config.noise, NoiseSchedule) else NoiseSchedule()
    drop = config.dropout if isinstance(config.dropout, DropoutSchedule) else DropoutSchedule()
    flags = "".join("1" if f else "0" for f in (noise_on, dropout_on, mish_on))
    return config.replace(
        noise=noise if noise_on else None,
        dropout=drop if dropout_on else None,
        activation="mish" if mish_on else config.baseline_activation,
        name=f"grid-{flags}",
    )


def ablate_grid(config: ExperimentConfig, seeds=None, jobs: int = 1, out_dir=None) -> AblationTable:
    """All eight on/off combinations of noise, dropout and Mish."""
    seeds = list(seeds) if seeds else [config.seed]
    configs, names = [], []
    for flags in GRID:
        for seed in seeds:
            cfg = grid_config(config, *flags).replace(seed=seed)
            configs.append(cfg)
            names.append(f"{cfg.name}-seed{seed}")
    results = _run_cells(configs, jobs, out_dir, names)
    k = len(seeds)
    mark = {True: "on", False: "off"}
    rows = []
    for i, flags in enumerate(GRID):
        avg = _average(results[i * k : (i + 1) * k])
        rows.append([mark[f] for f in flags] + [avg[c] for c in METRIC_COLUMNS])
    return AblationTable(["noise", "dropout", "mish", *METRIC_COLUMNS], rows)

