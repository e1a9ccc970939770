"""Synthetic "video description" task.

A video is a script of events, each an (action, object) pair.  Every pair has
a fixed unit-norm feature vector (the codebook).  Each event lasts
``frames_per_event`` frames; every frame is the event's codebook row plus its
own small intrinsic jitter.  The caption is
one template sentence per event: ``a person <action> the <object> .``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .metrics import CaptionSet, tokenize
from .model import BOS, EOS, PAD, ModelConfig
from .rng import stream

ACTIONS = [
    "opens", "cuts", "lifts", "washes", "throws", "paints", "moves", "holds",
    "drops", "cleans", "pushes", "fills", "folds", "kicks", "turns", "carries",
]
OBJECTS = [
    "door", "box", "cup", "ball", "chair", "bottle", "book", "knife",
    "table", "bowl", "shirt", "lamp", "bag", "plate", "phone", "rope",
]
TEMPLATE_WORDS = ["a", "person", "the"]
SPECIALS = ["<bos>", "<eos>", "<pad>"]
UNK = "<unk>"
WORDS_PER_EVENT = 5


@dataclass
class SynthConfig:
    n_actions: int = 8
    n_objects: int = 8
    events_per_video: int = 3
    frames_per_event: int = 4
    feat_dim: int = 16
    noise_floor: float = 0.05
    n_train: int = 512
    n_val: int = 128
    seed: int = 2019

    def __post_init__(self):
        problems = []
        for name in ("n_actions", "n_objects", "events_per_video", "frames_per_event", "feat_dim", "n_train", "n_val"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                problems.append(f"{name} must be a positive integer (got {v})")
        if self.n_actions > len(ACTIONS):
            problems.append(f"n_actions={self.n_actions} exceeds the {len(ACTIONS)} available action words")
        if self.n_objects > len(OBJECTS):
            problems.append(f"n_objects={self.n_objects} exceeds the {len(OBJECTS)} available object words")
        if not self.noise_floor >= 0:
            problems.append(f"noise_floor must be >= 0 (got {self.noise_floor})")
        if problems:
            raise ConfigError("invalid synth config: " + "; ".join(problems))

    @property
    def script_space(self) -> int:
        return (self.n_actions * self.n_objects) ** self.events_per_video

    @property
    def src_len(self) -> int:
        return self.events_per_video * self.frames_per_event

    @property
    def caption_len(self) -> int:
        return WORDS_PER_EVENT * self.events_per_video

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown synth config keys: {', '.join(unknown)}")
        return cls(**d)


class Vocab:
    """Word <-> id table.  Ids 0, 1, 2 are BOS, EOS, PAD."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        assert [self.index[s] for s in SPECIALS] == [BOS, EOS, PAD]

    @classmethod
    def for_config(cls, cfg: SynthConfig) -> "Vocab":
        return cls(SPECIALS + TEMPLATE_WORDS + ACTIONS[: cfg.n_actions] + OBJECTS[: cfg.n_objects])

    def __len__(self):
        return len(self.words)

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise InputError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> list[str]:
        """Drop specials; ids past the word list (unused model slots) become ``<unk>``."""
        return [self.words[i] if i < len(self.words) else UNK for i in ids if i not in (BOS, EOS, PAD)]


@dataclass
class Sample:
    id: str
    features: np.ndarray  # [events * frames_per_event, feat_dim], float32
    caption: str
    script: tuple[tuple[int, int], ...] = ()

    def tokens(self) -> list[str]:
        return tokenize(self.caption)


@dataclass
class Dataset:
    train: list[Sample]
    val: list[Sample]
    vocab: Vocab
    config: SynthConfig
    codebook: np.ndarray = field(repr=False, default=None)


def caption_for(script, cfg: SynthConfig) -> str:
    return " ".join(f"a person {ACTIONS[a]} the {OBJECTS[o]} ." for a, o in script)


def make_codebook(cfg: SynthConfig) -> np.ndarray:
    """One unit-norm vector per (action, object) pair, indexed ``a * n_objects + o``."""
    gen = stream(cfg.seed, "codebook")
    raw = gen.standard_normal((cfg.n_actions * cfg.n_objects, cfg.feat_dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _draw_scripts(cfg: SynthConfig, total: int) -> list[tuple[tuple[int, int], ...]]:
    gen = stream(cfg.seed, "data")
    pairs = cfg.n_actions * cfg.n_objects
    space = cfg.script_space
    if space < total:
        # too few distinct scripts for disjoint splits: sample with replacement
        codes = gen.integers(0, pairs, size=(total, cfg.events_per_video))
        return [tuple(divmod(int(c), cfg.n_objects) for c in row) for row in codes]
    if space <= 1_000_000:
        flat = gen.choice(space, size=total, replace=False)
        scripts = []
        for code in flat:
            code = int(code)
            events = []
            for _ in range(cfg.events_per_video):
                code, pair = divmod(code, pairs)
                events.append(divmod(pair, cfg.n_objects))
            scripts.append(tuple(events))
        return scripts
    seen: set = set()
    scripts = []
    while len(scripts) < total:
        row = gen.integers(0, pairs, size=cfg.events_per_video)
        script = tuple(divmod(int(c), cfg.n_objects) for c in row)
        if script not in seen:
            seen.add(script)
            scripts.append(script)
    return scripts


def generate(cfg: SynthConfig, model_config: ModelConfig | None = None) -> Dataset:
    """Build train/val splits; fully determined by ``cfg.seed``.

    With ``model_config`` given, the vocabulary, caption length and feature
    width are checked against it.
    """
    vocab = Vocab.for_config(cfg)
    if model_config is not None:
        check_compatible(cfg, model_config)
    codebook = make_codebook(cfg)
    scripts = _draw_scripts(cfg, cfg.n_train + cfg.n_val)
    jitter = stream(cfg.seed, "jitter")
    samples = []
    for script in scripts:
        rows = np.repeat(np.stack([codebook[a * cfg.n_objects + o] for a, o in script]), cfg.frames_per_event, axis=0)
        if cfg.noise_floor > 0:
            rows = rows + jitter.normal(0.0, cfg.noise_floor, size=rows.shape)
        samples.append((script, rows.astype(np.float32)))
    train = [Sample(f"synth-{i:04d}", f, caption_for(s, cfg), s) for i, (s, f) in enumerate(samples[: cfg.n_train])]
    val = [Sample(f"synth-{i:04d}", f, caption_for(s, cfg), s) for i, (s, f) in enumerate(samples[cfg.n_train :])]
    return Dataset(train, val, vocab, cfg, codebook)


def check_compatible(cfg: SynthConfig, model_config: ModelConfig) -> None:
    problems = []
    n_words = len(SPECIALS) + len(TEMPLATE_WORDS) + cfg.n_actions + cfg.n_objects
    if n_words > model_config.vocab_size:
        problems.append(f"synthetic vocabulary has {n_words} words but model vocab_size={model_config.vocab_size}")
    if cfg.caption_len + 1 > model_config.max_tgt_len:
        problems.append(f"captions need {cfg.caption_len + 1} target positions but max_tgt_len={model_config.max_tgt_len}")
    if cfg.src_len > model_config.max_src_len:
        problems.append(f"{cfg.src_len} source frames exceed max_src_len={model_config.max_src_len}")
    if cfg.feat_dim != model_config.feat_dim:
        problems.append(f"feat_dim mismatch: data {cfg.feat_dim}, model {model_config.feat_dim}")
    if problems:
        raise ConfigError("; ".join(problems))


def to_caption_corpus(split: list[Sample], model_free: bool = True, candidates=None) -> list[CaptionSet]:
    """Ground-truth captions as references.

    ``model_free`` uses each reference as its own candidate; otherwise
    ``candidates`` (token lists, one per sample) must be supplied.
    """
    if not split:
        raise InputError("cannot build a caption corpus from an empty split")
    if not model_free and (candidates is None or len(candidates) != len(split)):
        raise InputError("need one candidate per sample when model_free is false")
    out = []
    for i, sample in enumerate(split):
        ref = sample.tokens()
        cand = list(ref) if model_free else list(candidates[i])
        out.append(CaptionSet(f"synth-{i:04d}", cand, [ref]))
    return out


def encode_targets(split: list[Sample], vocab: Vocab) -> np.ndarray:
    """Token ids + EOS, right-padded with PAD, shape ``[n, max_len + 1]``."""
    seqs = [vocab.encode(s.tokens()) + [EOS] for s in split]
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def stack_features(split: list[Sample]) -> np.ndarray:
    lengths = {s.features.shape for s in split}
    if len(lengths) != 1:
        raise InputError(f"samples have differing feature shapes {sorted(lengths)}")
    return np.stack([s.features for s in split]).astype(np.float32)


def save_jsonl(split: list[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in split:
            rec = {"id": s.id, "features": s.features.astype(np.float64).tolist(), "caption": s.caption}
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Sample(str(rec["id"]), np.asarray(rec["features"], dtype=np.float32), rec["caption"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad record ({exc})") from None
    return out
