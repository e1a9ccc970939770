"""Small pre-LN transformer encoder-decoder that describes feature sequences.

Continuous feature sequences ``[batch, src_len, feat_dim]`` go in, token
sequences come out.  Curriculum noise is added to the raw features (encoder
input only) and one shared dropout rate drives the three standard sites:
attention weights, feedforward hidden units and residual branches.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .activation import ActivationKind
from .errors import ConfigError, InputError
from .rng import Streams
from .schedules import DropoutSchedule, NoiseSchedule, delta_at, sigma_at
from .tensor import Tensor

BOS, EOS, PAD = 0, 1, 2
NEG_INF = -1e9

NoiseSetting = Union[NoiseSchedule, float, None]
DropoutSetting = Union[DropoutSchedule, float, None]


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 64
    max_src_len: int = 16
    max_tgt_len: int = 24
    activation: str = "mish"
    feedforward_mult: int = 4
    feat_dim: int = 16
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.activation = ActivationKind.parse(self.activation).value
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("d_model", "n_heads", "n_layers", "vocab_size", "max_src_len", "max_tgt_len",
                     "feedforward_mult", "feat_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                out.append(f"{name} must be a positive integer (got {v})")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            out.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 3:
            out.append(f"vocab_size={self.vocab_size} leaves no room for BOS/EOS/PAD")
        if self.layer_norm_eps <= 0:
            out.append("layer_norm_eps must be > 0")
        return out

    @property
    def d_ff(self) -> int:
        return self.feedforward_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**known)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in a :class:`DescriberModel`."""
    d, h, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    ln = 2 * d
    attn = 4 * d * d + 4 * d
    ffn = d * h + h + h * d + d
    embeddings = cfg.feat_dim * d + d + cfg.max_src_len * d + v * d + cfg.max_tgt_len * d
    encoder = cfg.n_layers * (2 * ln + attn + ffn)
    decoder = cfg.n_layers * (3 * ln + 2 * attn + ffn)
    head = 2 * ln + d * v + v
    return embeddings + encoder + decoder + head


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, h, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    specs = [
        ("src_proj.w", (cfg.feat_dim, d), "normal"),
        ("src_proj.b", (d,), "zeros"),
        ("src_pos", (cfg.max_src_len, d), "normal"),
        ("tok_emb", (v, d), "normal"),
        ("tgt_pos", (cfg.max_tgt_len, d), "normal"),
    ]

    def ln(prefix):
        return [(f"{prefix}.g", (d,), "ones"), (f"{prefix}.b", (d,), "zeros")]

    def ffn(prefix):
        return [
            (f"{prefix}.w1", (d, h), "normal"), (f"{prefix}.b1", (h,), "zeros"),
            (f"{prefix}.w2", (h, d), "normal"), (f"{prefix}.b2", (d,), "zeros"),
        ]

    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        specs += ln(f"{p}.ln1")
        specs += [(f"{p}.self.w_qkv", (d, 3 * d), "normal"), (f"{p}.self.b_qkv", (3 * d,), "zeros"),
                  (f"{p}.self.w_o", (d, d), "normal"), (f"{p}.self.b_o", (d,), "zeros")]
        specs += ln(f"{p}.ln2")
        specs += ffn(f"{p}.ffn")
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        specs += ln(f"{p}.ln1")
        specs += [(f"{p}.self.w_qkv", (d, 3 * d), "normal"), (f"{p}.self.b_qkv", (3 * d,), "zeros"),
                  (f"{p}.self.w_o", (d, d), "normal"), (f"{p}.self.b_o", (d,), "zeros")]
        specs += ln(f"{p}.ln2")
        specs += [(f"{p}.cross.w_q", (d, d), "normal"), (f"{p}.cross.b_q", (d,), "zeros"),
                  (f"{p}.cross.w_kv", (d, 2 * d), "normal"), (f"{p}.cross.b_kv", (2 * d,), "zeros"),
                  (f"{p}.cross.w_o", (d, d), "normal"), (f"{p}.cross.b_o", (d,), "zeros")]
        specs += ln(f"{p}.ln3")
        specs += ffn(f"{p}.ffn")
    specs += ln("enc_ln") + ln("dec_ln")
    specs += [("out.w", (d, v), "normal"), ("out.b", (v,), "zeros")]
    return specs


@dataclass
class _Ctx:
    """Per-call stochastic state: dropout rate, training flag, generator."""

    delta: float = 0.0
    training: bool = False
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.delta == 0:
            return x
        return T.dropout(x, self.delta, True, self.rng)


@dataclass
class DescriberModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model config (missing={missing}, unexpected={extra})")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint tensor {k!r} has shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "DescriberModel":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        return DescriberModel(self.config, params)

    def save(self, path) -> None:
        T.save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, config: ModelConfig, dtype=np.float32) -> "DescriberModel":
        model = init(config, Streams(0), dtype=dtype)
        model.load_state_dict(T.load_checkpoint(path))
        return model


def init(config: ModelConfig, rng, dtype=np.float32) -> DescriberModel:
    """Fresh model: projections and embeddings ~ N(0, 0.02^2), LN gain 1, biases 0.

    ``rng`` is a :class:`Streams` (its ``init`` stream is used) or a numpy
    generator.
    """
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    gen = rng.init if isinstance(rng, Streams) else rng
    params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "normal":
            arr = gen.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return DescriberModel(config, params)


# ---------------------------------------------------------------- layers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask, ctx: _Ctx) -> Tensor:
    qh, kh, vh = (_split_heads(x, n_heads) for x in (q, k, v))
    dh = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, Tensor(mask.astype(scores.dtype)))
    weights = ctx.drop(T.softmax(scores, axis=-1))
    return _merge_heads(T.matmul(weights, vh))


def _self_attention(m: DescriberModel, prefix: str, x: Tensor, mask, ctx: _Ctx) -> Tensor:
    p = m.params
    d = m.config.d_model
    qkv = _linear(x, p[f"{prefix}.w_qkv"], p[f"{prefix}.b_qkv"])
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    out = _attention(q, k, v, m.config.n_heads, mask, ctx)
    return _linear(out, p[f"{prefix}.w_o"], p[f"{prefix}.b_o"])


def _cross_attention(m: DescriberModel, prefix: str, x: Tensor, memory: Tensor, ctx: _Ctx) -> Tensor:
    p = m.params
    d = m.config.d_model
    q = _linear(x, p[f"{prefix}.w_q"], p[f"{prefix}.b_q"])
    kv = _linear(memory, p[f"{prefix}.w_kv"], p[f"{prefix}.b_kv"])
    out = _attention(q, kv[..., :d], kv[..., d:], m.config.n_heads, None, ctx)
    return _linear(out, p[f"{prefix}.w_o"], p[f"{prefix}.b_o"])


def _ffn(m: DescriberModel, prefix: str, x: Tensor, ctx: _Ctx) -> Tensor:
    p = m.params
    hidden = T.elementwise(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]), m.config.activation)
    return _linear(ctx.drop(hidden), p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(m: DescriberModel, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, m.params[f"{prefix}.g"], m.params[f"{prefix}.b"], m.config.layer_norm_eps)


def _resolve_sigma(noise: NoiseSetting, epoch: int) -> float:
    if noise is None:
        return 0.0
    if isinstance(noise, NoiseSchedule):
        return sigma_at(noise, epoch)
    return float(noise)


def _resolve_delta(drop: DropoutSetting, epoch: int) -> float:
    if drop is None:
        return 0.0
    if isinstance(drop, DropoutSchedule):
        return delta_at(drop, epoch)
    return float(drop)


def _as_features(model: DescriberModel, features) -> Tensor:
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    if x.ndim == 2:
        x = x[None]
    cfg = model.config
    if x.ndim != 3 or x.shape[-1] != cfg.feat_dim:
        raise InputError(f"features must have shape [batch, src_len, {cfg.feat_dim}], got {x.shape}")
    if x.shape[1] > cfg.max_src_len:
        raise InputError(f"source length {x.shape[1]} exceeds max_src_len={cfg.max_src_len}")
    if x.shape[1] == 0:
        raise InputError("source sequence is empty")
    if isinstance(features, Tensor) and features.ndim == 3:
        return features
    return Tensor(x.astype(model.dtype, copy=False))


def encode(model: DescriberModel, features, sigma: float = 0.0, rng: Streams | None = None,
           training: bool = False, delta: float = 0.0) -> Tensor:
    """Encoder states ``[batch, src_len, d_model]``.

    Noise with std ``sigma`` is added to the raw features only when
    ``training`` is true.
    """
    x = _as_features(model, features)
    ctx = _Ctx(delta=delta, training=training, rng=rng.dropout if rng is not None else None)
    if training and sigma > 0:
        if rng is None:
            raise ConfigError("training with noise needs a random stream")
        x = T.gaussian_noise(x, sigma, rng.noise)
    p = model.params
    s = x.shape[1]
    h = T.add(_linear(x, p["src_proj.w"], p["src_proj.b"]), p["src_pos"][:s])
    for i in range(model.config.n_layers):
        pre = f"enc.{i}"
        h = T.add(h, ctx.drop(_self_attention(model, f"{pre}.self", _ln(model, f"{pre}.ln1", h), None, ctx)))
        h = T.add(h, ctx.drop(_ffn(model, f"{pre}.ffn", _ln(model, f"{pre}.ln2", h), ctx)))
    return _ln(model, "enc_ln", h)


def decoder_mask(tokens: np.ndarray) -> np.ndarray:
    """Additive mask ``[batch, 1, t, t]``: causal plus PAD keys."""
    b, t = tokens.shape
    causal = np.triu(np.full((t, t), NEG_INF), k=1)
    pad = np.where(tokens == PAD, NEG_INF, 0.0)[:, None, None, :]
    return causal[None, None] + pad


def decode(model: DescriberModel, memory: Tensor, tokens, training: bool = False,
           rng: Streams | None = None, delta: float = 0.0) -> Tensor:
    """Logits ``[batch, t, vocab]`` for decoder input ``tokens`` (teacher forcing)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    cfg = model.config
    if tokens.shape[1] > cfg.max_tgt_len:
        raise InputError(f"target length {tokens.shape[1]} exceeds max_tgt_len={cfg.max_tgt_len}")
    ctx = _Ctx(delta=delta, training=training, rng=rng.dropout if rng is not None else None)
    p = model.params
    t = tokens.shape[1]
    h = T.add(T.embed(p["tok_emb"], tokens), p["tgt_pos"][:t])
    mask = decoder_mask(tokens)
    for i in range(cfg.n_layers):
        pre = f"dec.{i}"
        h = T.add(h, ctx.drop(_self_attention(model, f"{pre}.self", _ln(model, f"{pre}.ln1", h), mask, ctx)))
        h = T.add(h, ctx.drop(_cross_attention(model, f"{pre}.cross", _ln(model, f"{pre}.ln2", h), memory, ctx)))
        h = T.add(h, ctx.drop(_ffn(model, f"{pre}.ffn", _ln(model, f"{pre}.ln3", h), ctx)))
    h = _ln(model, "dec_ln", h)
    return _linear(h, p["out.w"], p["out.b"])


def decode_step(model: DescriberModel, encoded: Tensor, prefix) -> np.ndarray:
    """Next-token logits ``[vocab]`` after ``prefix`` (PAD entries after the prefix are ignored)."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.size == 0:
        raise InputError("prefix must contain at least BOS")
    real = np.nonzero(prefix != PAD)[0]
    last = int(real[-1]) if real.size else 0
    logits = decode(model, encoded, prefix[None])
    return logits.data[0, last]


def shift_right(targets: np.ndarray) -> np.ndarray:
    """Decoder input: BOS followed by all but the last target token."""
    targets = np.asarray(targets)
    bos = np.full((targets.shape[0], 1), BOS, dtype=targets.dtype)
    return np.concatenate([bos, targets[:, :-1]], axis=1)


def forward_loss(model: DescriberModel, batch, epoch: int, noise: NoiseSetting, drop: DropoutSetting,
                 epsilon: float, rng: Streams | None, training: bool) -> Tensor:
    """Label-smoothed teacher-forced loss for ``batch = (features, targets)``.

    ``targets`` holds caption tokens followed by EOS, right-padded with PAD.
    When ``training`` is true the noise std and dropout rate for ``epoch``
    come from ``noise`` / ``drop`` (a schedule, a fixed value, or None for off).
    """
    features, targets = batch
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2:
        raise InputError(f"targets must be [batch, tgt_len], got shape {targets.shape}")
    sigma = _resolve_sigma(noise, epoch) if training else 0.0
    delta = _resolve_delta(drop, epoch) if training else 0.0
    memory = encode(model, features, sigma, rng, training, delta)
    logits = decode(model, memory, shift_right(targets), training, rng, delta)
    return T.cross_entropy_smoothed(logits, targets, epsilon, pad_id=PAD)


def greedy_decode_batch(model: DescriberModel, features, max_len: int) -> list[list[int]]:
    """Greedy decoding of a batch; EOS and BOS are not part of the output."""
    x = _as_features(model, features)
    b = x.shape[0]
    max_len = min(int(max_len), model.config.max_tgt_len)
    if max_len <= 0:
        return [[] for _ in range(b)]
    memory = encode(model, x)
    tokens = np.full((b, max_len + 1), PAD, dtype=np.int64)
    tokens[:, 0] = BOS
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for step in range(max_len):
        logits = decode(model, memory, tokens[:, : step + 1]).data[:, step]
        nxt = logits.argmax(axis=-1)  # first maximum, so ties go to the lowest id
        for i in np.nonzero(~done)[0]:
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        tokens[:, step + 1] = np.where(done, PAD, nxt)
        if done.all():
            break
    return out


def greedy_decode(model: DescriberModel, features, max_len: int) -> list[int]:
    """Greedy decoding of a single feature sequence ``[src_len, feat_dim]``."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise InputError("greedy_decode takes one feature sequence; use greedy_decode_batch")
        x = x[0]
    return greedy_decode_batch(model, x[None], max_len)[0]
