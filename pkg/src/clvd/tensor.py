"""Dense tensors with a tape-based reverse pass.

Operations only record themselves while a :class:`Tape` is active and at least
one input requires a gradient; outside a tape every op is a plain numpy
computation, which is what decoding and evaluation use.

    with Tape() as tape:
        loss = some_function(params)
    grads = tape.backward(loss)

A tape is single use: a second ``backward`` raises :class:`BackwardError`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import activation as _act
from .errors import BackwardError, ConfigError, InputError, ShapeError

_DEBUG = False
_TAPES: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Check every forward output for NaN/Inf (raises FloatingPointError)."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Records are appended in execution order, so walking them backwards is a
    valid reverse topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> "GradientMap":
        """Reverse pass from a scalar ``loss``.

        Returns a :class:`GradientMap` holding a gradient for every leaf in
        ``wrt`` (default: every requires-grad leaf the tape touched).  Leaves
        the loss does not depend on get zeros.  The ``.grad`` attribute of
        each of those leaves is set as well.
        """
        if self.consumed:
            raise BackwardError("tape already consumed; run a new forward pass before calling backward again")
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        leaves = list(wrt) if wrt is not None else self.leaves()
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.records.clear()
        out = GradientMap()
        for leaf in leaves:
            g = grads.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g
            out[leaf] = g
        return out


class GradientMap(dict):
    """Mapping leaf tensor -> gradient array (keys hash by identity)."""


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
    return tape.backward(loss, wrt)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if _DEBUG and data.size and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    track = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._produced = True
        _TAPES[-1].records.append(_Record(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit("sub", data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes are batch axes).

    ``b`` may be 2-D while ``a`` carries extra leading axes, which is the
    usual ``x @ W`` of a linear layer.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", data, (a, b), bw)


def sum_(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(data), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tensors, bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def slice_(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", np.array(data, copy=True), (a,), bw)


def embed(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; output shape ``indices.shape + (d,)``."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise InputError(f"embedding indices must be integers, got dtype {idx.dtype}")
    vocab = table.shape[0]
    if idx.size:
        bad = idx[(idx < 0) | (idx >= vocab)]
        if bad.size:
            raise IndexError(f"token id {int(bad.flat[0])} outside vocabulary of size {vocab}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embed", table.data[idx], (table,), bw)


# ---------------------------------------------------------------- nonlinear


def elementwise(a: Tensor, kind) -> Tensor:
    fn, deriv = _act.get(kind)
    x = a.data
    return _emit(f"act:{_act.ActivationKind.parse(kind).value}", fn(x), (a,), lambda g: (g * deriv(x),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if a.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _emit("layer_norm", y, (a, gain, bias), bw)


def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float = 0.1, pad_id: int | None = None) -> Tensor:
    """Label-smoothed cross entropy averaged over non-pad rows.

    Smoothed target distribution is ``(1 - eps) * onehot + eps / V``.
    ``logits`` is ``[N, V]`` (extra leading axes are flattened).
    """
    if not 0 <= epsilon < 1:
        raise ConfigError(f"label smoothing epsilon must lie in [0, 1), got {epsilon}")
    vocab = logits.shape[-1]
    z = logits.data.reshape(-1, vocab)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} logit rows but {t.shape[0]} targets")
    valid = np.ones(t.shape, dtype=bool) if pad_id is None else t != pad_id
    bad = t[valid & ((t < 0) | (t >= vocab))]
    if bad.size:
        raise IndexError(f"target id {int(bad[0])} outside vocabulary of size {vocab}")
    n_valid = int(valid.sum())

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full_like(z, epsilon / vocab)
    rows = np.nonzero(valid)[0]
    q[rows, t[rows]] += 1.0 - epsilon
    q[~valid] = 0.0
    denom = max(n_valid, 1)
    loss = -(q * logp).sum() / denom

    def bw(g):
        p = np.exp(logp)
        p[~valid] = 0.0
        return ((g * (p - q) / denom).reshape(logits.shape),)

    return _emit("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------- stochastic


def gaussian_noise(a: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """``a + z`` with ``z ~ N(0, sigma^2)`` per element; z is a constant for the reverse pass."""
    if not sigma >= 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return a
    z = rng.standard_normal(a.shape, dtype=a.dtype if a.dtype in (np.float32, np.float64) else np.float64)
    return _emit("gaussian_noise", a.data + sigma * z, (a,), lambda g: (g,))


def dropout(a: Tensor, delta: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``delta``, scale survivors by ``1/(1-delta)``."""
    if not 0 <= delta < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {delta}")
    if not training or delta == 0:
        return a
    keep = rng.random(a.shape, dtype=np.float32) >= np.float32(delta)
    mask = keep.astype(a.dtype) * a.dtype.type(1.0 / (1.0 - delta))
    return _emit("dropout", a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    tolerance: float = 1e-4
    # (input index, flat coordinate, analytic, numeric, relative error)
    failures: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "ok" if self.passed else f"{len(self.failures)} failing coordinates"
        return f"grad_check: {self.n_checked} coords, max rel err {self.max_rel_error:.3e} ({status})"


def grad_check(
    f: Callable[..., Tensor],
    point,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``point`` is an array or a sequence of arrays; ``f`` receives one leaf
    tensor per array.  All evaluation is done in float64.  The relative error
    of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.  ``max_coords``
    limits each input to a random subset of coordinates.
    """
    arrays = [point] if isinstance(point, (np.ndarray, Tensor)) or np.isscalar(point) else list(point)
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in arrays]
    report = GradCheckReport(tolerance=tolerance)
    if all(x.size == 0 for x in arrays):
        return report
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    with Tape() as tape:
        out = f(*leaves)
    analytic = tape.backward(out, wrt=leaves)
    rng = rng or np.random.default_rng(0)

    def value():
        return float(f(*leaves).data)

    for i, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = analytic[leaf].reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            fp = value()
            flat[j] = orig - step
            fm = value()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            an = float(ga[j])
            rel = abs(an - num) / max(abs(an), abs(num), floor)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tolerance:
                report.failures.append((i, int(j), an, num, rel))
    return report


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CLVD"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write named float arrays: magic, u32 version, then one record per array.

    Record layout (little endian): u32 name length, UTF-8 name, u32 rank,
    u32 per dimension, float32 payload in row-major order.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise InputError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise InputError(f"{path}: truncated checkpoint ({exc})") from None
    return out
