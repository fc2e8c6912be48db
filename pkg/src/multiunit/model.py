"""Layered encoder with tapped auxiliary CTC heads and an attention decoder.

The encoder is a strided convolutional subsampler followed by pre-norm
residual transformer blocks.  The primary CTC head and the decoder read the
last layer; every :class:`TapSpec` adds an affine CTC head on the output of
one intermediate layer.  The training objective is

    total = ctc(H^L, y) + aed_weight * aed(H^L, y) + Σ_taps weight * ctc(H^l, y_unit)

averaged over the utterances of a batch.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .ctc import ctc_label_score, ctc_loss_op, forward_variables, is_feasible
from .numcore import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MJCT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TapSpec:
    unit: str
    layer: int
    weight: float
    vocab_size: int

    @property
    def key(self) -> str:
        return f"{self.unit}@{self.layer}"


@dataclass
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    num_layers: int = 6
    heads: int = 2
    subsample_factor: int = 2
    kernel_size: int = 3
    ff_dim: int = 128
    decoder_layers: int = 1
    primary_unit: str = "wordpiece"
    primary_vocab_size: int = 64
    taps: list[TapSpec] = field(default_factory=list)
    aed_weight: float = 0.5
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.taps = [t if isinstance(t, TapSpec) else TapSpec(**t) for t in self.taps]
        self.validate()

    def validate(self) -> None:
        if self.subsample_factor < 1:
            raise ConfigError("subsample_factor must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        seen = set()
        for t in self.taps:
            if not 1 <= t.layer <= self.num_layers:
                raise ConfigError(f"tap {t.key}: layer must lie in 1..{self.num_layers}")
            if t.weight < 0:
                raise ConfigError(f"tap {t.key}: weight must be >= 0")
            if t.key in seen:
                raise ConfigError(f"duplicate tap {t.key}")
            seen.add(t.key)

    @property
    def aed_vocab_size(self) -> int:
        # primary vocabulary plus begin / end sentinels
        return self.primary_vocab_size + 2

    @property
    def sos_id(self) -> int:
        return self.primary_vocab_size

    @property
    def eos_id(self) -> int:
        return self.primary_vocab_size + 1

    def output_length(self, num_frames: int) -> int:
        if num_frames < self.kernel_size:
            return 0
        return (num_frames - self.kernel_size) // self.subsample_factor + 1

    def tap(self, name: str) -> TapSpec:
        matches = [t for t in self.taps if name in (t.key, t.unit)]
        if len(matches) != 1:
            raise ConfigError(f"no unique tap named {name!r}")
        return matches[0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class LossBreakdown:
    backbone_ctc: float
    aed: float
    per_tap: dict[str, float]
    total: float
    utterances: int = 0
    skipped: int = 0


# parameters --------------------------------------------------------------------

def _attn_params(rng, prefix: str, n: int) -> dict[str, Tensor]:
    return {f"{prefix}.{w}": nc.init_uniform(rng, (n, n), n, f"{prefix}.{w}")
            for w in ("wq", "wk", "wv", "wo")}


def _ln_params(prefix: str, n: int) -> dict[str, Tensor]:
    return {f"{prefix}.g": nc.constant(1.0, (n,), f"{prefix}.g"),
            f"{prefix}.b": nc.constant(0.0, (n,), f"{prefix}.b")}


def _ff_params(rng, prefix: str, n: int, f: int) -> dict[str, Tensor]:
    return {f"{prefix}.w1": nc.init_uniform(rng, (n, f), n, f"{prefix}.w1"),
            f"{prefix}.b1": nc.init_uniform(rng, (f,), n, f"{prefix}.b1"),
            f"{prefix}.w2": nc.init_uniform(rng, (f, n), f, f"{prefix}.w2"),
            f"{prefix}.b2": nc.init_uniform(rng, (n,), f, f"{prefix}.b2")}


def _tap_rng(seed: int, key: str) -> np.random.Generator:
    # taps draw from their own stream so adding one never perturbs the backbone init
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(±1/√fan_in) weights, unit LayerNorm gains, zero LayerNorm biases."""
    rng = np.random.default_rng(seed)
    n, m, k = cfg.model_dim, cfg.feature_dim, cfg.kernel_size
    p: dict[str, Tensor] = {
        "sub.kernel": nc.init_uniform(rng, (k, m, n), k * m, "sub.kernel"),
        "sub.bias": nc.init_uniform(rng, (n,), k * m, "sub.bias"),
    }
    for i in range(cfg.num_layers):
        pre = f"enc.{i}"
        p |= _ln_params(f"{pre}.ln1", n)
        p |= _attn_params(rng, f"{pre}.att", n)
        p |= _ln_params(f"{pre}.ln2", n)
        p |= _ff_params(rng, f"{pre}.ff", n, cfg.ff_dim)
    K = cfg.primary_vocab_size
    p["ctc.w"] = nc.init_uniform(rng, (n, K), n, "ctc.w")
    p["ctc.b"] = nc.init_uniform(rng, (K,), n, "ctc.b")
    if cfg.decoder_layers:
        V = cfg.aed_vocab_size
        p["dec.embed"] = Tensor(rng.normal(0.0, 1.0, (V, n)), requires_grad=True, name="dec.embed")
        for i in range(cfg.decoder_layers):
            pre = f"dec.{i}"
            p |= _ln_params(f"{pre}.ln1", n)
            p |= _attn_params(rng, f"{pre}.self", n)
            p |= _ln_params(f"{pre}.ln2", n)
            p |= _attn_params(rng, f"{pre}.cross", n)
            p |= _ln_params(f"{pre}.ln3", n)
            p |= _ff_params(rng, f"{pre}.ff", n, cfg.ff_dim)
        p |= _ln_params("dec.ln", n)
        p["dec.out.w"] = nc.init_uniform(rng, (n, V), n, "dec.out.w")
        p["dec.out.b"] = nc.init_uniform(rng, (V,), n, "dec.out.b")
    for t in cfg.taps:
        trng = _tap_rng(seed, t.key)
        p[f"tap.{t.key}.w"] = nc.init_uniform(trng, (n, t.vocab_size), n, f"tap.{t.key}.w")
        p[f"tap.{t.key}.b"] = nc.init_uniform(trng, (t.vocab_size,), n, f"tap.{t.key}.b")
    return p


# forward pieces -------------------------------------------------------------------

def sinusoid(T: int, n: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, n, 2) / n))
    pe = np.zeros((T, n))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: n // 2])
    return pe


def _mha(p, prefix: str, xq: Tensor, xkv: Tensor, mask, heads: int) -> Tensor:
    B, Tq, n = xq.shape
    Tk = xkv.shape[1]
    d = n // heads

    def split(x, w, T):
        return nc.transpose(nc.reshape(nc.matmul(x, p[f"{prefix}.{w}"]), (B, T, heads, d)), (0, 2, 1, 3))

    o = nc.attention(split(xq, "wq", Tq), split(xkv, "wk", Tk), split(xkv, "wv", Tk), mask)
    o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), (B, Tq, n))
    return nc.matmul(o, p[f"{prefix}.wo"])


def _ff(p, prefix: str, x: Tensor) -> Tensor:
    h = nc.relu(nc.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return nc.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(p, prefix: str, x: Tensor, eps: float) -> Tensor:
    return nc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def pad_batch(feats: Sequence[np.ndarray]) -> np.ndarray:
    T = max(f.shape[0] for f in feats)
    out = np.zeros((len(feats), T, feats[0].shape[1]))
    for b, f in enumerate(feats):
        out[b, :f.shape[0]] = f
    return out


def encode_batch(cfg: ModelConfig, params, feats: Sequence[np.ndarray]):
    """Hidden sequences ``[H^1, ..., H^L]`` (each ``[B, T', n]``) and the valid lengths."""
    frames = [f.shape[0] for f in feats]
    return encode_padded(cfg, params, Tensor(pad_batch(feats)), frames)


def encode_padded(cfg: ModelConfig, params, x: Tensor, frames: Sequence[int]):
    """:func:`encode_batch` on an already padded ``[B, T, m]`` tensor, which may require grad."""
    if min(frames) < cfg.kernel_size:
        raise nc.InputTooShortError(
            f"utterance with {min(frames)} frames is shorter than the subsampling kernel ({cfg.kernel_size})")
    h = nc.conv1d_time(x, params["sub.kernel"], cfg.subsample_factor)
    h = nc.relu(nc.add(h, params["sub.bias"]))
    B, T, n = h.shape
    h = nc.add(h, sinusoid(T, n))
    lengths = np.array([cfg.output_length(t) for t in frames])
    key_mask = (np.arange(T)[None, :] < lengths[:, None])[:, None, None, :]
    hiddens = []
    for i in range(cfg.num_layers):
        pre = f"enc.{i}"
        q = _ln(params, f"{pre}.ln1", h, cfg.ln_eps)
        h = nc.add(h, _mha(params, f"{pre}.att", q, q, key_mask, cfg.heads))
        h = nc.add(h, _ff(params, f"{pre}.ff", _ln(params, f"{pre}.ln2", h, cfg.ln_eps)))
        hiddens.append(h)
    return hiddens, lengths


def encode(cfg: ModelConfig, params, x: np.ndarray) -> list[Tensor]:
    """Per-layer hidden sequences ``H^1..H^L`` for one utterance, each ``[T', n]``."""
    hiddens, _ = encode_batch(cfg, params, [np.asarray(x, dtype=np.float64)])
    return [nc.reshape(h, h.shape[1:]) for h in hiddens]


def head_logits(params, name: str, h: Tensor) -> Tensor:
    return nc.linear(h, params[f"{name}.w"], params[f"{name}.b"])


def _decoder_losses(cfg: ModelConfig, params, enc: Tensor, enc_lengths, ys) -> Tensor:
    """Teacher-forced cross-entropy per utterance, summed over target positions."""
    B = len(ys)
    U = max(len(y) for y in ys) + 1
    inputs = np.full((B, U), cfg.eos_id, dtype=np.int64)
    targets = np.full((B, U), cfg.eos_id, dtype=np.int64)
    weights = np.zeros((B, U))
    for b, y in enumerate(ys):
        inputs[b, :len(y) + 1] = [cfg.sos_id, *y]
        targets[b, :len(y) + 1] = [*y, cfg.eos_id]
        weights[b, :len(y) + 1] = 1.0
    n = cfg.model_dim
    h = nc.add(nc.embed(params["dec.embed"], inputs), sinusoid(U, n))
    self_mask = nc.causal_mask(U)[None, None] & (weights[:, None, None, :] > 0)
    Tk = enc.shape[1]
    cross_mask = (np.arange(Tk)[None, :] < np.asarray(enc_lengths)[:, None])[:, None, None, :]
    for i in range(cfg.decoder_layers):
        pre = f"dec.{i}"
        q = _ln(params, f"{pre}.ln1", h, cfg.ln_eps)
        h = nc.add(h, _mha(params, f"{pre}.self", q, q, self_mask, cfg.heads))
        q = _ln(params, f"{pre}.ln2", h, cfg.ln_eps)
        h = nc.add(h, _mha(params, f"{pre}.cross", q, enc, cross_mask, cfg.heads))
        h = nc.add(h, _ff(params, f"{pre}.ff", _ln(params, f"{pre}.ln3", h, cfg.ln_eps)))
    logits = head_logits(params, "dec.out", _ln(params, "dec.ln", h, cfg.ln_eps))
    logp = nc.pick(nc.log_softmax(logits), targets)
    return nc.mul(nc.tsum(nc.mul(logp, weights), axis=1), -1.0)


# losses ---------------------------------------------------------------------------

def batch_joint_loss(cfg: ModelConfig, params, feats: Sequence[np.ndarray],
                     transcripts: Sequence[Mapping[str, Sequence[int]]]):
    """Joint objective over a batch.

    Returns ``(total, breakdown)`` where ``total`` is a scalar Tensor ready
    for ``backward()``.  Utterances whose primary labels (or any positively
    weighted tap's labels) cannot be aligned are skipped and counted.
    """
    for tr in transcripts:
        needed = [cfg.primary_unit] + [t.unit for t in cfg.taps]
        missing = [u for u in needed if u not in tr]
        if missing:
            raise ConfigError(f"transcripts lack units {missing}")
    keep = []
    for b, (f, tr) in enumerate(zip(feats, transcripts)):
        T = cfg.output_length(f.shape[0])
        ok = is_feasible(T, tr[cfg.primary_unit]) and all(
            is_feasible(T, tr[t.unit]) for t in cfg.taps if t.weight > 0)
        if ok and (cfg.decoder_layers == 0 or len(tr[cfg.primary_unit]) > 0):
            keep.append(b)
    skipped = len(feats) - len(keep)
    if skipped:
        log.warning("skipping %d utterance(s) with infeasible CTC alignment", skipped)
    if not keep:
        zero = Tensor(0.0)
        return zero, LossBreakdown(0.0, 0.0, {t.key: 0.0 for t in cfg.taps}, 0.0, 0, skipped)
    feats = [feats[b] for b in keep]
    transcripts = [transcripts[b] for b in keep]
    hiddens, lengths = encode_batch(cfg, params, feats)
    top = hiddens[-1]
    ys = [list(tr[cfg.primary_unit]) for tr in transcripts]
    backbone = nc.mean(ctc_loss_op(head_logits(params, "ctc", top), ys, lengths))
    total = backbone
    aed_value = 0.0
    if cfg.decoder_layers:
        aed = nc.mean(_decoder_losses(cfg, params, top, lengths, ys))
        aed_value = aed.item()
        total = nc.add(total, nc.mul(aed, cfg.aed_weight))
    per_tap = {}
    total_value = backbone.item() + cfg.aed_weight * aed_value
    for t in cfg.taps:
        labels = [list(tr[t.unit]) for tr in transcripts]
        logits = head_logits(params, f"tap.{t.key}", hiddens[t.layer - 1])
        if t.weight > 0:
            term = nc.mean(ctc_loss_op(logits, labels, lengths))
            total = nc.add(total, nc.mul(term, t.weight))
            per_tap[t.key] = term.item()
            total_value += t.weight * per_tap[t.key]
        else:
            per_tap[t.key] = _detached_ctc_mean(logits.data, labels, lengths)
    return total, LossBreakdown(backbone.item(), aed_value, per_tap, total_value, len(keep), skipped)


def _detached_ctc_mean(logits: np.ndarray, labels, lengths) -> float:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    _, loglik, _ = forward_variables(logp, labels, lengths)
    finite = np.isfinite(loglik)
    return float(-loglik[finite].mean()) if finite.any() else math.inf


def joint_loss(cfg: ModelConfig, params, x: np.ndarray, transcripts: Mapping[str, Sequence[int]]):
    """Single-utterance joint objective; see :func:`batch_joint_loss`."""
    return batch_joint_loss(cfg, params, [np.asarray(x, dtype=np.float64)], [transcripts])


def _as_batch(h) -> Tensor:
    h = nc.as_tensor(h)
    return nc.reshape(h, (1,) + h.shape) if h.ndim == 2 else h


def aed_loss(cfg: ModelConfig, params, enc: Tensor | np.ndarray, y: Sequence[int]) -> Tensor:
    """Teacher-forced cross-entropy of ``y`` given encoder output ``enc`` ``[T', n]``."""
    if len(y) == 0:
        raise ValueError("aed_loss needs a non-empty target")
    if not cfg.decoder_layers:
        raise ConfigError("model has no decoder")
    enc = _as_batch(enc)
    return nc.reshape(_decoder_losses(cfg, params, enc, [enc.shape[1]], [list(y)]), ())


def aed_score(cfg: ModelConfig, params, enc, y: Sequence[int]) -> float:
    with nc.no_grad():
        return -aed_loss(cfg, params, enc, y).item()


def aed_scores(cfg: ModelConfig, params, enc, ys: Sequence[Sequence[int]]) -> list[float]:
    """:func:`aed_score` for several hypotheses over the same encoder output."""
    if not ys:
        return []
    with nc.no_grad():
        enc = nc.as_tensor(enc).data
        if enc.ndim == 3:
            enc = enc[0]
        out = [math.nan] * len(ys)
        idx = [i for i, y in enumerate(ys) if len(y) > 0]
        for i in range(len(ys)):
            if len(ys[i]) == 0:
                out[i] = -math.inf
        if idx:
            batch = Tensor(np.broadcast_to(enc, (len(idx),) + enc.shape).copy())
            losses = _decoder_losses(cfg, params, batch, [enc.shape[0]] * len(idx), [list(ys[i]) for i in idx])
            for i, v in zip(idx, losses.data):
                out[i] = -float(v)
    return out


def log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Lattices:
    """Per-utterance log-probability lattices from one encoder pass."""

    primary: list[np.ndarray]
    taps: dict[str, list[np.ndarray]]
    top: list[np.ndarray]


def infer(cfg: ModelConfig, params, feats: Sequence[np.ndarray]) -> Lattices:
    with nc.no_grad():
        hiddens, lengths = encode_batch(cfg, params, feats)
        prim = log_probs(head_logits(params, "ctc", hiddens[-1]).data)
        taps = {t.key: log_probs(head_logits(params, f"tap.{t.key}", hiddens[t.layer - 1]).data)
                for t in cfg.taps}
    cut = lambda a: [a[b, :lengths[b]] for b in range(len(feats))]
    return Lattices(cut(prim), {k: cut(v) for k, v in taps.items()}, cut(hiddens[-1].data))


def tap_lattice(cfg: ModelConfig, params, x: np.ndarray, unit: str) -> np.ndarray:
    tap = cfg.tap(unit)
    return infer(cfg, params, [np.asarray(x, dtype=np.float64)]).taps[tap.key][0]


def tap_score(cfg: ModelConfig, params, x: np.ndarray, unit: str, y_unit: Sequence[int]) -> float:
    """log P(y_unit | x) under the tap head for ``unit``; -inf when infeasible."""
    return ctc_label_score(tap_lattice(cfg, params, x, unit), y_unit)


# checkpoints ---------------------------------------------------------------------------

def save_checkpoint(cfg: ModelConfig, params: Mapping[str, Tensor], path) -> None:
    text = cfg.to_json().encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(text)), text]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (size,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig.from_json(take(size).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block ({exc})") from exc
    params: dict[str, Tensor] = {}
    while pos < len(raw):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if set(params) != set(init_params(cfg, 0)):
        raise CheckpointFormatError(f"{path}: parameter set does not match its config")
    return cfg, params
