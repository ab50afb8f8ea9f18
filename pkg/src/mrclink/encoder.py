"""Trainable reference sequence encoder with exact analytic gradients.

Pure numpy, float64 end to end. The encoder is a post-layer-norm transformer:
token + positional embeddings, then per block (multi-head self-attention,
residual, layer norm, GELU feed-forward, residual, layer norm); the pooled
output is the hidden state at position 0.

Shapes: (B, T, D) = batch, sequence, model width; (B, H, T, dh) per head.
Parameters are immutable during a forward/backward pair; independent
sequences may be encoded in parallel, and gradient accumulation sums in a
fixed order for bitwise reproducibility.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .corpus import TokenSequence
from .errors import ModelConfigError

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_len: int
    d: int = 64
    n_layers: int = 1
    n_heads: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.max_len, self.d, self.n_layers, self.n_heads) < 1:
            raise ValueError("all encoder config fields must be positive")
        if self.d % self.n_heads != 0:
            raise ValueError("hidden width d must be divisible by n_heads")

    @property
    def d_ff(self) -> int:
        return 4 * self.d

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{k: int(d[k]) for k in ("vocab_size", "max_len", "d", "n_layers", "n_heads", "seed")})


def _block_param_names(i: int) -> list[str]:
    p = f"block{i}."
    return [
        p + "wq", p + "bq", p + "wk", p + "bk", p + "wv", p + "bv",
        p + "wo", p + "bo", p + "ln1_g", p + "ln1_b",
        p + "ffn_w1", p + "ffn_b1", p + "ffn_w2", p + "ffn_b2",
        p + "ln2_g", p + "ln2_b",
    ]


def param_names(config: EncoderConfig) -> list[str]:
    """Declaration order of all parameter tensors."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names.extend(_block_param_names(i))
    return names


def init_params(config: EncoderConfig) -> dict[str, np.ndarray]:
    """Seeded init: uniform +-1/sqrt(d) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed)
    d, dff = config.d, config.d_ff
    bound = 1.0 / np.sqrt(d)

    def uni(*shape: int) -> np.ndarray:
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {
        "tok_emb": uni(config.vocab_size, d),
        "pos_emb": uni(config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"block{i}."
        params[p + "wq"] = uni(d, d)
        params[p + "bq"] = np.zeros(d)
        params[p + "wk"] = uni(d, d)
        params[p + "bk"] = np.zeros(d)
        params[p + "wv"] = uni(d, d)
        params[p + "bv"] = np.zeros(d)
        params[p + "wo"] = uni(d, d)
        params[p + "bo"] = np.zeros(d)
        params[p + "ln1_g"] = np.ones(d)
        params[p + "ln1_b"] = np.zeros(d)
        params[p + "ffn_w1"] = uni(d, dff)
        params[p + "ffn_b1"] = np.zeros(dff)
        params[p + "ffn_w2"] = uni(dff, d)
        params[p + "ffn_b2"] = np.zeros(d)
        params[p + "ln2_g"] = np.ones(d)
        params[p + "ln2_b"] = np.zeros(d)
    return params


def zero_grads(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ----------------------------- numeric primitives -----------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-stable softmax along ``axis``."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(probs: np.ndarray, target_index: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of one index plus the gradient w.r.t. the logits.

    Probabilities are floored at 1e-30 before the log so the loss is total.
    """
    if not 0 <= target_index < probs.shape[0]:
        raise ValueError(f"target index {target_index} out of range for {probs.shape[0]} options")
    loss = -float(np.log(max(float(probs[target_index]), 1e-30)))
    grad = probs.copy()
    grad[target_index] -= 1.0
    return loss, grad


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    sum_axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=sum_axes)
    dbias = dy.sum(axis=sum_axes)
    return dx, dgain, dbias


def _gelu(u: np.ndarray):
    cdf = 0.5 * (1.0 + erf(u * _INV_SQRT2))
    return u * cdf, cdf


def _gelu_grad(u: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    return cdf + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# ----------------------------- forward / backward -----------------------------


@dataclass
class EncoderTape:
    """Everything needed to replay the backward pass of one ``encode_batch`` call."""

    config: EncoderConfig
    params: Mapping[str, np.ndarray]
    ids: np.ndarray
    lengths: np.ndarray
    layer_caches: list[dict] = field(default_factory=list)


@dataclass
class EncoderOutput:
    """Pooled position-0 representation plus the backward tape."""

    pooled: np.ndarray
    tape: EncoderTape


def encode_batch(
    params: Mapping[str, np.ndarray],
    config: EncoderConfig,
    ids: np.ndarray,
    lengths: np.ndarray | None = None,
) -> tuple[np.ndarray, EncoderTape]:
    """Encode a padded batch; positions at or past each row's length are masked
    out of attention, so pad content never reaches the pooled output.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must have shape (batch, length)")
    b, t = ids.shape
    if t > config.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {config.max_len}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if lengths is None:
        lengths = np.full(b, t, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (b,) or lengths.min() < 1 or lengths.max() > t:
            raise ValueError("lengths must be in [1, T] with one entry per row")

    d, n_heads = config.d, config.n_heads
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    key_mask = np.arange(t)[None, :] < lengths[:, None]          # (B, T)
    neg = np.where(key_mask[:, None, None, :], 0.0, -np.inf)     # (B, 1, 1, T)

    x = params["tok_emb"][ids] + params["pos_emb"][:t]
    tape = EncoderTape(config=config, params=params, ids=ids, lengths=lengths)

    for i in range(config.n_layers):
        p = f"block{i}."
        q = x @ params[p + "wq"] + params[p + "bq"]
        k = x @ params[p + "wk"] + params[p + "bk"]
        v = x @ params[p + "wv"] + params[p + "bv"]
        qh, kh, vh = (_split_heads(z, n_heads) for z in (q, k, v))
        scores = qh @ kh.swapaxes(-1, -2) * scale + neg          # (B, H, T, T)
        attn = softmax(scores, axis=-1)
        ctx = _merge_heads(attn @ vh)                            # (B, T, D)
        attn_out = ctx @ params[p + "wo"] + params[p + "bo"]
        y1, ln1_cache = _layer_norm(x + attn_out, params[p + "ln1_g"], params[p + "ln1_b"])
        pre = y1 @ params[p + "ffn_w1"] + params[p + "ffn_b1"]
        act, gelu_cdf = _gelu(pre)
        ffn_out = act @ params[p + "ffn_w2"] + params[p + "ffn_b2"]
        y2, ln2_cache = _layer_norm(y1 + ffn_out, params[p + "ln2_g"], params[p + "ln2_b"])
        tape.layer_caches.append(
            {
                "x": x, "qh": qh, "kh": kh, "vh": vh, "attn": attn, "ctx": ctx,
                "ln1": ln1_cache, "y1": y1, "pre": pre, "act": act,
                "gelu_cdf": gelu_cdf, "ln2": ln2_cache,
            }
        )
        x = y2

    pooled = x[:, 0, :].copy()
    return pooled, tape


def backprop_batch(tape: EncoderTape, pooled_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of <pooled, pooled_grad> w.r.t. every parameter tensor."""
    config, params = tape.config, tape.params
    pooled_grad = np.asarray(pooled_grad, dtype=np.float64)
    b, t = tape.ids.shape
    if pooled_grad.shape != (b, config.d):
        raise ValueError("pooled_grad shape must match (batch, d) of the encode call")
    if len(tape.layer_caches) != config.n_layers:
        raise ValueError("stale or mismatched tape")

    n_heads = config.n_heads
    scale = 1.0 / np.sqrt(config.d // n_heads)
    grads = zero_grads(params)

    dx = np.zeros((b, t, config.d))
    dx[:, 0, :] = pooled_grad

    for i in reversed(range(config.n_layers)):
        p = f"block{i}."
        c = tape.layer_caches[i]

        dsum2, dg2, db2 = _layer_norm_backward(dx, c["ln2"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dy1 = dsum2.copy()
        dffn_out = dsum2

        dact = dffn_out @ params[p + "ffn_w2"].T
        grads[p + "ffn_w2"] += c["act"].reshape(-1, config.d_ff).T @ dffn_out.reshape(-1, config.d)
        grads[p + "ffn_b2"] += dffn_out.sum(axis=(0, 1))
        dpre = dact * _gelu_grad(c["pre"], c["gelu_cdf"])
        dy1 += dpre @ params[p + "ffn_w1"].T
        grads[p + "ffn_w1"] += c["y1"].reshape(-1, config.d).T @ dpre.reshape(-1, config.d_ff)
        grads[p + "ffn_b1"] += dpre.sum(axis=(0, 1))

        dsum1, dg1, db1 = _layer_norm_backward(dy1, c["ln1"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dx_res = dsum1
        dattn_out = dsum1

        dctx = dattn_out @ params[p + "wo"].T
        grads[p + "wo"] += c["ctx"].reshape(-1, config.d).T @ dattn_out.reshape(-1, config.d)
        grads[p + "bo"] += dattn_out.sum(axis=(0, 1))

        dctx_h = _split_heads(dctx, n_heads)                       # (B, H, T, dh)
        dattn = dctx_h @ c["vh"].swapaxes(-1, -2)                  # (B, H, T, T)
        dvh = c["attn"].swapaxes(-1, -2) @ dctx_h
        a = c["attn"]
        dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
        dqh = dscores @ c["kh"] * scale
        dkh = dscores.swapaxes(-1, -2) @ c["qh"] * scale

        dq, dk, dv = (_merge_heads(z) for z in (dqh, dkh, dvh))
        x = c["x"]
        x_flat = x.reshape(-1, config.d)
        for name, dz in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[p + name] += x_flat.T @ dz.reshape(-1, config.d)
            grads[p + "b" + name[1]] += dz.sum(axis=(0, 1))
        dx = (
            dq @ params[p + "wq"].T
            + dk @ params[p + "wk"].T
            + dv @ params[p + "wv"].T
            + dx_res
        )

    flat_ids = tape.ids.reshape(-1)
    np.add.at(grads["tok_emb"], flat_ids, dx.reshape(-1, config.d))
    grads["pos_emb"][:t] += dx.sum(axis=0)
    return grads


def encode(
    params: Mapping[str, np.ndarray],
    config: EncoderConfig,
    sequence: TokenSequence | Sequence[int],
    valid_len: int | None = None,
) -> EncoderOutput:
    """Encode one sequence; ``valid_len`` masks trailing pad positions."""
    tokens = sequence.tokens if isinstance(sequence, TokenSequence) else tuple(sequence)
    ids = np.asarray([tokens], dtype=np.int64)
    lengths = None if valid_len is None else np.asarray([valid_len], dtype=np.int64)
    pooled, tape = encode_batch(params, config, ids, lengths)
    return EncoderOutput(pooled=pooled[0], tape=tape)


def backprop(output: EncoderOutput, pooled_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients over all encoder parameters for a single-sequence encode."""
    pooled_grad = np.asarray(pooled_grad, dtype=np.float64)
    if pooled_grad.shape != output.pooled.shape:
        raise ValueError("pooled_grad must match the pooled vector shape")
    return backprop_batch(output.tape, pooled_grad[None, :])


# ----------------------------- Adam with linear warmup -----------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(step=0, m=zero_grads(params), v=zero_grads(params))


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    warmup_steps: int = 0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with the learning rate ramped linearly over ``warmup_steps``.

    Pure: returns fresh parameter arrays and a fresh state. Non-finite
    gradients raise.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
    t = state.step + 1
    lr_t = lr * min(1.0, t / warmup_steps) if warmup_steps > 0 else lr
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_params[name] = p - lr_t * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Stateful convenience wrapper around ``adam_step``."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float, warmup_fraction: float, total_steps: int):
        self.lr = lr
        self.warmup_steps = int(round(warmup_fraction * total_steps))
        self.state = init_adam_state(params)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        new_params, self.state = adam_step(params, grads, self.state, self.lr, self.warmup_steps)
        return new_params


# ----------------------------- checkpoint format -----------------------------

_CKPT_MAGIC = b"MRCL1\n"


def save_checkpoint(path: str, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Binary checkpoint: JSON header line, then name/shape-prefixed float64 LE tensors."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8") + b"\n")
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", raw.ndim))
            for dim in raw.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(raw.tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelConfigError(f"{path}: not a model checkpoint")
        header_line = _read_line(fh)
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelConfigError(f"{path}: bad checkpoint header: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        try:
            while True:
                prefix = fh.read(4)
                if not prefix:
                    break
                if len(prefix) != 4:
                    raise ModelConfigError(f"{path}: truncated tensor record")
                (name_len,) = struct.unpack("<I", prefix)
                name = fh.read(name_len).decode("utf-8")
                (ndim,) = struct.unpack("<I", fh.read(4))
                shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ModelConfigError(f"{path}: truncated tensor {name!r}")
                tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        except (struct.error, UnicodeDecodeError, ValueError, MemoryError) as exc:
            raise ModelConfigError(f"{path}: corrupt tensor record: {exc}") from exc
    return header, tensors


def _read_line(fh: io.BufferedReader) -> bytes:
    out = bytearray()
    while True:
        ch = fh.read(1)
        if not ch or ch == b"\n":
            return bytes(out)
        out.extend(ch)
