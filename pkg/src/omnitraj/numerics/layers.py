"""Parameter initialisers and the transformer building blocks.

Parameters live in a flat ``{name: Tensor}`` dict; every block takes that
dict plus its name prefix, so checkpoints are just the dict.
"""
import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    swap_last,
    transpose,
)


class ConfigError(ValueError):
    pass


def xavier_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params, prefix, rng, d_in, d_out, zero=False):
    w = np.zeros((d_in, d_out)) if zero else xavier_uniform(rng, d_in, d_out)
    params[f"{prefix}.w"] = Tensor(w, name=f"{prefix}.w")
    params[f"{prefix}.b"] = Tensor(np.zeros(d_out), name=f"{prefix}.b")


def init_layer_norm(params, prefix, d):
    params[f"{prefix}.g"] = Tensor(np.ones(d), name=f"{prefix}.g")
    params[f"{prefix}.b"] = Tensor(np.zeros(d), name=f"{prefix}.b")


def apply_linear(params, prefix, x):
    return linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def apply_layer_norm(params, prefix, x, eps=1e-5):
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def init_mlp(params, prefix, rng, d_in, d_hidden, d_out, zero_out=False):
    init_linear(params, f"{prefix}.fc1", rng, d_in, d_hidden)
    init_linear(params, f"{prefix}.fc2", rng, d_hidden, d_out, zero=zero_out)


def apply_mlp(params, prefix, x):
    return apply_linear(params, f"{prefix}.fc2", gelu(apply_linear(params, f"{prefix}.fc1", x)))


# -- attention --------------------------------------------------------------

def init_mha(params, prefix, rng, d_model, zero_out=False):
    for name in ("q", "k", "v"):
        init_linear(params, f"{prefix}.{name}", rng, d_model, d_model)
    init_linear(params, f"{prefix}.o", rng, d_model, d_model, zero=zero_out)


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def mha(params, prefix, q, k, v, n_heads, key_valid=None):
    """Multi-head scaled dot-product attention.

    ``q``: [B, Lq, D]; ``k``, ``v``: [B, Lk, D]; ``key_valid``: bool [B, Lk]
    or any shape broadcastable to [B, heads, Lq, Lk].  Invalid keys get
    weight exactly 0.
    """
    d_model = q.shape[-1]
    if d_model % n_heads:
        raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    if k.shape != v.shape or k.shape[-1] != d_model or q.shape[0] != k.shape[0]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    b, lq, _ = q.shape
    lk = k.shape[1]
    dh = d_model // n_heads
    qh = _split_heads(apply_linear(params, f"{prefix}.q", q), n_heads)
    kh = _split_heads(apply_linear(params, f"{prefix}.k", k), n_heads)
    vh = _split_heads(apply_linear(params, f"{prefix}.v", v), n_heads)
    scores = matmul(qh, swap_last(kh)) * (1.0 / math.sqrt(dh))
    valid = None
    if key_valid is not None:
        valid = np.asarray(key_valid, dtype=bool)
        if valid.ndim == 2:
            valid = valid[:, None, None, :]
        valid = np.broadcast_to(valid, (b, n_heads, lq, lk))
    attn = softmax(scores, axis=-1, valid=valid)
    ctx = transpose(matmul(attn, vh), (0, 2, 1, 3))
    return apply_linear(params, f"{prefix}.o", reshape(ctx, (b, lq, d_model)))


# -- transformer blocks (pre-norm) ------------------------------------------

def init_encoder(params, prefix, rng, d_model, n_layers):
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        init_layer_norm(params, f"{p}.ln1", d_model)
        init_mha(params, f"{p}.attn", rng, d_model)
        init_layer_norm(params, f"{p}.ln2", d_model)
        init_mlp(params, f"{p}.ff", rng, d_model, 4 * d_model, d_model)
    init_layer_norm(params, f"{prefix}.ln_out", d_model)


def encoder(params, prefix, x, n_layers, n_heads, key_valid):
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        h = apply_layer_norm(params, f"{p}.ln1", x)
        x = x + mha(params, f"{p}.attn", h, h, h, n_heads, key_valid)
        x = x + apply_mlp(params, f"{p}.ff", apply_layer_norm(params, f"{p}.ln2", x))
    return apply_layer_norm(params, f"{prefix}.ln_out", x)


def init_decoder(params, prefix, rng, d_model, n_layers):
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        init_layer_norm(params, f"{p}.ln1", d_model)
        init_mha(params, f"{p}.self", rng, d_model)
        init_layer_norm(params, f"{p}.ln2", d_model)
        init_mha(params, f"{p}.cross", rng, d_model)
        init_layer_norm(params, f"{p}.ln3", d_model)
        init_mlp(params, f"{p}.ff", rng, d_model, 4 * d_model, d_model)
    init_layer_norm(params, f"{prefix}.ln_out", d_model)


def decoder(params, prefix, x, memory, n_layers, n_heads, memory_valid):
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        h = apply_layer_norm(params, f"{p}.ln1", x)
        x = x + mha(params, f"{p}.self", h, h, h, n_heads)
        h = apply_layer_norm(params, f"{p}.ln2", x)
        x = x + mha(params, f"{p}.cross", h, memory, memory, n_heads, memory_valid)
        x = x + apply_mlp(params, f"{p}.ff", apply_layer_norm(params, f"{p}.ln3", x))
    return apply_layer_norm(params, f"{prefix}.ln_out", x)


def sinusoidal_encoding(n_positions, d_model):
    pos = np.arange(n_positions)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_positions, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


__all__ = [
    "ConfigError",
    "apply_layer_norm",
    "apply_linear",
    "apply_mlp",
    "concat",
    "decoder",
    "encoder",
    "init_decoder",
    "init_encoder",
    "init_layer_norm",
    "init_linear",
    "init_mha",
    "init_mlp",
    "mha",
    "sinusoidal_encoding",
    "xavier_uniform",
]
