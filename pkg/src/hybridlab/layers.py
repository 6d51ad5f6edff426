"""Causal attention (softmax, softmax-free quadratic, softmax-free recurrent), MLP and norms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, concat, layer_norm, softmax


def attention_scale(d_model: int) -> float:
    # scores are divided by sqrt of the embedding width, not of the head width
    return 1.0 / math.sqrt(d_model)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for w in (self.W_Q, self.W_K, self.W_V, self.W_O):
            if w.shape != (d, d):
                raise DimensionError(f"attention projections must be {d}x{d}, got {w.shape}")
        if self.n_heads <= 0 or d % self.n_heads:
            raise DimensionError(f"d={d} is not divisible by n_heads={self.n_heads}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


def split_heads(t: Tensor, n_heads: int) -> Tensor:
    """(..., n, d) -> (..., H, n, d_head)."""
    *lead, n, d = t.shape
    t = t.reshape(*lead, n, n_heads, d // n_heads)
    k = len(lead)
    return t.transpose(*range(k), k + 1, k, k + 2)


def merge_heads(t: Tensor) -> Tensor:
    """(..., H, n, d_head) -> (..., n, d)."""
    *lead, h, n, p = t.shape
    k = len(lead)
    return t.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * p)


def _check_input(params: AttentionParams, x: Tensor) -> None:
    if x.ndim < 2 or x.shape[-1] != params.d:
        raise DimensionError(f"expected input (..., n, {params.d}), got {x.shape}")
    if x.shape[-2] < 1:
        raise DimensionError("sequence must contain at least one token")


def _qkv(params: AttentionParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    h = params.n_heads
    return (
        split_heads(x @ params.W_Q, h),
        split_heads(x @ params.W_K, h),
        split_heads(x @ params.W_V, h),
    )


def causal_attention(params: AttentionParams, x: Tensor) -> Tensor:
    """Multi-head causal softmax attention over the last two axes of ``x``."""
    _check_input(params, x)
    q, k, v = _qkv(params, x)
    scores = (q @ k.T) * attention_scale(params.d)
    weights = softmax(scores, axis=-1, mask=causal_mask(x.shape[-2]))
    return merge_heads(weights @ v) @ params.W_O


def softmax_free_attention_quadratic(params: AttentionParams, x: Tensor) -> Tensor:
    """Causal attention with the softmax removed, via an explicit masked n x n score matrix."""
    _check_input(params, x)
    q, k, v = _qkv(params, x)
    mask = causal_mask(x.shape[-2]).astype(x.dtype)
    scores = (q @ k.T) * attention_scale(params.d) * mask
    return merge_heads(scores @ v) @ params.W_O


def softmax_free_attention_recurrent(
    params: AttentionParams,
    x: Tensor,
    state: Tensor | None = None,
    return_state: bool = False,
):
    """Softmax-free attention run as a linear RNN.

    Per head the state accumulates ``h_t = h_{t-1} + K_t^T V_t`` and emits
    ``y_t = (Q_t / sqrt(d)) h_t``. Passing the returned state back in continues
    the sequence exactly, so chunked and one-shot runs agree bit for bit.
    """
    _check_input(params, x)
    q, k, v = _qkv(params, x)
    q = q * attention_scale(params.d)
    *lead, h, n, p = q.shape
    if state is None:
        state = Tensor(np.zeros((*lead, h, p, p), dtype=x.dtype))
    outs = []
    for t in range(n):
        kt = k[..., t : t + 1, :]
        vt = v[..., t : t + 1, :]
        state = state + kt.T @ vt
        outs.append(q[..., t : t + 1, :] @ state)
    y = merge_heads(concat(outs, axis=-2)) @ params.W_O
    if return_state:
        return y, state
    return y


@dataclass
class MLPParams:
    W_in: Tensor
    b_in: Tensor
    W_out: Tensor
    b_out: Tensor


def mlp(params: MLPParams, x: Tensor) -> Tensor:
    return ((x @ params.W_in + params.b_in).silu()) @ params.W_out + params.b_out


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


def norm(params: NormParams, x: Tensor) -> Tensor:
    return layer_norm(x, params.gain, params.bias)


@dataclass
class DecoderLayer:
    """Pre-norm residual block. ``mixer`` is an attention or Mamba-2 parameter set."""

    mixer: object
    mlp: MLPParams
    norm1: NormParams
    norm2: NormParams

    @property
    def kind(self) -> str:
        return "attention" if isinstance(self.mixer, AttentionParams) else "mamba2"


def apply_mixer(mixer, x: Tensor) -> Tensor:
    if isinstance(mixer, AttentionParams):
        return causal_attention(mixer, x)
    from .mamba import mamba2_mixer

    return mamba2_mixer(mixer, x)


def decoder_layer_forward(layer: DecoderLayer, x: Tensor, mixer_fn=None) -> Tensor:
    """``x + mixer(norm1(x))`` followed by ``+ mlp(norm2(.))``.

    ``mixer_fn`` overrides how the mixer is applied (used to swap in the
    softmax-free attention forms in tests).
    """
    if x.shape[-1] != layer.norm1.gain.shape[0]:
        raise DimensionError(f"layer width {layer.norm1.gain.shape[0]} does not match input {x.shape}")
    mixed = (mixer_fn or apply_mixer)(layer.mixer, norm(layer.norm1, x))
    x = x + mixed
    return x + mlp(layer.mlp, norm(layer.norm2, x))
