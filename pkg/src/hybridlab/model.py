"""Decoder-only language model whose layers mix attention and Mamba-2 mixers."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError
from .layers import AttentionParams, DecoderLayer, MLPParams, NormParams, decoder_layer_forward, norm
from .mamba import Mamba2Params
from .tensor import Parameter, Tensor, concat, embedding

ATTENTION = "attention"
MAMBA2 = "mamba2"

ATTN_KEYS = ("W_Q", "W_K", "W_V", "W_O")
MAMBA_KEYS = ("W_x", "W_B", "W_C", "W_dt", "b_dt", "A_log", "D", "W_O")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 128
    mlp_ratio: int = 4
    prefix_width: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DimensionError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class HybridModel:
    """Token + learned position embeddings, decoder layers, final norm, output head.

    ``mixers[i]`` is ``"attention"`` or ``"mamba2"``. A teacher is simply a
    model whose mixers are all attention. Parameters live in ``params`` keyed
    by dotted path (``layers.3.mixer.W_Q``).
    """

    config: ModelConfig
    mixers: list[str]
    params: dict[str, Parameter]
    plan: object = None
    init: str = "teacher"
    meta: dict = field(default_factory=dict)

    # --------------------------------------------------------------- access
    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    @property
    def dtype(self) -> np.dtype:
        return self.tensor("embed.tokens").dtype

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def mamba_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.mixers) if m == MAMBA2]

    @property
    def has_connector(self) -> bool:
        return "connector.W" in self.params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def num_parameters(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def mixer(self, i: int):
        pre = f"layers.{i}.mixer."
        t = {k[len(pre):]: p.tensor for k, p in self.params.items() if k.startswith(pre)}
        if self.mixers[i] == ATTENTION:
            return AttentionParams(**{k: t[k] for k in ATTN_KEYS}, n_heads=self.config.n_heads)
        return Mamba2Params(**{k: t[k] for k in MAMBA_KEYS}, n_heads=self.config.n_heads)

    def layer(self, i: int) -> DecoderLayer:
        pre = f"layers.{i}."
        g = self.tensor
        return DecoderLayer(
            mixer=self.mixer(i),
            mlp=MLPParams(g(pre + "mlp.W_in"), g(pre + "mlp.b_in"), g(pre + "mlp.W_out"), g(pre + "mlp.b_out")),
            norm1=NormParams(g(pre + "norm1.gain"), g(pre + "norm1.bias")),
            norm2=NormParams(g(pre + "norm2.gain"), g(pre + "norm2.bias")),
        )

    def clone(self) -> HybridModel:
        return copy.deepcopy(self)

    # -------------------------------------------------------------- forward
    def embed(self, ids: np.ndarray, prefix: np.ndarray | None = None) -> Tensor:
        """(B, n) ids and optional (B, c, w) prefix features -> (B, c + n, d)."""
        ids = np.asarray(ids)
        x = embedding(self.tensor("embed.tokens"), ids)
        if prefix is not None and prefix.shape[1] > 0:
            if not self.has_connector:
                raise DimensionError("model has no connector for prefix features")
            w = self.tensor("connector.W")
            if prefix.shape[-1] != w.shape[0]:
                raise DimensionError(f"prefix width {prefix.shape[-1]} != connector width {w.shape[0]}")
            pre = Tensor(np.asarray(prefix, dtype=self.dtype)) @ w + self.tensor("connector.b")
            x = concat([pre, x], axis=1)
        n = x.shape[1]
        if n > self.config.max_len:
            raise DimensionError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        return x + self.tensor("embed.positions")[:n]

    def forward_layer(self, i: int, x: Tensor, mixer_fn=None) -> Tensor:
        return decoder_layer_forward(self.layer(i), x, mixer_fn=mixer_fn)

    def head(self, x: Tensor) -> Tensor:
        x = norm(NormParams(self.tensor("final_norm.gain"), self.tensor("final_norm.bias")), x)
        return x @ self.tensor("head.W")

    def forward(self, ids, prefix: np.ndarray | None = None, return_hidden: bool = False):
        """Logits at the token positions.

        With ``return_hidden`` also returns the residual stream entering each
        layer plus the final one (``hidden[i]`` is layer i's input, ``hidden[i+1]``
        its output), including prefix positions.
        """
        ids = np.asarray(ids)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
            if prefix is not None:
                prefix = np.asarray(prefix)[None]
        x = self.embed(ids, prefix)
        hidden = [x]
        for i in range(self.n_layers):
            x = self.forward_layer(i, x)
            hidden.append(x)
        c = x.shape[1] - ids.shape[1]
        logits = self.head(x[:, c:] if c else x)
        if squeeze:
            logits = logits[0]
        if return_hidden:
            return logits, hidden
        return logits

    __call__ = forward

    def describe(self) -> dict:
        out = asdict(self.config)
        out["mixers"] = ",".join(self.mixers)
        return out


# ------------------------------------------------------------- construction
def _normal(rng, shape, std, dtype):
    return rng.normal(0.0, std, size=shape).astype(dtype)


def attention_params(d: int, rng: np.random.Generator, dtype, out_std: float) -> dict[str, np.ndarray]:
    std = 1.0 / math.sqrt(d)
    return {
        "W_Q": _normal(rng, (d, d), std, dtype),
        "W_K": _normal(rng, (d, d), std, dtype),
        "W_V": _normal(rng, (d, d), std, dtype),
        "W_O": _normal(rng, (d, d), out_std, dtype),
    }


def init_teacher(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> HybridModel:
    """All-attention model with fresh weights; every parameter trainable."""
    d, V, L = config.d_model, config.vocab_size, config.n_layers
    hid = config.mlp_ratio * d
    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * L)
    arrays: dict[str, np.ndarray] = {
        "embed.tokens": _normal(rng, (V, d), 0.5, dtype),
        "embed.positions": _normal(rng, (config.max_len, d), 0.1, dtype),
    }
    if config.prefix_width:
        arrays["connector.W"] = _normal(rng, (config.prefix_width, d), 1.0 / math.sqrt(config.prefix_width), dtype)
        arrays["connector.b"] = np.zeros(d, dtype)
    for i in range(L):
        pre = f"layers.{i}."
        arrays[pre + "norm1.gain"] = np.ones(d, dtype)
        arrays[pre + "norm1.bias"] = np.zeros(d, dtype)
        for k, v in attention_params(d, rng, dtype, out_std).items():
            arrays[pre + "mixer." + k] = v
        arrays[pre + "norm2.gain"] = np.ones(d, dtype)
        arrays[pre + "norm2.bias"] = np.zeros(d, dtype)
        arrays[pre + "mlp.W_in"] = _normal(rng, (d, hid), 1.0 / math.sqrt(d), dtype)
        arrays[pre + "mlp.b_in"] = np.zeros(hid, dtype)
        arrays[pre + "mlp.W_out"] = _normal(rng, (hid, d), 1.0 / math.sqrt(hid) / math.sqrt(2 * L), dtype)
        arrays[pre + "mlp.b_out"] = np.zeros(d, dtype)
    arrays["final_norm.gain"] = np.ones(d, dtype)
    arrays["final_norm.bias"] = np.zeros(d, dtype)
    arrays["head.W"] = _normal(rng, (d, V), 1.0 / math.sqrt(d), dtype)
    params = {k: Parameter(k, Tensor(v, requires_grad=True), True) for k, v in arrays.items()}
    return HybridModel(config, [ATTENTION] * L, params)


def from_arrays(
    config: ModelConfig,
    mixers: list[str],
    arrays: dict[str, np.ndarray],
    trainable: set[str] | None = None,
) -> HybridModel:
    params = {
        k: Parameter(k, Tensor(v, requires_grad=True), trainable is None or k in trainable)
        for k, v in arrays.items()
    }
    return HybridModel(config, list(mixers), params)


def is_distill_trainable(name: str, mixers: list[str]) -> bool:
    """Only Mamba-2 mixer weights and the connector train during distillation."""
    if name.startswith("connector."):
        return True
    parts = name.split(".")
    return len(parts) >= 3 and parts[0] == "layers" and parts[2] == "mixer" and mixers[int(parts[1])] == MAMBA2
