"""Layer placement, attention -> Mamba-2 conversion and cached greedy decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .layers import AttentionParams, attention_scale
from .mamba import Mamba2Params, mamba2_step, random_dynamics, random_mamba2
from .model import ATTENTION, ATTN_KEYS, MAMBA2, HybridModel, is_distill_trainable
from .tensor import Parameter, Tensor, no_grad

STRATEGIES = ("evenly", "beginning", "middle", "end")
INITS = ("transfer", "random")


class EmptyPlanError(ContractError):
    pass


@dataclass(frozen=True)
class LayerPlan:
    n_layers: int
    mamba_positions: tuple[int, ...]
    strategy: str = "evenly"
    ratio: float = 0.0

    def __post_init__(self):
        pos = self.mamba_positions
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ContractError(f"plan positions must be strictly increasing: {pos}")
        if pos and (pos[0] < 0 or pos[-1] >= self.n_layers):
            raise ContractError(f"plan positions out of range [0, {self.n_layers}): {pos}")

    @property
    def m(self) -> int:
        return len(self.mamba_positions)

    def mixers(self) -> list[str]:
        chosen = set(self.mamba_positions)
        return [MAMBA2 if i in chosen else ATTENTION for i in range(self.n_layers)]


def n_replaced(n_layers: int, ratio: float) -> int:
    # half-up rounding; at least one layer for any positive ratio
    m = int(math.floor(ratio * n_layers + 0.5))
    return max(m, 1) if ratio > 0 else 0


def plan_placement(n_layers: int, ratio: float, strategy: str = "evenly", allow_empty: bool = False) -> LayerPlan:
    """Choose which layers become Mamba-2.

    ``evenly`` puts the i-th replaced layer at ``floor((i + 0.5) * L / m)``;
    the other strategies take a contiguous run at the start, centre or end.
    """
    if n_layers < 1:
        raise ContractError("need at least one layer")
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"ratio must lie in [0, 1], got {ratio}")
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    m = n_replaced(n_layers, ratio)
    if m == 0:
        if not allow_empty:
            raise EmptyPlanError(f"ratio {ratio} replaces no layers out of {n_layers}")
        return LayerPlan(n_layers, (), strategy, ratio)
    if strategy == "evenly":
        pos = [int(math.floor((i + 0.5) * n_layers / m)) for i in range(m)]
    elif strategy == "beginning":
        pos = list(range(m))
    elif strategy == "middle":
        start = (n_layers - m) // 2
        pos = list(range(start, start + m))
    else:
        pos = list(range(n_layers - m, n_layers))
    return LayerPlan(n_layers, tuple(pos), strategy, ratio)


def _copy_param(p: Parameter) -> Parameter:
    return Parameter(p.name, Tensor(p.tensor.data.copy(), requires_grad=True), p.trainable)


def transfer_mamba2(
    attn: AttentionParams,
    rng: np.random.Generator,
    fold_scale: bool = False,
    d_skip: float = 0.0,
) -> Mamba2Params:
    """Mamba-2 mixer initialized from attention: x <- V, B <- K, C <- Q, out <- O.

    dt and A are drawn at random. D starts at ``d_skip`` (0 by default, since
    the attention being replaced has no skip path). With ``fold_scale`` the
    1/sqrt(d) attention scaling is folded into W_C.
    """
    d, h = attn.d, attn.n_heads
    dtype = attn.W_Q.dtype
    dyn = random_dynamics(d, h, rng, dtype, d_skip)
    wc = attn.W_Q.data * attention_scale(d) if fold_scale else attn.W_Q.data

    def t(a):
        return Tensor(np.array(a, dtype=dtype), requires_grad=True)

    return Mamba2Params(W_x=t(attn.W_V.data), W_B=t(attn.W_K.data), W_C=t(wc), W_O=t(attn.W_O.data), n_heads=h, **dyn)


def convert_model(
    teacher: HybridModel,
    plan: LayerPlan,
    init: str = "transfer",
    rng: np.random.Generator | None = None,
    n_heads: int | None = None,
    d_skip: float = 0.0,
) -> HybridModel:
    """Student with the planned attention mixers swapped for Mamba-2 mixers.

    Every other weight is copied verbatim. Only Mamba-2 mixer weights and the
    connector stay trainable.
    """
    if plan.n_layers != teacher.n_layers:
        raise ContractError(f"plan is for {plan.n_layers} layers, teacher has {teacher.n_layers}")
    if init not in INITS:
        raise ContractError(f"unknown init {init!r}; expected one of {INITS}")
    heads = teacher.config.n_heads if n_heads is None else n_heads
    if heads != teacher.config.n_heads:
        raise DimensionError(f"head mismatch: attention has {teacher.config.n_heads}, Mamba-2 config {heads}")
    for i in plan.mamba_positions:
        if teacher.mixers[i] != ATTENTION:
            raise ContractError(f"layer {i} is not an attention layer")
    rng = rng if rng is not None else np.random.default_rng(0)
    mixers = list(teacher.mixers)
    for i in plan.mamba_positions:
        mixers[i] = MAMBA2
    params: dict[str, Parameter] = {}
    for name, p in teacher.params.items():
        parts = name.split(".")
        is_replaced = parts[0] == "layers" and parts[2] == "mixer" and int(parts[1]) in plan.mamba_positions
        if is_replaced:
            if parts[3] != ATTN_KEYS[0]:
                continue
            i = int(parts[1])
            attn = teacher.mixer(i)
            if init == "transfer":
                mp = transfer_mamba2(attn, rng, d_skip=d_skip)
            else:
                mp = random_mamba2(attn.d, heads, rng, dtype=attn.W_Q.dtype, d_skip=d_skip)
            for key in ("W_x", "W_B", "W_C", "W_dt", "b_dt", "A_log", "D", "W_O"):
                full = f"layers.{i}.mixer.{key}"
                params[full] = Parameter(full, getattr(mp, key), True)
            continue
        params[name] = _copy_param(p)
    for name, p in params.items():
        p.trainable = is_distill_trainable(name, mixers)
    return HybridModel(teacher.config, mixers, params, plan=plan, init=init)


# ------------------------------------------------------------------ caching
CACHE_OVERHEAD_BYTES = 8  # the int64 position counter


class GenCache:
    """Decoding state: growing K/V per attention layer, fixed SSM state per Mamba-2 layer."""

    def __init__(self, model: HybridModel, batch: int = 1, capacity: int = 64):
        cfg = model.config
        self.model_id = id(model)
        self.mixers = list(model.mixers)
        self.batch = batch
        self.dtype = model.dtype
        self.pos = 0
        H, P = cfg.n_heads, cfg.d_head
        self.kv: dict[int, list[np.ndarray]] = {}
        self.ssm: dict[int, np.ndarray] = {}
        # weights resolved once; decoding never builds a graph
        self.layers = [model.layer(i) for i in range(cfg.n_layers)]
        for i, kind in enumerate(model.mixers):
            if kind == ATTENTION:
                self.kv[i] = [np.zeros((batch, H, capacity, P), self.dtype) for _ in range(2)]
            else:
                self.ssm[i] = np.zeros((batch, H, P, P), self.dtype)

    def append_kv(self, i: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        K, V = self.kv[i]
        t = self.pos
        if t >= K.shape[2]:
            grow = lambda a: np.concatenate([a, np.zeros_like(a)], axis=2)  # noqa: E731
            K, V = grow(K), grow(V)
            self.kv[i] = [K, V]
        K[:, :, t] = k
        V[:, :, t] = v
        return K[:, :, : t + 1], V[:, :, : t + 1]

    def entries(self) -> int:
        """Number of cached scalars currently in use."""
        n = sum(K[:, :, : self.pos].size + V[:, :, : self.pos].size for K, V in self.kv.values())
        return n + sum(h.size for h in self.ssm.values())

    def nbytes(self) -> int:
        """Bytes of cache in use, measured from the stored arrays."""
        used = sum(K[:, :, : self.pos].nbytes + V[:, :, : self.pos].nbytes for K, V in self.kv.values())
        return used + sum(h.nbytes for h in self.ssm.values()) + CACHE_OVERHEAD_BYTES

    def allocated_bytes(self) -> int:
        alloc = sum(K.nbytes + V.nbytes for K, V in self.kv.values())
        return alloc + sum(h.nbytes for h in self.ssm.values()) + CACHE_OVERHEAD_BYTES


def cache_bytes_model(
    n_layers: int,
    n_mamba: int,
    d_model: int,
    n_heads: int,
    t: int,
    itemsize: int = 4,
    batch: int = 1,
) -> int:
    """Closed-form cache size after ``t`` tokens: 2*t*d per attention layer, H*P^2 per Mamba-2 layer."""
    d_head = d_model // n_heads
    entries = (n_layers - n_mamba) * 2 * t * d_model + n_mamba * n_heads * d_head * d_head
    return entries * itemsize * batch + CACHE_OVERHEAD_BYTES


def _layer_norm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * gain + bias


def _silu_np(x):
    return x / (1.0 + np.exp(-x))


def _attention_step(attn: AttentionParams, x: np.ndarray, cache: GenCache, i: int) -> np.ndarray:
    b = x.shape[0]
    H, P = attn.n_heads, attn.d_head
    q = (x @ attn.W_Q.data).reshape(b, H, 1, P)
    k = (x @ attn.W_K.data).reshape(b, H, P)
    v = (x @ attn.W_V.data).reshape(b, H, P)
    K, V = cache.append_kv(i, k, v)
    s = (q @ np.swapaxes(K, -1, -2)) * attention_scale(attn.d)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    w = s / s.sum(axis=-1, keepdims=True)
    return (w @ V).reshape(b, H * P) @ attn.W_O.data


def decode_step(model: HybridModel, cache: GenCache, emb: np.ndarray) -> np.ndarray:
    """Advance the cache by one position given its input embedding (b, d); returns logits (b, V)."""
    if cache.model_id != id(model) or cache.mixers != model.mixers:
        raise ContractError("cache was built for a different model")
    if cache.pos >= model.config.max_len:
        raise DimensionError(f"position {cache.pos} exceeds max_len {model.config.max_len}")
    g = lambda name: model.params[name].tensor.data  # noqa: E731
    x = emb + g("embed.positions")[cache.pos]
    for i, layer in enumerate(cache.layers):
        n1, n2, mlp = layer.norm1, layer.norm2, layer.mlp
        hx = _layer_norm_np(x, n1.gain.data, n1.bias.data)
        if isinstance(layer.mixer, AttentionParams):
            x = x + _attention_step(layer.mixer, hx, cache, i)
        else:
            y, cache.ssm[i] = mamba2_step(layer.mixer, hx, cache.ssm[i])
            x = x + y
        hx = _layer_norm_np(x, n2.gain.data, n2.bias.data)
        x = x + _silu_np(hx @ mlp.W_in.data + mlp.b_in.data) @ mlp.W_out.data + mlp.b_out.data
    cache.pos += 1
    x = _layer_norm_np(x, g("final_norm.gain"), g("final_norm.bias"))
    return x @ g("head.W")


def prefill(model: HybridModel, cache: GenCache, ids: np.ndarray, prefix: np.ndarray | None = None) -> np.ndarray:
    """Feed prefix features then tokens (b, n) through the cache; returns logits of each token (b, n, V)."""
    ids = np.atleast_2d(np.asarray(ids))
    if prefix is not None and prefix.shape[1] > 0:
        proj = prefix.astype(model.dtype) @ model.tensor("connector.W").data + model.tensor("connector.b").data
        for j in range(proj.shape[1]):
            decode_step(model, cache, proj[:, j])
    emb = model.tensor("embed.tokens").data
    out = [decode_step(model, cache, emb[ids[:, t]]) for t in range(ids.shape[1])]
    return np.stack(out, axis=1)


def generate(
    model: HybridModel,
    prompt,
    n_new: int,
    cache: GenCache | None = None,
    prefix: np.ndarray | None = None,
    return_logits: bool = False,
):
    """Greedy continuation of ``prompt`` (1-D or (b, n)) using the incremental cache."""
    prompt = np.asarray(prompt)
    single = prompt.ndim == 1
    ids = np.atleast_2d(prompt)
    if ids.shape[1] == 0:
        raise ContractError("prompt must be nonempty")
    if n_new < 0:
        raise ContractError("n_new must be nonnegative")
    cache = cache if cache is not None else GenCache(model, batch=ids.shape[0])
    logits = prefill(model, cache, ids, prefix)[:, -1]
    emb = model.tensor("embed.tokens").data
    new, steps = [], []
    for j in range(n_new):
        tok = logits.argmax(axis=-1)
        new.append(tok)
        steps.append(logits)
        if j + 1 < n_new:
            logits = decode_step(model, cache, emb[tok])
    toks = np.stack(new, axis=1) if new else np.zeros((ids.shape[0], 0), dtype=np.int64)
    if single:
        toks = toks[0]
    if return_logits:
        return toks, (np.stack(steps, axis=1) if steps else np.zeros((ids.shape[0], 0, model.config.vocab_size)))
    return toks


def generate_uncached(model: HybridModel, prompt, n_new: int, prefix: np.ndarray | None = None):
    """Greedy continuation by full recomputation at every step; returns tokens and per-step logits."""
    ids = np.atleast_2d(np.asarray(prompt))
    new, steps = [], []
    with no_grad():
        for _ in range(n_new):
            logits = model.forward(ids, prefix=prefix).data[:, -1]
            tok = logits.argmax(axis=-1)
            new.append(tok)
            steps.append(logits)
            ids = np.concatenate([ids, tok[:, None]], axis=1)
    toks = np.stack(new, axis=1) if new else np.zeros((ids.shape[0], 0), dtype=np.int64)
    return toks, (np.stack(steps, axis=1) if steps else np.zeros((ids.shape[0], 0, model.config.vocab_size)))
