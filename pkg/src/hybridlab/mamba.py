"""Mamba-2 style selective-SSM mixer.

Per head, with scalar decay ``a_t = exp(dt_t * A)`` and state of shape
(d_head, d_head)::

    h_t = a_t * h_{t-1} + dt_t * outer(B_t, x_t)
    y_t = C_t^T h_t + D * x_t

The sequential scan is a single graph node with a hand-written backward.
:func:`selective_scan_materialized` builds the lower-triangular semiseparable
matrix explicitly and is only meant as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError
from .layers import AttentionParams, attention_scale, merge_heads
from .tensor import Tensor, function

# exp() of this underflows to exactly 0 in float32 and float64, so A = -0 and a_t = 1
DECAY_OFF_A_LOG = -1.0e4
DT_MIN, DT_MAX = 1e-3, 1e-1
A_INIT_RANGE = (1.0, 16.0)


@dataclass
class Mamba2Params:
    W_x: Tensor
    W_B: Tensor
    W_C: Tensor
    W_dt: Tensor
    b_dt: Tensor
    A_log: Tensor
    D: Tensor
    W_O: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.W_x.shape[0]
        for w in (self.W_x, self.W_B, self.W_C, self.W_O):
            if w.shape != (d, d):
                raise DimensionError(f"Mamba-2 projections must be {d}x{d}, got {w.shape}")
        if self.n_heads <= 0 or d % self.n_heads:
            raise DimensionError(f"d={d} is not divisible by n_heads={self.n_heads}")
        h = self.n_heads
        if self.W_dt.shape != (d, h) or self.b_dt.shape != (h,):
            raise DimensionError(f"dt projection must be {d}x{h} with bias ({h},)")
        if self.A_log.shape != (h,) or self.D.shape != (h,):
            raise DimensionError(f"A_log and D must have shape ({h},)")

    @property
    def d(self) -> int:
        return self.W_x.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_dt_bias(n_heads: int, rng: np.random.Generator) -> np.ndarray:
    """Bias such that softplus(bias) is log-uniform in [DT_MIN, DT_MAX]."""
    dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=n_heads))
    return inverse_softplus(dt)


def init_a_log(n_heads: int, rng: np.random.Generator) -> np.ndarray:
    return np.log(rng.uniform(*A_INIT_RANGE, size=n_heads))


def random_dynamics(d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, d_skip: float = 1.0) -> dict[str, Tensor]:
    """The parameters no attention weight maps onto: W_dt, b_dt, A_log and D.

    Drawn first and in a fixed order, so transfer and random conversions with
    the same seed share identical dynamics.
    """

    def t(a):
        return Tensor(np.asarray(a).astype(dtype), requires_grad=True)

    return {
        "W_dt": t(rng.normal(0.0, 0.02, size=(d, n_heads))),
        "b_dt": t(init_dt_bias(n_heads, rng)),
        "A_log": t(init_a_log(n_heads, rng)),
        "D": t(np.full(n_heads, d_skip)),
    }


def random_mamba2(d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, d_skip: float = 1.0) -> Mamba2Params:
    """Fresh Mamba-2 mixer with every weight drawn at random."""
    dyn = random_dynamics(d, n_heads, rng, dtype, d_skip)
    std = 1.0 / math.sqrt(d)

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    return Mamba2Params(W_x=w(d, d), W_B=w(d, d), W_C=w(d, d), W_O=w(d, d), n_heads=n_heads, **dyn)


def attention_equivalence_mode(attn: AttentionParams, n_heads: int | None = None) -> Mamba2Params:
    """Mamba-2 mixer whose output equals recurrent softmax-free attention.

    x <- V, B <- K, C <- Q / sqrt(d), dt fixed at 1, decay disabled, no skip.
    """
    if n_heads is not None and n_heads != attn.n_heads:
        raise DimensionError(f"head count mismatch: attention {attn.n_heads}, mamba {n_heads}")
    d, h = attn.d, attn.n_heads
    dtype = attn.W_Q.dtype
    return Mamba2Params(
        W_x=Tensor(attn.W_V.data.copy(), requires_grad=True),
        W_B=Tensor(attn.W_K.data.copy(), requires_grad=True),
        W_C=Tensor((attn.W_Q.data * attention_scale(d)).astype(dtype), requires_grad=True),
        W_dt=Tensor(np.zeros((d, h), dtype=dtype), requires_grad=True),
        b_dt=Tensor(np.full(h, inverse_softplus(1.0), dtype=dtype), requires_grad=True),
        A_log=Tensor(np.full(h, DECAY_OFF_A_LOG, dtype=dtype), requires_grad=True),
        D=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        W_O=Tensor(attn.W_O.data.copy(), requires_grad=True),
        n_heads=h,
    )


# ------------------------------------------------------------------ the scan
def _scan_forward(x, B, C, dt, A, D, h0):
    """All arrays batched: x, B, C (b, n, H, P); dt (b, n, H); h0 (b, H, P, P)."""
    a = np.exp(dt * A)
    u = dt[..., None] * B
    b, n, H, P = x.shape
    hs = np.empty((b, n, H, P, P), dtype=x.dtype)
    h = h0
    for t in range(n):
        h = a[:, t, :, None, None] * h + u[:, t, :, :, None] * x[:, t, :, None, :]
        hs[:, t] = h
    y = np.einsum("bthn,bthnp->bthp", C, hs) + D[:, None] * x
    return y, hs, a, u


def selective_scan(
    x: Tensor,
    B: Tensor,
    C: Tensor,
    dt: Tensor,
    A: Tensor,
    D: Tensor,
    h0: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Sequential selective scan over axis -3 of ``x`` (shape (..., n, H, P)).

    Returns the output (same shape as ``x``) and the final state
    (..., H, P, P). The initial state is treated as a constant.
    """
    if x.ndim < 3:
        raise DimensionError(f"scan input must be (..., n, H, P), got {x.shape}")
    *lead, n, H, P = x.shape
    if B.shape != x.shape or C.shape != x.shape or dt.shape != (*lead, n, H):
        raise DimensionError("scan operand shapes disagree")
    if A.shape != (H,) or D.shape != (H,):
        raise DimensionError(f"A and D must have shape ({H},)")
    if n < 1:
        raise DimensionError("scan needs at least one step")
    if not np.isfinite(dt.data).all():
        raise NonFiniteError("non-finite step size")

    bsz = int(np.prod(lead)) if lead else 1
    xs = x.data.reshape(bsz, n, H, P)
    Bs = B.data.reshape(bsz, n, H, P)
    Cs = C.data.reshape(bsz, n, H, P)
    dts = dt.data.reshape(bsz, n, H)
    if h0 is None:
        h_init = np.zeros((bsz, H, P, P), dtype=x.dtype)
    else:
        if h0.shape != (*lead, H, P, P):
            raise DimensionError(f"state shape {h0.shape} does not match {(*lead, H, P, P)}")
        h_init = h0.reshape(bsz, H, P, P).astype(x.dtype)
    A_, D_ = A.data, D.data
    y, hs, a, u = _scan_forward(xs, Bs, Cs, dts, A_, D_, h_init)

    def backward(g):
        gy = g.reshape(bsz, n, H, P)
        gC = np.einsum("bthp,bthnp->bthn", gy, hs)
        gD = (gy * xs).sum(axis=(0, 1, 3))
        ghs = np.empty_like(hs)
        carry = np.zeros((bsz, H, P, P), dtype=hs.dtype)
        for t in range(n - 1, -1, -1):
            gh = Cs[:, t, :, :, None] * gy[:, t, :, None, :] + carry
            ghs[:, t] = gh
            carry = a[:, t, :, None, None] * gh
        hprev = np.concatenate([h_init[:, None], hs[:, :-1]], axis=1)
        ga = np.einsum("bthnp,bthnp->bth", ghs, hprev)
        gu = np.einsum("bthnp,bthp->bthn", ghs, xs)
        gx = D_[:, None] * gy + np.einsum("bthnp,bthn->bthp", ghs, u)
        gdt = ga * a * A_ + (gu * Bs).sum(axis=-1)
        gA = (ga * a * dts).sum(axis=(0, 1))
        gB = dts[..., None] * gu
        return (
            gx.reshape(x.shape), gB.reshape(B.shape), gC.reshape(C.shape),
            gdt.reshape(dt.shape), gA, gD,
        )

    out = function(y.reshape(x.shape), (x, B, C, dt, A, D), backward)
    return out, hs[:, -1].reshape(*lead, H, P, P).copy()


def _project(params: Mamba2Params, x: Tensor):
    *lead, n, d = x.shape
    if d != params.d:
        raise DimensionError(f"expected width {params.d}, got {d}")
    H, P = params.n_heads, params.d_head
    xt = (x @ params.W_x).reshape(*lead, n, H, P)
    Bt = (x @ params.W_B).reshape(*lead, n, H, P)
    Ct = (x @ params.W_C).reshape(*lead, n, H, P)
    dt = (x @ params.W_dt + params.b_dt).softplus()
    A = -params.A_log.exp()
    return xt, Bt, Ct, dt, A


def selective_scan_sequential(
    params: Mamba2Params,
    x: Tensor,
    state: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Full mixer (projections, scan, output projection) with carried state."""
    xt, Bt, Ct, dt, A = _project(params, x)
    y, h = selective_scan(xt, Bt, Ct, dt, A, params.D, state)
    *lead, n, H, P = y.shape
    return y.reshape(*lead, n, H * P) @ params.W_O, h


def mamba2_mixer(params: Mamba2Params, x: Tensor) -> Tensor:
    return selective_scan_sequential(params, x)[0]


# ---------------------------------------------------------------- the oracle
def semiseparable_matrix(C: np.ndarray, u: np.ndarray, a: np.ndarray) -> np.ndarray:
    """M[t, s] = C_t . u_s * prod_{r=s+1..t} a_r for s <= t, else 0 (single head).

    C, u: (n, N); a: (n,). Built entry by entry.
    """
    n = a.shape[0]
    M = np.zeros((n, n), dtype=np.result_type(C, u, a))
    for t in range(n):
        for s in range(t + 1):
            decay = 1.0
            for r in range(s + 1, t + 1):
                decay *= a[r]
            M[t, s] = float(np.dot(C[t], u[s])) * decay
    return M


def selective_scan_materialized(params: Mamba2Params, x) -> np.ndarray:
    """Mixer output computed as ``W_O (M x + D x)`` with M materialized per head.

    ``x`` is (n, d) or (batch, n, d); returns a numpy array of the same shape.
    """
    X = np.asarray(x.data if isinstance(x, Tensor) else x)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    bsz, n, d = X.shape
    H, P = params.n_heads, params.d_head
    xt = (X @ params.W_x.data).reshape(bsz, n, H, P)
    Bt = (X @ params.W_B.data).reshape(bsz, n, H, P)
    Ct = (X @ params.W_C.data).reshape(bsz, n, H, P)
    pre = X @ params.W_dt.data + params.b_dt.data
    dt = np.logaddexp(0.0, pre)
    A = -np.exp(params.A_log.data)
    a = np.exp(dt * A)
    out = np.zeros((bsz, n, H, P), dtype=X.dtype)
    for b in range(bsz):
        for hd in range(H):
            u = dt[b, :, hd, None] * Bt[b, :, hd]
            M = semiseparable_matrix(Ct[b, :, hd], u, a[b, :, hd])
            out[b, :, hd] = M @ xt[b, :, hd] + params.D.data[hd] * xt[b, :, hd]
    y = out.reshape(bsz, n, d) @ params.W_O.data
    return y[0] if squeeze else y


# ------------------------------------------------------------ decode (numpy)
def mamba2_step(params: Mamba2Params, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One decoding step without graph construction. x: (b, d); h: (b, H, P, P)."""
    bsz = x.shape[0]
    H, P = params.n_heads, params.d_head
    xt = (x @ params.W_x.data).reshape(bsz, H, P)
    Bt = (x @ params.W_B.data).reshape(bsz, H, P)
    Ct = (x @ params.W_C.data).reshape(bsz, H, P)
    dt = np.logaddexp(0.0, x @ params.W_dt.data + params.b_dt.data).astype(x.dtype)
    a = np.exp(dt * -np.exp(params.A_log.data))
    h = a[:, :, None, None] * h + (dt[:, :, None] * Bt)[:, :, :, None] * xt[:, :, None, :]
    y = (Ct[:, :, None, :] @ h)[:, :, 0] + params.D.data[:, None] * xt
    return y.reshape(bsz, H * P) @ params.W_O.data, h
