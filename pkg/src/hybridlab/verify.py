"""Oracle suites: each compares an implementation against an independent formulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import capture_tapes, ce_loss, layer_loss, prob_loss
from .hybrid import convert_model, generate, generate_uncached, plan_placement
from .layers import AttentionParams, causal_attention, softmax_free_attention_quadratic, softmax_free_attention_recurrent
from .mamba import (
    attention_equivalence_mode,
    mamba2_mixer,
    random_mamba2,
    selective_scan,
    selective_scan_materialized,
)
from .model import ModelConfig, init_teacher
from .seeding import substream
from .tensor import Tensor, gradcheck


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst {self.worst:.3e} (tol {self.tol:.0e})"


def random_attention(rng, d: int, n_heads: int, dtype=np.float32, scale: float = 1.0) -> AttentionParams:
    w = lambda: Tensor((rng.normal(size=(d, d)) * scale / np.sqrt(d)).astype(dtype))  # noqa: E731
    return AttentionParams(w(), w(), w(), w(), n_heads)


def _heads_for(rng, d: int) -> int:
    return int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the larger magnitude (floored at 1)."""
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def linear_attention(cases: int = 100, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Masked quadratic form against the running-state recurrence."""
    rng = substream(seed, "verify.linear_attention")
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([4, 8, 16, 32]))
        n = int(rng.integers(1, 65))
        attn = random_attention(rng, d, _heads_for(rng, d))
        x = Tensor(rng.normal(size=(n, d)).astype(np.float32))
        quad = softmax_free_attention_quadratic(attn, x).data
        rec = softmax_free_attention_recurrent(attn, x).data
        worst = max(worst, _rel_err(rec, quad))
    return SuiteResult("softmax-free attention: quadratic == recurrent", cases, worst, tol)


def ssd_oracle(cases: int = 100, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Sequential scan against the explicitly materialized semiseparable matrix."""
    rng = substream(seed, "verify.ssd")
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([4, 8, 16]))
        n = int(rng.integers(1, 33))
        params = random_mamba2(d, _heads_for(rng, d), rng, np.float32)
        params.D.data[:] = rng.normal(size=params.D.shape).astype(np.float32)
        x = rng.normal(size=(n, d)).astype(np.float32)
        seq = mamba2_mixer(params, Tensor(x)).data
        mat = selective_scan_materialized(params, x)
        worst = max(worst, _rel_err(seq, mat))
    return SuiteResult("selective scan == semiseparable matrix", cases, worst, tol)


def equivalence_mode(cases: int = 50, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Mamba-2 mixer built from attention weights in equivalence mode against recurrent softmax-free attention."""
    rng = substream(seed, "verify.equivalence")
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([4, 8, 16, 32]))
        n = int(rng.integers(1, 49))
        attn = random_attention(rng, d, _heads_for(rng, d))
        x = Tensor(rng.normal(size=(n, d)).astype(np.float32))
        ref = softmax_free_attention_recurrent(attn, x).data
        out = mamba2_mixer(attention_equivalence_mode(attn), x).data
        worst = max(worst, _rel_err(out, ref))
    return SuiteResult("attention equivalence mode == recurrent softmax-free attention", cases, worst, tol)


def _tiny_hybrid(seed: int, dtype=np.float64, vocab: int = 7, n_layers: int = 2):
    cfg = ModelConfig(vocab_size=vocab, d_model=8, n_layers=n_layers, n_heads=2, max_len=16)
    teacher = init_teacher(cfg, substream(seed, "verify.teacher"), dtype)
    student = convert_model(teacher, plan_placement(n_layers, 0.5, "evenly"), "random", substream(seed, "verify.convert"))
    return teacher, student


def gradients(seed: int = 0, tol: float = 1e-4) -> list[SuiteResult]:
    """Central differences in float64 for attention, the scan, the three losses and a 2-layer hybrid."""
    rng = substream(seed, "verify.gradients")
    out = []

    def probe(shape):
        return rng.normal(size=shape)

    # attention
    attn = random_attention(rng, 8, 2, np.float64)
    for w in (attn.W_Q, attn.W_K, attn.W_V, attn.W_O):
        w.requires_grad = True
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    r = probe((5, 8))
    err = gradcheck(lambda: (causal_attention(attn, x) * r).sum(), [x, attn.W_Q, attn.W_K, attn.W_V, attn.W_O])
    out.append(SuiteResult("gradcheck: softmax attention", 1, err, tol))

    # scan, all inputs
    n, H, P = 5, 2, 3
    xs = Tensor(rng.normal(size=(n, H, P)), requires_grad=True)
    Bs = Tensor(rng.normal(size=(n, H, P)), requires_grad=True)
    Cs = Tensor(rng.normal(size=(n, H, P)), requires_grad=True)
    dt = Tensor(rng.uniform(0.1, 1.0, size=(n, H)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2.0, size=H), requires_grad=True)
    D = Tensor(rng.normal(size=H), requires_grad=True)
    r = probe((n, H, P))
    err = gradcheck(lambda: (selective_scan(xs, Bs, Cs, dt, A, D)[0] * r).sum(), [xs, Bs, Cs, dt, A, D])
    out.append(SuiteResult("gradcheck: selective scan", 1, err, tol))

    # losses
    z = Tensor(rng.normal(size=(3, 4, 6)), requires_grad=True)
    zt = rng.normal(size=(3, 4, 6))
    targets = rng.integers(0, 6, size=(3, 4))
    targets[0, 0] = -1
    out.append(SuiteResult("gradcheck: prob_loss", 1, gradcheck(lambda: prob_loss(zt, z, 2.0), [z]), tol))
    out.append(SuiteResult("gradcheck: ce_loss", 1, gradcheck(lambda: ce_loss(z, targets), [z]), tol))
    teacher, student = _tiny_hybrid(seed)
    ids = rng.integers(0, 7, size=(2, 6))
    _, tapes = capture_tapes(teacher, ids, student.mamba_positions)
    mix = [p.tensor for p in student.trainable_parameters()]
    out.append(SuiteResult("gradcheck: layer_loss", 1, gradcheck(lambda: layer_loss(tapes, student), mix), tol))

    # full model, every parameter
    r = probe((2, 6, 7))
    everything = [p.tensor for p in student.parameters()]
    err = gradcheck(lambda: (student.forward(ids) * r).sum(), everything)
    out.append(SuiteResult("gradcheck: 2-layer hybrid forward", 1, err, tol))
    return out


def cached_decode(configs: int = 10, steps: int = 64, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Incremental decoding against full recomputation on random mixed-layer models."""
    rng = substream(seed, "verify.decode")
    worst = 0.0
    for c in range(configs):
        L = int(rng.integers(2, 5))
        H = int(rng.choice([1, 2, 4]))
        d = H * int(rng.choice([2, 4, 8]))
        prompt_len = int(rng.integers(1, 5))
        cfg = ModelConfig(vocab_size=11, d_model=d, n_layers=L, n_heads=H, max_len=prompt_len + steps)
        teacher = init_teacher(cfg, substream(seed + c, "verify.decode.teacher"))
        ratio = float(rng.choice([0.25, 0.5, 0.75]))
        strategy = str(rng.choice(["evenly", "beginning", "middle", "end"]))
        model = convert_model(teacher, plan_placement(L, ratio, strategy), "random", substream(seed + c, "verify.decode.convert"))
        prompt = rng.integers(0, cfg.vocab_size, size=prompt_len)
        toks, fast = generate(model, prompt, steps, return_logits=True)
        ref_toks, slow = generate_uncached(model, prompt, steps)
        if not np.array_equal(toks, ref_toks[0]):
            worst = max(worst, np.inf)
        worst = max(worst, float(np.max(np.abs(fast[0] - slow[0]))))
    return SuiteResult(f"cached decode == full recompute ({steps} steps)", configs, worst, tol)


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [
        linear_attention(seed=seed),
        ssd_oracle(seed=seed),
        equivalence_mode(seed=seed),
        *gradients(seed=seed),
        cached_decode(seed=seed),
    ]
