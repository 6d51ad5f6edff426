"""Decode throughput and cache memory versus generated length."""

from __future__ import annotations

import csv
import gc
import io
import json
import statistics
import time
import tracemalloc
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .errors import ContractError
from .hybrid import GenCache, cache_bytes_model, generate
from .model import HybridModel

MIN_RUN_SECONDS = 0.010
CSV_COLUMNS = ("model", "length", "tps", "cache_bytes")


class TimerResolutionWarning(UserWarning):
    """A timed run was too short for the clock to resolve reliably."""


@dataclass
class BenchPoint:
    length: int
    tokens_per_second: float
    median_seconds: float
    cache_bytes: int
    peak_resident_estimate: int | None = None

    @property
    def latency_per_token(self) -> float:
        return self.median_seconds / self.length


@dataclass
class BenchReport:
    tag: str
    prompt_len: int
    n_layers: int
    n_mamba: int
    points: list[BenchPoint] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        lengths = self.lengths
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ContractError(f"lengths must be strictly increasing, got {lengths}")

    @property
    def lengths(self) -> list[int]:
        return [p.length for p in self.points]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in self.points:
            w.writerow([self.tag, p.length, f"{p.tokens_per_second:.6g}", p.cache_bytes])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> BenchReport:
        raw = json.loads(text)
        raw["points"] = [BenchPoint(**p) for p in raw["points"]]
        return cls(**raw)


def _check_single_threaded() -> None:
    busy = [p for p in threadpool_info() if p.get("num_threads", 1) > 1]
    if busy:
        names = ", ".join(f"{p.get('internal_api')}={p['num_threads']}" for p in busy)
        raise ContractError(f"benchmark refuses to run with parallel thread pools: {names}")


def _timed_generate(model, prompt, n):
    # collector paused while timing, as timeit does
    enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        toks = generate(model, prompt, n)
        return time.perf_counter() - t0, toks
    finally:
        if enabled:
            gc.enable()


def _peak_bytes(model, prompt, n) -> int:
    tracemalloc.start()
    try:
        generate(model, prompt, n)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def run_decode_benches(
    models: dict[str, HybridModel],
    prompt_len: int,
    lengths: list[int],
    repeats: int = 5,
    warmup: int = 2,
    seed: int = 0,
    track_memory: bool = False,
) -> dict[str, BenchReport]:
    """Median greedy decode time for each model and generated length, plus the cache size it leaves behind.

    Each round (``warmup`` discarded, then ``repeats`` kept) times every
    (length, model) pair once, so slow drift on the host affects every model
    and length alike. Timing runs with every
    BLAS/OpenMP pool pinned to one thread and the garbage collector paused.
    ``track_memory`` adds one untimed run per length under tracemalloc for the
    allocator high-water mark.
    """
    if not models:
        raise ContractError("no models to benchmark")
    if not lengths:
        raise ContractError("lengths must be nonempty")
    if repeats < 3:
        raise ContractError("repeats must be >= 3")
    if prompt_len < 1:
        raise ContractError("prompt_len must be >= 1")
    vocab = {m.config.vocab_size for m in models.values()}
    for tag, model in models.items():
        if prompt_len + max(lengths) > model.config.max_len:
            raise ContractError(f"{tag}: prompt_len + length exceeds max_len {model.config.max_len}")
    prompt = np.random.default_rng(seed).integers(0, min(vocab), size=prompt_len)
    report_warnings: dict[str, list[str]] = {tag: [] for tag in models}
    points: dict[str, list[BenchPoint]] = {tag: [] for tag in models}
    times = {(tag, n): [] for tag in models for n in lengths}
    refs: dict[tuple[str, int], np.ndarray] = {}
    with threadpool_limits(limits=1):
        _check_single_threaded()
        # every round visits every (length, model) pair, so drift hits all of them alike
        for rnd in range(warmup + repeats):
            for n in lengths:
                for tag, model in models.items():
                    dt, toks = _timed_generate(model, prompt, n)
                    if rnd < warmup:
                        continue
                    key = (tag, n)
                    if key not in refs:
                        refs[key] = toks
                    elif not np.array_equal(refs[key], toks):
                        raise ContractError(f"{tag}: greedy decode not deterministic at length {n}")
                    times[key].append(dt)
        for n in lengths:
            for tag, model in models.items():
                med = statistics.median(times[(tag, n)])
                if med < MIN_RUN_SECONDS:
                    msg = f"{tag} length {n}: median run {med * 1e3:.2f} ms is below timer resolution floor; increase length"
                    warnings.warn(msg, TimerResolutionWarning, stacklevel=2)
                    report_warnings[tag].append(msg)
                peak = _peak_bytes(model, prompt, n) if track_memory else None
                points[tag].append(BenchPoint(n, n / med, med, _checked_cache_bytes(model, prompt, n), peak))
    return {
        tag: BenchReport(tag, prompt_len, m.config.n_layers, len(m.mamba_positions), points[tag], report_warnings[tag])
        for tag, m in models.items()
    }


def _checked_cache_bytes(model: HybridModel, prompt, n: int) -> int:
    cfg = model.config
    # the last generated token is never fed back, so the cache holds prompt_len + n - 1 positions
    t = len(prompt) + n - 1
    cache = GenCache(model)
    generate(model, prompt, n, cache=cache)
    measured = cache.nbytes()
    modeled = cache_bytes_model(cfg.n_layers, len(model.mamba_positions), cfg.d_model, cfg.n_heads, t, np.dtype(model.dtype).itemsize)
    if measured != modeled:
        raise ContractError(f"cache bytes {measured} != model {modeled} at t={t}")
    return measured


def run_decode_bench(
    model: HybridModel,
    prompt_len: int,
    lengths: list[int],
    repeats: int = 5,
    warmup: int = 2,
    tag: str | None = None,
    seed: int = 0,
    track_memory: bool = False,
) -> BenchReport:
    """Single-model form of :func:`run_decode_benches`."""
    tag = tag or ",".join(model.mixers)
    return run_decode_benches({tag: model}, prompt_len, lengths, repeats, warmup, seed, track_memory)[tag]


@dataclass
class Comparison:
    baseline: str
    candidate: str
    lengths: list[int]
    speedup: list[float]
    memory_reduction: list[float]

    def table(self) -> str:
        rows = [f"{'length':>8} {'speedup':>9} {'mem_reduction':>14}"]
        for n, s, r in zip(self.lengths, self.speedup, self.memory_reduction):
            rows.append(f"{n:>8d} {s:>9.3f} {r:>14.4f}")
        return "\n".join(rows)

    def plot_data(self) -> dict:
        return {
            "baseline": self.baseline,
            "candidate": self.candidate,
            "x": self.lengths,
            "series": {"speedup": self.speedup, "memory_reduction": self.memory_reduction},
        }


def compare_reports(baseline: BenchReport, candidate: BenchReport) -> Comparison:
    if baseline.lengths != candidate.lengths:
        raise ContractError(f"length mismatch: {baseline.lengths} vs {candidate.lengths}")
    speedup = [c.tokens_per_second / b.tokens_per_second for b, c in zip(baseline.points, candidate.points)]
    reduction = [1.0 - c.cache_bytes / b.cache_bytes for b, c in zip(baseline.points, candidate.points)]
    return Comparison(baseline.tag, candidate.tag, baseline.lengths, speedup, reduction)


def is_non_decreasing(values, rel_tol: float = 0.0) -> bool:
    """True when each value is at least the previous one, allowing ``rel_tol`` relative slack."""
    return all(b >= a * (1.0 - rel_tol) for a, b in zip(values, values[1:]))
