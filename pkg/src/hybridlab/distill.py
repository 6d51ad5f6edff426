"""Distillation losses, AdamW with a warm-up/stable/decay schedule, and the training loops."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import IGNORE, Dataset, iter_batches, sample_batch
from .errors import ContractError, NonFiniteError
from .layers import apply_mixer, norm
from .model import HybridModel
from .seeding import substream
from .tensor import Parameter, Tensor, log_softmax, no_grad

STEP_FIELDS = ("step", "lr", "L_layer", "L_prob", "L_ce", "total")
LAYER_TARGETS = ("layer", "mixer")

LOSS_PRESETS = {
    "ce": dict(alpha=0.0, beta=0.0, gamma=1.0),
    "layer": dict(alpha=1.0, beta=0.0, gamma=0.0),
    "prob": dict(alpha=0.0, beta=1.0, gamma=0.0),
    "prob+layer": dict(alpha=1.0, beta=1.0, gamma=0.0),
    "prob+layer+ce": dict(alpha=1.0, beta=1.0, gamma=1.0),
}


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    temperature: float = 2.0
    lr_peak: float = 2e-4
    warmup_frac: float = 0.1
    decay_frac: float = 0.1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_size: int = 64
    total_steps: int = 1000
    seed: int = 0
    eval_every: int = 0
    layer_loss_squared: bool = False
    layer_loss_target: str = "layer"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("loss weights must be nonnegative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise ContractError("at least one loss weight must be positive")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.warmup_frac < 0 or self.decay_frac < 0 or self.warmup_frac + self.decay_frac > 1:
            raise ContractError("warmup_frac + decay_frac must lie in [0, 1]")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ContractError("total_steps and batch_size must be positive")
        if self.layer_loss_target not in LAYER_TARGETS:
            raise ContractError(f"layer_loss_target must be one of {LAYER_TARGETS}")

    def with_preset(self, name: str) -> DistillConfig:
        return replace(self, **LOSS_PRESETS[name])


# ------------------------------------------------------------------- losses
def _as_array(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z)


def prob_loss(z_teacher, z_student: Tensor, temperature: float) -> Tensor:
    """T^2 * KL(softmax(z_t/T) || softmax(z_s/T)), averaged over all token positions."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    zt = _as_array(z_teacher)
    if zt.shape != z_student.shape:
        raise ContractError(f"logit shapes differ: {zt.shape} vs {z_student.shape}")
    zt = zt.astype(z_student.dtype) / temperature
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_pt = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = log_softmax(z_student * (1.0 / temperature), axis=-1)
    per_token = ((log_ps * -1.0 + log_pt) * pt).sum(axis=-1)
    return per_token.mean() * (temperature**2)


def ce_loss(logits: Tensor, targets, ignore_index: int = IGNORE, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions not equal to ``ignore_index``.

    With ``label_smoothing`` = eps the target distribution puts 1 - eps on the
    label and spreads eps uniformly over the vocabulary.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= V)):
        raise ContractError(f"target outside [0, {V})")
    count = int(valid.sum())
    if count == 0:
        raise ContractError("no scored positions")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    idx = np.nonzero(valid)
    onehot[(*idx, targets[idx])] = 1.0
    if label_smoothing:
        onehot = (1.0 - label_smoothing) * onehot + (label_smoothing / V) * valid[..., None]
        onehot = onehot.astype(logits.dtype)
    return (log_softmax(logits, axis=-1) * onehot).sum() * (-1.0 / count)


@dataclass
class LayerTapes:
    """Teacher residual stream entering and leaving each replaced layer.

    ``mixer_outputs`` (optional) holds the teacher mixer's output on the
    normalized layer input, for alignment at the mixer rather than the layer.
    """

    positions: tuple[int, ...]
    inputs: dict[int, object]
    outputs: dict[int, object]
    mixer_outputs: dict[int, object] | None = None


def _mixer_input(model: HybridModel, i: int, x: Tensor) -> Tensor:
    return norm(model.layer(i).norm1, x)


def capture_tapes(teacher: HybridModel, ids, positions, prefix=None, mixer: bool = False) -> tuple[np.ndarray, LayerTapes]:
    with no_grad():
        logits, hidden = teacher.forward(ids, prefix=prefix, return_hidden=True)
        mixed = None
        if mixer:
            mixed = {i: apply_mixer(teacher.mixer(i), _mixer_input(teacher, i, hidden[i])).data for i in positions}
    tapes = LayerTapes(
        tuple(positions),
        {i: hidden[i].data for i in positions},
        {i: hidden[i + 1].data for i in positions},
        mixed,
    )
    return logits.data, tapes


def _detached(t) -> Tensor:
    return t.detach() if isinstance(t, Tensor) else Tensor(np.asarray(t))


def layer_loss(tapes: LayerTapes, student: HybridModel, squared: bool = False, target: str = "layer") -> Tensor:
    """Sum over replaced layers of the mean per-token Euclidean distance to the teacher.

    Each student layer sees the teacher's hidden state entering that layer;
    the tapes themselves never receive gradient. ``target="mixer"`` compares
    mixer outputs on the normalized input instead of whole-layer outputs.
    """
    if target not in LAYER_TARGETS:
        raise ContractError(f"unknown layer-loss target {target!r}")
    if tuple(tapes.positions) != tuple(student.mamba_positions):
        raise ContractError(f"tape positions {tapes.positions} != student plan {student.mamba_positions}")
    if target == "mixer" and tapes.mixer_outputs is None:
        raise ContractError("tapes were captured without mixer outputs")
    total = None
    for i in tapes.positions:
        ref = tapes.outputs if target == "layer" else tapes.mixer_outputs
        x_in, want = _detached(tapes.inputs[i]), _detached(ref[i])
        if x_in.shape[-1] != student.config.d_model or want.shape != x_in.shape:
            raise ContractError(f"tape shapes for layer {i} do not match the student")
        if target == "layer":
            got = student.forward_layer(i, x_in)
        else:
            got = apply_mixer(student.mixer(i), _mixer_input(student, i, x_in))
        diff = got - want
        term = diff.square().sum(axis=-1).mean() if squared else diff.norm(axis=-1).mean()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=student.dtype))
    return total


def total_loss(l_layer, l_prob, l_ce, config: DistillConfig):
    return config.alpha * l_layer + config.beta * l_prob + config.gamma * l_ce


# ---------------------------------------------------------------- optimizer
def lr_at(step: int, total_steps: int, lr_peak: float, warmup_frac: float = 0.1, decay_frac: float = 0.1) -> float:
    """Warm-up / stable / decay: linear 0 -> peak, flat, then linear down to 0 at ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warm = int(round(warmup_frac * total_steps))
    decay = int(round(decay_frac * total_steps))
    if warm and step < warm:
        return lr_peak * step / warm
    if decay and step >= total_steps - decay:
        return lr_peak * (total_steps - step) / decay
    return lr_peak


def schedule_lr(step: int, config: DistillConfig) -> float:
    return lr_at(step, config.total_steps, config.lr_peak, config.warmup_frac, config.decay_frac)


class AdamW:
    """Adam with decoupled weight decay; touches only parameters marked trainable."""

    def __init__(self, params: list[Parameter], beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                continue
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            w = p.tensor.data
            update = lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * w)
            p.tensor.data = (w - update).astype(w.dtype)


# ------------------------------------------------------------------ reports
@dataclass
class TrainingReport:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final_eval_ce: float = float("nan")
    final_eval_acc: float = float("nan")
    wall_clock_s: float = 0.0

    def loss_series(self, key: str = "total") -> list[float]:
        return [r[key] for r in self.records]

    def steps_to_reach(self, threshold: float) -> int | None:
        """First evaluated step whose eval CE is at or below ``threshold``."""
        for e in self.evals:
            if e["eval_ce"] <= threshold:
                return e["step"]
        return None

    def summary(self, include_timing: bool = True) -> dict:
        out = {
            "steps": len(self.records),
            "final_eval_ce": self.final_eval_ce,
            "final_eval_acc": self.final_eval_acc,
            "evals": self.evals,
        }
        if include_timing:
            out["wall_clock_s"] = self.wall_clock_s
        return out

    def to_jsonl(self, include_timing: bool = True) -> str:
        lines = [json.dumps({k: r[k] for k in STEP_FIELDS}) for r in self.records]
        lines.append(json.dumps({"summary": self.summary(include_timing)}))
        return "\n".join(lines) + "\n"


def evaluate(model: HybridModel, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Teacher-forced CE and argmax accuracy over the scored positions of ``data``."""
    nll, correct, count = 0.0, 0, 0
    with no_grad():
        for b in iter_batches(data, batch_size):
            logits = model.forward(b.inputs, prefix=b.prefix).data.astype(np.float64)
            valid = b.targets != IGNORE
            z = logits - logits.max(axis=-1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            idx = np.nonzero(valid)
            nll -= lp[(*idx, b.targets[idx])].sum()
            correct += int((logits.argmax(axis=-1)[valid] == b.targets[valid]).sum())
            count += int(valid.sum())
    return nll / count, correct / count


def _check_finite(step: int, **losses) -> None:
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"non-finite loss at step {step}: {bad}")


def distill_run(
    teacher: HybridModel,
    student: HybridModel,
    train: Dataset,
    eval_data: Dataset | None,
    config: DistillConfig,
    log=None,
) -> TrainingReport:
    """Single-stage distillation of ``teacher`` into ``student``.

    Each step: teacher forward without graph (logits and layer tapes), student
    forward, weighted loss, backward, AdamW on the student's trainable
    parameters only. Losses with zero weight are still computed for the report
    but contribute no gradient.
    """
    if student.n_layers != teacher.n_layers or student.config.d_model != teacher.config.d_model:
        raise ContractError("student was not converted from this teacher")
    rng = substream(config.seed, "distill.batches")
    opt = AdamW(student.parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay)
    report = TrainingReport()
    positions = student.mamba_positions
    start = time.perf_counter()
    for step in range(config.total_steps):
        if config.eval_every and eval_data is not None and step % config.eval_every == 0:
            report.evals.append({"step": step, "eval_ce": evaluate(student, eval_data)[0]})
        lr = schedule_lr(step, config)
        batch = sample_batch(train, config.batch_size, rng)
        t_logits, tapes = capture_tapes(
            teacher, batch.inputs, positions, batch.prefix, mixer=config.layer_loss_target == "mixer"
        )

        needs_logits = config.beta > 0 or config.gamma > 0
        s_logits = student.forward(batch.inputs, prefix=batch.prefix) if needs_logits else None
        with no_grad():
            if s_logits is None:
                s_logits = student.forward(batch.inputs, prefix=batch.prefix)
            detached = s_logits.detach()
        weighted = []
        values = {}
        for key, weight, fn in (
            ("L_layer", config.alpha, lambda z: layer_loss(tapes, student, config.layer_loss_squared, config.layer_loss_target)),
            ("L_prob", config.beta, lambda z: prob_loss(t_logits, z, config.temperature)),
            ("L_ce", config.gamma, lambda z: ce_loss(z, batch.targets)),
        ):
            if weight > 0:
                term = fn(s_logits)
                weighted.append(term * weight)
            else:
                with no_grad():
                    term = fn(detached)
            values[key] = term.item()
        total = weighted[0]
        for t in weighted[1:]:
            total = total + t
        rec = {"step": step, "lr": lr, **values, "total": total.item()}
        _check_finite(step, **{k: rec[k] for k in ("L_layer", "L_prob", "L_ce", "total")})
        report.records.append(rec)
        if opt.params and total.requires_grad:
            student.zero_grad()
            total.backward()
            opt.step(lr)
        if log is not None:
            log(rec)
    report.wall_clock_s = time.perf_counter() - start
    if eval_data is not None:
        ce, acc = evaluate(student, eval_data)
        report.final_eval_ce, report.final_eval_acc = ce, acc
        if config.eval_every:
            report.evals.append({"step": config.total_steps, "eval_ce": ce})
    return report


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 3e-3
    warmup_frac: float = 0.1
    decay_frac: float = 0.1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    batch_size: int = 32
    total_steps: int = 2000
    seed: int = 0
    label_smoothing: float = 0.0


def train_supervised(model: HybridModel, train: Dataset, eval_data: Dataset | None, config: TrainConfig, log=None) -> TrainingReport:
    """Plain next-token CE training of every trainable parameter (used for the teacher)."""
    rng = substream(config.seed, "teacher.batches")
    opt = AdamW(model.parameters(), config.adam_beta1, config.adam_beta2, 1e-8, config.weight_decay)
    report = TrainingReport()
    start = time.perf_counter()
    for step in range(config.total_steps):
        lr = lr_at(step, config.total_steps, config.lr_peak, config.warmup_frac, config.decay_frac)
        batch = sample_batch(train, config.batch_size, rng)
        loss = ce_loss(model.forward(batch.inputs, prefix=batch.prefix), batch.targets, label_smoothing=config.label_smoothing)
        value = loss.item()
        _check_finite(step, L_ce=value)
        model.zero_grad()
        loss.backward()
        opt.step(lr)
        rec = {"step": step, "lr": lr, "L_layer": 0.0, "L_prob": 0.0, "L_ce": value, "total": value}
        report.records.append(rec)
        if log is not None:
            log(rec)
    report.wall_clock_s = time.perf_counter() - start
    if eval_data is not None:
        report.final_eval_ce, report.final_eval_acc = evaluate(model, eval_data)
    return report


def snapshot_frozen(model: HybridModel) -> dict[str, np.ndarray]:
    return {k: p.tensor.data.copy() for k, p in model.params.items() if not p.trainable}


def frozen_changes(model: HybridModel, snapshot: dict[str, np.ndarray]) -> list[str]:
    """Names of frozen parameters whose bytes differ from ``snapshot``."""
    return [k for k, v in snapshot.items() if model.params[k].tensor.data.tobytes() != v.tobytes()]


def config_dict(config) -> dict:
    return asdict(config)
