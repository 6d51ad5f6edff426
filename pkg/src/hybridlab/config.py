"""Flat ``key=value`` run configuration with a canonical text form.

Every key is ``section.field``. Parsing rejects unknown or duplicate keys and
values that do not fit the field type; emitting writes every key in a fixed
order, so ``emit(parse(emit(c)))`` is byte-identical to ``emit(c)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import TaskSpec
from .distill import DistillConfig, TrainConfig
from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class PlanConfig:
    ratio: float = 0.25
    strategy: str = "evenly"
    init: str = "transfer"
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"
    dtype: str = "float32"


SECTIONS = {
    "model": ModelConfig,
    "plan": PlanConfig,
    "task": TaskSpec,
    "teacher": TrainConfig,
    "distill": DistillConfig,
    "output": OutputConfig,
}

DOCS = {
    "model.vocab_size": "token vocabulary size",
    "model.d_model": "embedding width d",
    "model.n_layers": "decoder layers L",
    "model.n_heads": "heads per mixer; d_head = d / n_heads",
    "model.max_len": "longest sequence including prefix positions",
    "model.mlp_ratio": "MLP hidden width as a multiple of d",
    "model.prefix_width": "connector input width; 0 disables the connector",
    "plan.ratio": "fraction of layers converted to Mamba-2",
    "plan.strategy": "evenly | beginning | middle | end",
    "plan.init": "transfer | random",
    "plan.seed": "seed for random Mamba-2 initialisation",
    "task.kind": "copy | associative_recall | char_lm",
    "task.vocab_size": "task vocabulary (must not exceed model.vocab_size)",
    "task.seq_len": "tokens per example",
    "task.n_train": "training examples",
    "task.n_eval": "evaluation examples",
    "task.seed": "dataset seed",
    "task.prefix_count": "prefix feature vectors per example",
    "task.prefix_width": "width of each prefix vector",
    "teacher.lr_peak": "teacher peak learning rate",
    "teacher.warmup_frac": "fraction of steps warming up",
    "teacher.decay_frac": "fraction of steps decaying to zero",
    "teacher.weight_decay": "decoupled AdamW weight decay",
    "teacher.adam_beta1": "AdamW beta1",
    "teacher.adam_beta2": "AdamW beta2",
    "teacher.batch_size": "sequences per step",
    "teacher.total_steps": "optimizer steps",
    "teacher.seed": "teacher init and batch seed",
    "teacher.label_smoothing": "CE label smoothing for the teacher",
    "distill.alpha": "weight of the layer-alignment loss",
    "distill.beta": "weight of the KL distribution loss",
    "distill.gamma": "weight of the cross-entropy loss",
    "distill.temperature": "softmax temperature for the KL loss",
    "distill.lr_peak": "peak learning rate",
    "distill.warmup_frac": "fraction of steps warming up",
    "distill.decay_frac": "fraction of steps decaying to zero",
    "distill.weight_decay": "decoupled AdamW weight decay",
    "distill.adam_beta1": "AdamW beta1",
    "distill.adam_beta2": "AdamW beta2",
    "distill.adam_eps": "AdamW epsilon",
    "distill.batch_size": "sequences per step",
    "distill.total_steps": "optimizer steps",
    "distill.seed": "batch order seed",
    "distill.eval_every": "evaluate every n steps; 0 only at the end",
    "distill.layer_loss_squared": "use squared L2 in the layer loss",
    "distill.layer_loss_target": "layer | mixer: align whole-layer or mixer outputs",
    "output.dir": "directory for checkpoints and reports",
    "output.dtype": "float32 | float64",
}

_DEFAULTS = {"model": ModelConfig(vocab_size=16)}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=16))
    plan: PlanConfig = field(default_factory=PlanConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.task.vocab_size > self.model.vocab_size:
            raise ConfigError("task.vocab_size exceeds model.vocab_size")
        if self.output.dtype not in ("float32", "float64"):
            raise ConfigError(f"output.dtype must be float32 or float64, got {self.output.dtype!r}")

    def to_text(self) -> str:
        return emit(self)


# ------------------------------------------------------------ value codecs
def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    if not raw or any(c.isspace() or c in "=#" for c in raw):
        raise ConfigError(f"{key}: string values must be nonempty without spaces, '=' or '#'")
    return raw


def parse_pairs(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments (whole-line or trailing) ignored, duplicates rejected."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def emit_pairs(pairs) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


# --------------------------------------------------------------- RunConfig
def _section_default(name: str):
    return _DEFAULTS.get(name) or SECTIONS[name]()


def all_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def parse(text: str) -> RunConfig:
    pairs = parse_pairs(text)
    unknown = sorted(set(pairs) - set(all_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    sections = {}
    for name in SECTIONS:
        base = _section_default(name)
        updates = {}
        for f in dataclasses.fields(base):
            key = f"{name}.{f.name}"
            if key in pairs:
                updates[f.name] = parse_value(pairs[key], type(getattr(base, f.name)), key)
        try:
            sections[name] = dataclasses.replace(base, **updates)
        except (ValueError, RuntimeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    cfg = RunConfig(**sections)
    cfg.task.validate()
    return cfg


def emit(cfg: RunConfig) -> str:
    pairs = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            pairs.append((f"{name}.{f.name}", format_value(getattr(sec, f.name))))
    return emit_pairs(pairs)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def save(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(emit(cfg))


def describe_keys() -> str:
    """One documented line per key with its default, in canonical order."""
    lines = []
    for key in all_keys():
        sec, name = key.split(".", 1)
        default = format_value(getattr(_section_default(sec), name))
        lines.append(f"{key}={default}  # {DOCS[key]}")
    return "\n".join(lines) + "\n"
