"""Binary checkpoints carrying weights, model config, layer plan and init provenance.

Layout (all integers little-endian)::

    magic b"HYLBCKPT" | u32 version | u32 header_len | header (utf-8 key=value text)
    u32 n_records, then per record:
    u32 name_len | name | 2-byte dtype tag | u8 rank | u64 dims[rank] | raw values
"""

from __future__ import annotations

import dataclasses
import os
import struct

import numpy as np

from .config import emit_pairs, format_value, parse_pairs, parse_value
from .errors import ConfigError, ContractError
from .hybrid import LayerPlan
from .model import ATTENTION, MAMBA2, HybridModel, ModelConfig, from_arrays, is_distill_trainable

MAGIC = b"HYLBCKPT"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): b"f4", np.dtype("<f8"): b"f8", np.dtype("<i8"): b"i8"}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ContractError):
    pass


def header_pairs(model: HybridModel) -> list[tuple[str, str]]:
    pairs = [(f"model.{f.name}", format_value(getattr(model.config, f.name))) for f in dataclasses.fields(ModelConfig)]
    pairs.append(("mixers", ",".join(model.mixers)))
    pairs.append(("init", model.init))
    plan = model.plan
    if plan is not None:
        pairs += [
            ("plan.positions", ",".join(map(str, plan.mamba_positions)) or "-"),
            ("plan.strategy", plan.strategy),
            ("plan.ratio", format_value(float(plan.ratio))),
        ]
    pairs += [(f"meta.{k}", format_value(model.meta[k])) for k in sorted(model.meta)]
    return pairs


def to_bytes(model: HybridModel) -> bytes:
    header = emit_pairs(header_pairs(model)).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = p.tensor.data
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = DTYPE_TAGS.get(le.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + tag + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(le).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _model_config(h: dict[str, str]) -> ModelConfig:
    kw = {}
    for f in dataclasses.fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in h:
            raise CheckpointError(f"header missing {key}")
        kw[f.name] = parse_value(h[key], int, key)
    return ModelConfig(**kw)


def from_bytes(buf: bytes) -> HybridModel:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        h = parse_pairs(r.take(hlen).decode("utf-8"))
        config = _model_config(h)
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad header: {exc}") from exc
    mixers = h.get("mixers", "").split(",")
    if len(mixers) != config.n_layers or any(m not in (ATTENTION, MAMBA2) for m in mixers):
        raise CheckpointError(f"bad mixers record {h.get('mixers')!r}")
    arrays = {}
    (n,) = r.unpack("<I")
    for _ in range(n):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag = r.take(2)
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag!r}")
        dt = TAG_DTYPES[tag]
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    init = h.get("init", "teacher")
    if init == "teacher":
        trainable = None
    else:
        trainable = {k for k in arrays if is_distill_trainable(k, mixers)}
    model = from_arrays(config, mixers, arrays, trainable)
    model.init = init
    if "plan.positions" in h:
        pos = () if h["plan.positions"] == "-" else tuple(int(x) for x in h["plan.positions"].split(","))
        model.plan = LayerPlan(config.n_layers, pos, h["plan.strategy"], float(h["plan.ratio"]))
    model.meta = {k[5:]: v for k, v in h.items() if k.startswith("meta.")}
    return model


def save(model: HybridModel, path) -> None:
    """Write ``model`` to ``path``, creating missing parent directories."""
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path) -> HybridModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
