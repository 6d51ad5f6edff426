import numpy as np
import pytest

from hybridlab.hybrid import convert_model, plan_placement
from hybridlab.model import ModelConfig, init_teacher
from hybridlab.seeding import substream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_teacher(seed=0, dtype=np.float64, vocab=9, d=8, n_layers=2, n_heads=2, max_len=32, prefix_width=0):
    cfg = ModelConfig(vocab_size=vocab, d_model=d, n_layers=n_layers, n_heads=n_heads, max_len=max_len, prefix_width=prefix_width)
    return init_teacher(cfg, substream(seed, "test.teacher"), dtype)


def tiny_hybrid(seed=0, ratio=0.5, strategy="evenly", init="random", **kw):
    teacher = tiny_teacher(seed, **kw)
    plan = plan_placement(teacher.n_layers, ratio, strategy)
    return teacher, convert_model(teacher, plan, init, substream(seed, "test.convert"))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
