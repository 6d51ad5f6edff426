import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_hybrid, tiny_teacher
from hybridlab import checkpoint, config
from hybridlab.checkpoint import CheckpointError
from hybridlab.cli import main
from hybridlab.data import BOS, CHARS, IGNORE, SEP, TaskSpec, encode_text, gen_task
from hybridlab.errors import ConfigError


# ---------------------------------------------------------------------- data
def test_copy_task_layout():
    d = gen_task(TaskSpec(kind="copy", vocab_size=10, seq_len=9, n_train=5, n_eval=3))
    x, y = d.train.inputs, d.train.targets
    k = 4
    assert np.all(x[:, 0] == BOS) and np.all(x[:, k + 1] == SEP)
    np.testing.assert_array_equal(x[:, k + 2 :], x[:, 1 : k])
    np.testing.assert_array_equal(y[:, k + 1 : 2 * k + 1], x[:, 1 : k + 1])
    assert np.all(y[:, : k + 1] == IGNORE)


def test_recall_single_pair_target_is_stored_value():
    d = gen_task(TaskSpec(kind="associative_recall", vocab_size=8, seq_len=5, n_train=20, n_eval=2))
    x, y = d.train.inputs, d.train.targets
    assert np.all(x[:, 3] == SEP) and np.all(x[:, 4] == x[:, 1])
    np.testing.assert_array_equal(y[:, 4], x[:, 2])
    assert np.all(y[:, :4] == IGNORE)


def test_recall_target_matches_queried_key():
    d = gen_task(TaskSpec(kind="associative_recall", vocab_size=16, seq_len=15, n_train=50, n_eval=2, seed=3))
    for x, y in zip(d.train.inputs, d.train.targets):
        q = np.flatnonzero(y != IGNORE)[0]
        pairs = dict(zip(x[1:q - 1:2], x[2:q - 1:2]))
        assert pairs[x[q]] == y[q]


@pytest.mark.parametrize("kind", ["copy", "associative_recall", "char_lm"])
def test_tasks_are_deterministic(kind):
    spec = TaskSpec(kind=kind, vocab_size=len(CHARS), seq_len=12, n_train=30, n_eval=5, seed=7, prefix_count=1, prefix_width=2)
    a, b = gen_task(spec), gen_task(spec)
    for x, z in ((a.train, b.train), (a.eval, b.eval)):
        np.testing.assert_array_equal(x.inputs, z.inputs)
        np.testing.assert_array_equal(x.targets, z.targets)
        np.testing.assert_array_equal(x.prefix, z.prefix)


def test_char_lm_targets_are_shifted_inputs():
    d = gen_task(TaskSpec(kind="char_lm", vocab_size=len(CHARS), seq_len=10, n_train=4, n_eval=4))
    np.testing.assert_array_equal(d.train.inputs[:, 1:], d.train.targets[:, :-1])


def test_char_lm_split_is_disjoint():
    from hybridlab.data import CORPUS

    tokens = encode_text(CORPUS)
    cut = int(0.9 * tokens.size)
    d = gen_task(TaskSpec(kind="char_lm", vocab_size=len(CHARS), seq_len=16, n_train=200, n_eval=20))
    eval_windows = {tuple(r) for r in d.eval.inputs}
    train_text = tokens[:cut]
    for w in list(eval_windows)[:5]:
        n = len(w)
        assert not any(tuple(train_text[i : i + n]) == w for i in range(cut - n + 1))


@pytest.mark.parametrize(
    "spec",
    [
        TaskSpec(kind="copy", vocab_size=4),
        TaskSpec(kind="char_lm", vocab_size=10),
        TaskSpec(kind="nope"),
        TaskSpec(prefix_count=2, prefix_width=0),
    ],
)
def test_invalid_task_specs(spec):
    with pytest.raises(ConfigError):
        gen_task(spec)


# -------------------------------------------------------------------- config
def test_config_roundtrip_is_byte_identical():
    text = config.RunConfig().to_text()
    assert config.emit(config.parse(text)) == text


def test_config_canonicalizes_loose_input():
    loose = "# comment\n\n  distill.lr_peak = 3e-3   # trailing\nmodel.d_model=32\n"
    canon = config.emit(config.parse(loose))
    assert "distill.lr_peak=0.003\n" in canon and "model.d_model=32\n" in canon
    assert config.emit(config.parse(canon)) == canon


@settings(max_examples=40, deadline=None)
@given(lr=st.floats(1e-6, 1.0, allow_nan=False), steps=st.integers(1, 10_000), squared=st.booleans())
def test_config_float_values_survive_roundtrip(lr, steps, squared):
    text = f"distill.lr_peak={lr!r}\ndistill.total_steps={steps}\ndistill.layer_loss_squared={'true' if squared else 'false'}\n"
    cfg = config.parse(text)
    assert cfg.distill.lr_peak == lr and cfg.distill.total_steps == steps and cfg.distill.layer_loss_squared is squared
    assert config.emit(config.parse(config.emit(cfg))) == config.emit(cfg)


@pytest.mark.parametrize(
    "text",
    ["model.colour=3\n", "model.d_model=6.5\n", "model.d_model=8\nmodel.d_model=8\n", "justtext\n", "distill.temperature=-1\n", "model.d_model=30\n", "plan.strategy=two words\n"],
)
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        config.parse(text)


def test_every_key_is_documented():
    assert set(config.all_keys()) == set(config.DOCS)
    assert config.parse(config.describe_keys()) == config.RunConfig()


# ---------------------------------------------------------------- checkpoint
def test_checkpoint_roundtrip_bit_exact(tmp_path):
    _, student = tiny_hybrid(dtype=np.float32, prefix_width=3)
    student.meta = {"note": "x"}
    path = tmp_path / "m.ckpt"
    checkpoint.save(student, path)
    loaded = checkpoint.load(path)
    checkpoint.save(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert loaded.plan == student.plan and loaded.init == "random" and loaded.mixers == student.mixers
    assert {p.name for p in loaded.trainable_parameters()} == {p.name for p in student.trainable_parameters()}
    for name, p in student.params.items():
        assert loaded.params[name].tensor.data.tobytes() == p.tensor.data.tobytes()


def test_save_creates_missing_directories(tmp_path):
    path = tmp_path / "a" / "b" / "t.ckpt"
    checkpoint.save(tiny_teacher(), path)
    assert checkpoint.load(path).n_layers == 2


def test_teacher_checkpoint_is_fully_trainable():
    teacher = tiny_teacher()
    loaded = checkpoint.from_bytes(checkpoint.to_bytes(teacher))
    assert loaded.plan is None and all(p.trainable for p in loaded.parameters())


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_checkpoints_rejected(mutate):
    raw = checkpoint.to_bytes(tiny_teacher(dtype=np.float32))
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(mutate(raw))


def test_checkpoint_header_is_readable_text():
    raw = checkpoint.to_bytes(tiny_hybrid(dtype=np.float32)[1])
    assert b"plan.positions=1\n" in raw and b"init=random\n" in raw and b"mixers=attention,mamba2\n" in raw


# ----------------------------------------------------------------------- cli
TINY = """\
model.vocab_size=9
model.d_model=8
model.n_layers=4
model.n_heads=2
model.max_len=64
task.vocab_size=9
task.seq_len=9
task.n_train=64
task.n_eval=16
teacher.total_steps=20
teacher.batch_size=8
distill.total_steps=5
distill.batch_size=4
distill.lr_peak=0.003
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.cfg").write_text(TINY)
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_pipeline_end_to_end(workdir, capsys):
    cfg, t, s, d = workdir / "run.cfg", workdir / "t.ckpt", workdir / "s.ckpt", workdir / "d.ckpt"
    assert run("train-teacher", "--config", cfg, "--out", t, "--report", workdir / "t.jsonl") == 0
    assert run("convert", "--teacher", t, "--ratio", 0.25, "--out", s) == 0
    assert checkpoint.load(s).plan.mamba_positions == (2,)
    assert run("distill", "--teacher", t, "--student", s, "--config", cfg, "--out", d, "--report", workdir / "d.jsonl") == 0
    capsys.readouterr()
    assert run("eval", "--model", d, "--config", cfg) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["task"] == "copy" and np.isfinite(out["eval_ce"])
    lines = (workdir / "d.jsonl").read_text().splitlines()
    assert len(lines) == 6 and "wall_clock_s" not in lines[-1]


def test_cli_is_reproducible(workdir):
    cfg = workdir / "run.cfg"
    for name in ("a", "b"):
        assert run("train-teacher", "--config", cfg, "--out", workdir / f"{name}.ckpt", "--report", workdir / f"{name}.jsonl") == 0
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
    assert (workdir / "a.jsonl").read_text() == (workdir / "b.jsonl").read_text()


def test_ratio_zero_student_evaluates_like_teacher(workdir, capsys):
    cfg, t, s = workdir / "run.cfg", workdir / "t.ckpt", workdir / "s.ckpt"
    run("train-teacher", "--config", cfg, "--out", t)
    run("convert", "--teacher", t, "--ratio", 0, "--out", s)
    capsys.readouterr()
    run("eval", "--model", t, "--config", cfg)
    a = json.loads(capsys.readouterr().out)
    run("eval", "--model", s, "--config", cfg)
    b = json.loads(capsys.readouterr().out)
    assert a["eval_ce"] == b["eval_ce"] and a["eval_acc"] == b["eval_acc"]


def test_convert_l8_quarter_plan_record(tmp_path):
    teacher = tiny_teacher(n_layers=8)
    checkpoint.save(teacher, tmp_path / "t.ckpt")
    assert run("convert", "--teacher", tmp_path / "t.ckpt", "--ratio", 0.25, "--out", tmp_path / "s.ckpt") == 0
    assert checkpoint.load(tmp_path / "s.ckpt").plan.mamba_positions == (2, 6)


def test_bench_command_writes_reports(tmp_path):
    teacher = tiny_teacher(dtype=np.float32)
    checkpoint.save(teacher, tmp_path / "t.ckpt")
    _, student = tiny_hybrid(dtype=np.float32)
    checkpoint.save(student, tmp_path / "s.ckpt")
    with pytest.warns(UserWarning):
        code = run("bench", "--model", tmp_path / "s.ckpt", "--baseline", tmp_path / "t.ckpt", "--lengths", "1,4", "--repeats", 3, "--warmup", 0, "--out", tmp_path / "b")
    assert code == 0
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "model,length,tps,cache_bytes" and len(rows) == 5
    plot = json.loads((tmp_path / "b.plot.json").read_text())
    assert plot["x"] == [1, 4] and len(plot["series"]["memory_reduction"]) == 2


def test_exit_codes(workdir):
    t = workdir / "t.ckpt"
    bad_cfg = workdir / "bad.cfg"
    bad_cfg.write_text("model.wings=2\n")
    assert run("train-teacher", "--config", bad_cfg, "--out", t) == 2
    assert run("eval", "--model", workdir / "missing.ckpt") == 2
    (workdir / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert run("eval", "--model", workdir / "junk.ckpt") == 2
    with pytest.raises(SystemExit) as exc:
        run("convert", "--teacher", t)
    assert exc.value.code == 2
    _, student = tiny_hybrid()
    checkpoint.save(student, workdir / "h.ckpt")
    assert run("convert", "--teacher", workdir / "h.ckpt", "--ratio", 0.5, "--out", workdir / "x.ckpt") == 1


def test_config_command(workdir, capsys):
    assert run("config") == 0
    assert "distill.alpha=1.0" in capsys.readouterr().out
    assert run("config", "--check", workdir / "run.cfg") == 0
    assert config.parse(capsys.readouterr().out).model.d_model == 8


def test_verify_command_passes(capsys):
    assert run("verify") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 10
