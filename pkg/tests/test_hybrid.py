import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_hybrid, tiny_teacher
from hybridlab.errors import ContractError, DimensionError
from hybridlab.hybrid import (
    CACHE_OVERHEAD_BYTES,
    EmptyPlanError,
    GenCache,
    LayerPlan,
    cache_bytes_model,
    convert_model,
    decode_step,
    generate,
    generate_uncached,
    n_replaced,
    plan_placement,
    prefill,
)
from hybridlab.layers import softmax_free_attention_recurrent
from hybridlab.mamba import attention_equivalence_mode, mamba2_mixer
from hybridlab.model import ATTENTION, MAMBA2
from hybridlab.seeding import substream
from hybridlab.tensor import Tensor


# ---------------------------------------------------------------- placement
@pytest.mark.parametrize(
    "L,ratio,strategy,expected",
    [
        (4, 0.25, "evenly", (2,)),
        (8, 0.25, "evenly", (2, 6)),
        (32, 0.125, "evenly", (4, 12, 20, 28)),
        (32, 0.25, "evenly", tuple(range(2, 32, 4))),
        (8, 0.5, "evenly", (1, 3, 5, 7)),
        (8, 0.25, "beginning", (0, 1)),
        (8, 0.25, "middle", (3, 4)),
        (8, 0.25, "end", (6, 7)),
        (4, 1.0, "evenly", (0, 1, 2, 3)),
    ],
)
def test_placement_values(L, ratio, strategy, expected):
    assert plan_placement(L, ratio, strategy).mamba_positions == expected


def test_replacement_count_rounds_half_up_with_floor_of_one():
    assert n_replaced(4, 0.125) == 1  # 0.5 rounds up
    assert n_replaced(4, 0.1) == 1  # 0.4 would round to 0
    assert n_replaced(8, 0.3125) == 3  # 2.5 rounds up
    assert n_replaced(8, 0.0) == 0


def test_zero_ratio_requires_explicit_permission():
    with pytest.raises(EmptyPlanError):
        plan_placement(4, 0.0)
    assert plan_placement(4, 0.0, allow_empty=True).mamba_positions == ()


@pytest.mark.parametrize("bad", [dict(ratio=1.5), dict(ratio=-0.1), dict(strategy="random")])
def test_placement_rejects_bad_input(bad):
    with pytest.raises(ContractError):
        plan_placement(8, **{"ratio": 0.25, "strategy": "evenly", **bad})


@settings(max_examples=200, deadline=None)
@given(L=st.integers(1, 64), m=st.integers(1, 64))
def test_evenly_gaps_differ_by_at_most_one(L, m):
    m = min(m, L)
    pos = plan_placement(L, m / L, "evenly").mamba_positions
    assert len(pos) == m and len(set(pos)) == m
    gaps = np.diff(pos)
    if len(gaps):
        assert gaps.max() - gaps.min() <= 1


# --------------------------------------------------------------- conversion
def test_conversion_copies_untouched_weights_and_freezes_them():
    teacher = tiny_teacher(n_layers=4)
    student = convert_model(teacher, plan_placement(4, 0.5), "transfer", substream(0, "c"))
    for name, p in student.params.items():
        if name in teacher.params and not name.startswith(("layers.1.mixer", "layers.3.mixer")):
            assert p.tensor.data.tobytes() == teacher.params[name].tensor.data.tobytes()
            assert p.tensor.data is not teacher.params[name].tensor.data
    trainable = {p.name for p in student.trainable_parameters()}
    keys = ("W_x", "W_B", "W_C", "W_dt", "b_dt", "A_log", "D", "W_O")
    assert trainable == {f"layers.{i}.mixer.{k}" for i in (1, 3) for k in keys}
    untouched = lambda m: sum(p.tensor.size for n, p in m.params.items() if ".mixer." not in n)  # noqa: E731
    assert untouched(student) == untouched(teacher)


def test_transfer_maps_v_k_q_o():
    teacher = tiny_teacher()
    student = convert_model(teacher, plan_placement(2, 0.5), "transfer", substream(0, "c"))
    attn, mamba = teacher.mixer(1), student.mixer(1)
    for src, dst in (("W_V", "W_x"), ("W_K", "W_B"), ("W_Q", "W_C"), ("W_O", "W_O")):
        np.testing.assert_array_equal(getattr(mamba, dst).data, getattr(attn, src).data)
    np.testing.assert_array_equal(mamba.D.data, 0.0)


def test_transfer_and_random_arms_share_dynamics():
    teacher = tiny_teacher()
    plan = plan_placement(2, 0.5)
    a = convert_model(teacher, plan, "transfer", substream(3, "c")).mixer(1)
    b = convert_model(teacher, plan, "random", substream(3, "c")).mixer(1)
    for k in ("W_dt", "b_dt", "A_log", "D"):
        np.testing.assert_array_equal(getattr(a, k).data, getattr(b, k).data)
    assert not np.array_equal(a.W_x.data, b.W_x.data)


def test_transferred_layer_in_equivalence_mode_is_softmax_free_attention(rng):
    teacher = tiny_teacher(n_layers=4)
    x = Tensor(rng.normal(size=(2, 7, 8)))
    for i in plan_placement(4, 0.5).mamba_positions:
        attn = teacher.mixer(i)
        eq = attention_equivalence_mode(attn)
        np.testing.assert_allclose(mamba2_mixer(eq, x).data, softmax_free_attention_recurrent(attn, x).data, atol=1e-10)


def test_ratio_zero_student_is_the_teacher(rng):
    teacher = tiny_teacher()
    student = convert_model(teacher, plan_placement(2, 0.0, allow_empty=True), "transfer")
    ids = rng.integers(0, 9, size=(3, 6))
    np.testing.assert_array_equal(student(ids).data, teacher(ids).data)
    assert student.trainable_parameters() == []


def test_conversion_rejects_mismatches():
    teacher = tiny_teacher()
    with pytest.raises(ContractError):
        convert_model(teacher, plan_placement(4, 0.5), "transfer")
    with pytest.raises(DimensionError):
        convert_model(teacher, plan_placement(2, 0.5), "transfer", n_heads=1)
    with pytest.raises(ContractError):
        convert_model(teacher, plan_placement(2, 0.5), "warm")


# -------------------------------------------------------------------- cache
@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 1.0])
def test_cache_bytes_identity_at_every_length(ratio):
    teacher = tiny_teacher(n_layers=4, max_len=80, dtype=np.float32)
    plan = plan_placement(4, ratio, allow_empty=True)
    model = convert_model(teacher, plan, "random", substream(0, "c"))
    cache = GenCache(model, capacity=4)
    emb = model.tensor("embed.tokens").data
    for t in range(1, 70):
        decode_step(model, cache, emb[[t % 9]])
        assert cache.nbytes() == cache_bytes_model(4, plan.m, 8, 2, t, itemsize=4)
        assert cache.entries() == (4 - plan.m) * 2 * t * 8 + plan.m * 2 * 4 * 4
    for i in plan.mamba_positions:
        assert cache.ssm[i].shape == (1, 2, 4, 4)


def test_cache_model_closed_form_by_hand():
    # L=8, m=2, d=64, H=4 (P=16), t=100, float32
    expected = (6 * 2 * 100 * 64 + 2 * 4 * 16 * 16) * 4 + CACHE_OVERHEAD_BYTES
    assert cache_bytes_model(8, 2, 64, 4, 100) == expected


def test_cache_reduction_tends_to_m_over_l():
    red = [1 - cache_bytes_model(8, 2, 64, 4, t) / cache_bytes_model(8, 0, 64, 4, t) for t in (10, 100, 10_000, 1_000_000)]
    assert all(b > a for a, b in zip(red, red[1:]))
    assert abs(red[-1] - 0.25) < 1e-4


def test_cache_grows_by_doubling():
    teacher, model = tiny_hybrid(n_layers=2, max_len=64)
    cache = GenCache(model, capacity=2)
    prefill(model, cache, np.arange(5)[None] % 9)
    assert cache.kv[0][0].shape[2] == 8
    assert cache.allocated_bytes() >= cache.nbytes()


# ------------------------------------------------------------------- decode
COMPOSITIONS = [m for m in itertools.product([ATTENTION, MAMBA2], repeat=3)]


@pytest.mark.parametrize("mixers", COMPOSITIONS, ids=lambda m: "".join(k[0] for k in m))
def test_cached_decode_matches_full_recompute(mixers):
    teacher = tiny_teacher(n_layers=3, max_len=40)
    positions = tuple(i for i, k in enumerate(mixers) if k == MAMBA2)
    model = convert_model(teacher, LayerPlan(3, positions), "random", substream(1, "c"))
    prompt = np.array([1, 4, 2, 7])
    toks, fast = generate(model, prompt, 24, return_logits=True)
    ref, slow = generate_uncached(model, prompt, 24)
    np.testing.assert_array_equal(toks, ref[0])
    np.testing.assert_allclose(fast[0], slow[0], atol=1e-10)


@pytest.mark.parametrize("split", [1, 3, 6])
def test_prefill_split_point_does_not_matter(split, rng):
    _, model = tiny_hybrid(n_layers=2)
    ids = rng.integers(0, 9, size=(2, 7))
    whole = prefill(model, GenCache(model, batch=2), ids)
    cache = GenCache(model, batch=2)
    parts = np.concatenate([prefill(model, cache, ids[:, :split]), prefill(model, cache, ids[:, split:])], axis=1)
    np.testing.assert_allclose(parts, whole, atol=1e-12)
    np.testing.assert_allclose(whole, model(ids).data, atol=1e-10)


def test_batched_generation(rng):
    _, model = tiny_hybrid()
    prompts = rng.integers(0, 9, size=(3, 4))
    toks = generate(model, prompts, 5)
    for b in range(3):
        np.testing.assert_array_equal(toks[b], generate(model, prompts[b], 5))


def test_zero_new_tokens_is_empty():
    _, model = tiny_hybrid()
    assert generate(model, [1, 2], 0).shape == (0,)


def test_ratio_zero_student_generates_like_teacher():
    teacher = tiny_teacher(max_len=40)
    student = convert_model(teacher, plan_placement(2, 0.0, allow_empty=True), "transfer")
    np.testing.assert_array_equal(generate(student, [3, 1], 20), generate(teacher, [3, 1], 20))


def test_cache_belongs_to_one_model():
    teacher, student = tiny_hybrid()
    with pytest.raises(ContractError):
        generate(student, [1, 2], 3, cache=GenCache(teacher))


def test_decode_past_max_len_raises():
    _, model = tiny_hybrid(max_len=6)
    with pytest.raises(DimensionError):
        generate(model, [1, 2, 3], 5)
