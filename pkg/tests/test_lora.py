import numpy as np
import pytest

from fedsoda import tensor as T
from fedsoda.lora import (
    AttachmentPlan,
    LoraModule,
    apply_rows,
    decode,
    encode,
    header_bytes,
    init_lora,
    lora_forward,
    lora_param_count,
    make_lora_set,
    merge,
    shift_layers,
)
from fedsoda.quant import quantize
from fedsoda.tensor import ShapeError, Tensor


def random_module(rng, d, k, r, alpha=16.0):
    mod = init_lora(d, k, r, alpha, 0.1, rng)
    mod.B.data = rng.normal(0, 0.1, (d, r))
    return mod


def test_fresh_module_merges_to_zero():
    mod = init_lora(16, 12, 4, 8.0, 0.02, 0)
    assert np.all(mod.B.data == 0)
    assert np.all(merge(mod) == 0)


def test_seed_determinism():
    a = init_lora(16, 16, 4, 8.0, 0.02, 7)
    b = init_lora(16, 16, 4, 8.0, 0.02, 7)
    assert a.A.data.tobytes() == b.A.data.tobytes()


def test_init_statistics():
    sigma = 0.02
    # a wide k gives 1e5 draws while keeping r <= min(d, k)/2
    mod = init_lora(4, 50000, 2, 1.0, sigma, 11)
    a = mod.A.data.reshape(-1)
    n = a.size
    assert n == 100000
    se_mean = sigma / np.sqrt(n)
    se_std = sigma / np.sqrt(2 * (n - 1))
    assert abs(a.mean()) < 3 * se_mean
    assert abs(a.std(ddof=1) - sigma) < 3 * se_std


def test_rank_limits():
    with pytest.raises(ValueError):
        init_lora(8, 8, 0, 1.0)
    with pytest.raises(ValueError):
        init_lora(8, 4, 5, 1.0)
    with pytest.raises(ValueError):
        init_lora(8, 8, 5, 1.0)
    init_lora(8, 8, 4, 1.0)


def test_forward_zero_b_is_base():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(6, 4))
    x = Tensor(rng.normal(size=(4, 3)))
    mod = init_lora(6, 4, 2, 4.0, 0.1, rng)
    np.testing.assert_array_equal(lora_forward(W, mod, x).data, W @ x.data)


def test_forward_scalar_case():
    mod = LoraModule((0, "q"), Tensor(np.array([[3.0]])), Tensor(np.array([[4.0]])), alpha=1.0)
    x = Tensor(np.array([[1.5, -2.0]]))
    np.testing.assert_array_equal(lora_forward(np.array([[2.0]]), mod, x).data, [[21.0, -28.0]])


def test_forward_matches_merged_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        W = rng.normal(size=(12, 10))
        mod = random_module(rng, 12, 10, 3, alpha=5.0)
        x = rng.normal(size=(10, 7))
        merged = (W + (5.0 / 3) * mod.B.data @ mod.A.data) @ x
        assert np.max(np.abs(lora_forward(W, mod, Tensor(x)).data - merged)) <= 1e-10
        np.testing.assert_allclose(merge(mod), (5.0 / 3) * mod.B.data @ mod.A.data, atol=0)


def test_rank_one_merge():
    a = np.array([[1.0, 2.0, 3.0]])
    b = np.array([[2.0], [-1.0]])
    mod = LoraModule((0, "v"), Tensor(a), Tensor(b), alpha=3.0)
    np.testing.assert_array_equal(merge(mod), 3.0 * np.outer(b[:, 0], a[0]))


def test_merged_then_zeroed_equals_plain_forward():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(8, 8))
    mod = random_module(rng, 8, 8, 2)
    x = rng.normal(size=(8, 5))
    merged = W + merge(mod)
    zeroed = mod.copy()
    zeroed.B.data[:] = 0.0
    np.testing.assert_allclose(lora_forward(merged, zeroed, Tensor(x)).data, lora_forward(W, mod, Tensor(x)).data, atol=1e-10)


def test_gradients_flow_to_factors_only():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(8, 8)))
    w_before = W.data.copy()
    mod = random_module(rng, 8, 8, 2)
    x = Tensor(rng.normal(size=(5, 8)))
    T.backward(T.sq_sum(apply_rows(x, W, mod)))
    assert W.grad is None
    assert mod.A.grad is not None and mod.B.grad is not None
    np.testing.assert_array_equal(W.data, w_before)


def test_apply_rows_matches_column_form():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(8, 6))  # stored [in, out]
    mod = random_module(rng, 6, 8, 2)
    x = rng.normal(size=(3, 8))
    rows = apply_rows(Tensor(x), Tensor(W), mod).data
    cols = lora_forward(W.T, mod, Tensor(x.T)).data.T
    np.testing.assert_allclose(rows, cols, atol=1e-12)


def test_shape_mismatch_errors():
    rng = np.random.default_rng(5)
    mod = random_module(rng, 6, 4, 2)
    with pytest.raises(ShapeError):
        lora_forward(np.ones((4, 6)), mod, Tensor(np.ones((6, 1))))
    with pytest.raises(ShapeError):
        lora_forward(np.ones((6, 4)), mod, Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        LoraModule((0, "q"), Tensor(np.ones((2, 4))), Tensor(np.ones((6, 3))), 1.0)


def test_param_counts():
    assert lora_param_count([(0, "q")], 64, 8) == 1024
    plan = AttachmentPlan(emulator_layers=[], adapter_layers=[0, 1, 2])
    enumerated = sum(m.param_count for m in make_lora_set(plan.adapter_targets, 64, 8, 16.0, 0.02, np.random.default_rng(0)).values())
    assert lora_param_count(plan, 64, 8) == enumerated == 6144
    assert lora_param_count([], 64, 8) == 0


def test_attachment_plan_bounds():
    with pytest.raises(ValueError):
        AttachmentPlan([0, 9], [0, 1], emulator_size=9)
    plan = AttachmentPlan([1, 4], [0, 1, 2], emulator_size=9)
    assert plan.emulator_targets == [(1, "q"), (1, "v"), (4, "q"), (4, "v")]


@pytest.mark.parametrize("quantized", [False, True])
def test_wire_roundtrip(quantized):
    rng = np.random.default_rng(6)
    mods = {(l, m): random_module(rng, 16, 16, 4) for l in (0, 2) for m in ("q", "v")}
    for key, mod in mods.items():
        mod.target = key
    raw = encode(mods, quantized=quantized)
    back = decode(raw, 16.0, quantized=quantized)
    assert sorted(back) == sorted(mods)
    for key in mods:
        if quantized:
            np.testing.assert_array_equal(back[key].A.data, quantize(mods[key].A.data).dequantize())
            np.testing.assert_array_equal(back[key].B.data, quantize(mods[key].B.data).dequantize())
        else:
            np.testing.assert_array_equal(back[key].A.data, mods[key].A.data)
            np.testing.assert_array_equal(back[key].B.data, mods[key].B.data)
    if not quantized:
        params = sum(m.param_count for m in mods.values())
        assert len(raw) == header_bytes(len(mods)) + 8 * params
    with pytest.raises(ValueError):
        decode(raw + b"\0", 16.0, quantized=quantized)


def test_shift_layers_shares_modules():
    mods = make_lora_set([(0, "q"), (1, "v")], 8, 2, 4.0, 0.02, np.random.default_rng(0))
    moved = shift_layers(mods, 5)
    assert set(moved) == {(5, "q"), (6, "v")}
    assert moved[(5, "q")] is mods[(0, "q")]
