import itertools
import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsoda.corpus import Corpus, Example, make_batch
from fedsoda.model import ModelConfig, TransformerModel, partition
from fedsoda.pruning import (
    DistanceEntry,
    PruningConfig,
    PruningPlan,
    angular_distance,
    brute_force_min,
    compute_distance_table,
    find_min_distance,
    prune,
    random_plan,
    sample_distances,
    similarity_group_pruning,
)

CFG = ModelConfig(V=32, S=16, d_model=16, f=2, heads=2, m=8, L_A=2)  # L_E = 6


@pytest.fixture
def model():
    return TransformerModel.init(CFG, seed=1, std=0.2)


def random_corpus(rng, count, lo=4, hi=14):
    return Corpus([Example(list(rng.integers(3, 32, int(rng.integers(lo, hi))))) for _ in range(count)])


# -- angular distance -------------------------------------------------------
def test_angular_distance_cases():
    x = np.array([1.0, 2.0, -0.5])
    assert angular_distance(x, x) == 0.0
    assert abs(angular_distance(np.array([1.0, 0.0]), np.array([0.0, 3.0])) - 0.5) < 1e-15
    assert abs(angular_distance(x, -x) - 1.0) < 1e-15
    with pytest.raises(ValueError):
        angular_distance(np.zeros(3), x)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
    arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
    st.floats(0.01, 100),
)
def test_angular_distance_scale_invariant_and_matches_arccos(x, y, c):
    d = angular_distance(x, y)
    assert 0.0 <= d <= 1.0
    assert abs(angular_distance(c * x, y) - d) < 1e-12
    cos = np.clip(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)), -1, 1)
    assert abs(d - math.acos(cos) / math.pi) < 1e-7


# -- distance table ---------------------------------------------------------
def test_identity_layers_give_zero_distance(model):
    parts = partition(model)
    # blocks 3 and 4 (1-based) write nothing to the residual stream
    for blk in parts.emulator[2:4]:
        blk["attn.o"].data[:] = 0.0
        blk["ffn.down"].data[:] = 0.0
    table = compute_distance_table(model, random_corpus(np.random.default_rng(0), 6), n=2)
    assert len(table) == CFG.L_E - 2 + 1
    assert table[2].distance == 0.0
    assert all(0 <= e.distance <= 1 for e in table)


def test_single_sample_table_is_per_sample(model):
    corpus = random_corpus(np.random.default_rng(1), 1)
    per = sample_distances(model, corpus, 2)
    table = compute_distance_table(model, corpus, 2)
    assert [e.distance for e in table] == per[0].tolist()


@pytest.mark.parametrize("policy", ["last", "mean"])
def test_table_matches_extended_precision_oracle(model, policy):
    corpus = random_corpus(np.random.default_rng(2), 32)
    n = 2
    table = compute_distance_table(model, corpus, n, policy)
    mpmath.mp.dps = 30
    sums = [mpmath.mpf(0)] * (CFG.L_E - n + 1)
    for ex in corpus:
        inp, _ = make_batch([ex])
        _, states = model.forward(inp, trace=True)
        L = len(ex.tokens) - 1
        vecs = [s.data[0, L - 1] if policy == "last" else s.data[0, :L].mean(axis=0) for s in states]
        for l in range(len(sums)):
            a, b = vecs[l], vecs[l + n]
            dot = mpmath.fsum(mpmath.mpf(u) * mpmath.mpf(v) for u, v in zip(a, b))
            na = mpmath.sqrt(mpmath.fsum(mpmath.mpf(u) ** 2 for u in a))
            nb = mpmath.sqrt(mpmath.fsum(mpmath.mpf(v) ** 2 for v in b))
            sums[l] += mpmath.acos(max(-1, min(1, dot / (na * nb)))) / mpmath.pi
    for l, e in enumerate(table):
        assert abs(e.distance - float(sums[l] / len(corpus))) <= 1e-12
        assert (e.start, e.end) == (l, l + n)


def test_table_errors(model):
    with pytest.raises(ValueError):
        compute_distance_table(model, Corpus([]), 2)
    with pytest.raises(ValueError):
        compute_distance_table(model, random_corpus(np.random.default_rng(3), 2), CFG.L_E + 1)


# -- selection --------------------------------------------------------------
def test_find_min_distance_example():
    d = [0.10, 0.02, 0.30, 0.01, 0.25]
    table = [DistanceEntry(i, i + 2, v) for i, v in enumerate(d)]
    assert find_min_distance(table, 2, 2) == [1, 3]
    assert brute_force_min(d, 2, 2) == ([1, 3], pytest.approx(0.03))


def test_find_min_p1_and_ties():
    d = [0.4, 0.3, 0.05, 0.2]
    assert find_min_distance(d, 1, 2) == [2]
    assert find_min_distance([0.5] * 5, 2, 1) == [0, 1]
    assert find_min_distance([0.5] * 7, 3, 2) == [0, 2, 4]
    assert find_min_distance(d, 0, 2) == []


def test_find_min_infeasible():
    with pytest.raises(ValueError):
        find_min_distance([0.1, 0.2, 0.3], 2, 3)


def test_exhaustive_sweep_against_brute_force():
    rng = np.random.default_rng(4)
    checked = 0
    for L_E in range(2, 13):
        for n in range(1, 4):
            for p in range(1, 4):
                if n * p >= L_E:
                    continue
                K = L_E - n + 1
                for trial in range(3):
                    d = rng.random(K) if trial else rng.integers(0, 4, K) / 8  # dyadic values give exact ties
                    got = find_min_distance(list(d), p, n)
                    want, want_sum = brute_force_min(list(d), p, n)
                    assert abs(math.fsum(d[i] for i in got) - want_sum) < 1e-12
                    if trial:
                        assert got == want
                    else:
                        # lexicographically smallest among all optimal selections
                        optimal = [
                            list(c) for c in itertools.combinations(range(K), p)
                            if all(b - a >= n for a, b in zip(c, c[1:]))
                            and abs(math.fsum(d[i] for i in c) - want_sum) < 1e-12
                        ]
                        assert got == min(optimal)
                    checked += 1
    assert checked > 100


# -- plans and pruning ------------------------------------------------------
def test_plan_example_l6_n2():
    plan = PruningPlan(2, [0, 3], 6)
    assert plan.pruned_layers == [1, 2, 4, 5]
    assert list(plan.index_map()) == [(0, 0), (3, 1)]
    assert plan.L_E_star == 2
    with pytest.raises(ValueError):
        PruningPlan(2, [1, 2], 6)
    with pytest.raises(ValueError):
        PruningPlan(2, [5], 6)


def test_large_emulator_plan_size():
    plan = PruningPlan(3, [0, 4, 8, 12], 29)
    assert plan.L_E_star == 17 and len(plan.pruned_layers) == 12


def test_index_map_formula_and_disjointness():
    rng = np.random.default_rng(5)
    for _ in range(50):
        plan = random_plan(13, 2, 3, rng)
        pruned = plan.pruned_layers
        assert len(set(pruned)) == len(pruned) == 6
        for i, (t, s) in enumerate(plan.index_map()):
            own = pruned[2 * i : 2 * i + 2]
            assert own == [t + 1, t + 2] and t not in own
            assert s == t - sum(q < t for q in pruned)


def test_prune_keeps_weights_bit_exact(model):
    plan = PruningPlan(2, [0, 3], CFG.L_E)
    sub, imap = prune(model, plan)
    assert sub.config.m == CFG.m - 4
    kept = [j for j in range(1, CFG.L_E + 1) if j not in plan.pruned_layers]
    for new, old in enumerate(kept):
        for name, w in sub.layers[new].items():
            assert w.data.tobytes() == model.layers[old - 1][name].data.tobytes()
            assert w.data is not model.layers[old - 1][name].data
    for k in range(CFG.L_A):
        for name, w in sub.layers[len(kept) + k].items():
            assert w.data.tobytes() == model.layers[CFG.L_E + k][name].data.tobytes()
    assert list(imap) == [(0, 0), (3, 1)]


def test_prune_p0_is_identity(model):
    sub, imap = prune(model, PruningPlan(2, [], CFG.L_E))
    x = np.random.default_rng(6).integers(3, 32, (2, 7))
    np.testing.assert_array_equal(sub(x).data, model(x).data)
    assert len(imap) == 0


def test_prune_mismatch(model):
    with pytest.raises(ValueError):
        prune(model, PruningPlan(2, [0], 9))


def test_sgp_end_to_end_and_json(model, tmp_path):
    corpus = random_corpus(np.random.default_rng(7), 8)
    sub, plan = similarity_group_pruning(model, corpus, PruningConfig(n=2, p=2))
    d = [e.distance for e in plan.distance_table]
    assert plan.group_starts == brute_force_min(d, 2, 2)[0]
    assert sub.config.m == CFG.m - 4
    plan.save(tmp_path / "plan.json")
    raw = json.loads((tmp_path / "plan.json").read_text())
    assert set(raw) == {"n", "p", "L_E", "group_starts", "pruned_layers", "index_map", "distance_table"}
    back = PruningPlan.load(tmp_path / "plan.json")
    assert back.group_starts == plan.group_starts and back.distance_table == plan.distance_table
    raw["pruned_layers"] = [1]
    with pytest.raises(ValueError):
        PruningPlan.from_json(raw)


def test_config_checks():
    with pytest.raises(ValueError):
        PruningConfig(n=0)
    with pytest.raises(ValueError):
        PruningConfig(token_position="first")
    with pytest.raises(ValueError):
        PruningConfig(n=2, p=3).check(6)
    PruningConfig(n=2, p=3).check(7)


def test_random_plan_is_valid_and_seeded():
    a = random_plan(13, 2, 3, np.random.default_rng(8))
    b = random_plan(13, 2, 3, np.random.default_rng(8))
    assert a.group_starts == b.group_starts
    assert all(y - x >= 2 for x, y in zip(a.group_starts, a.group_starts[1:]))
