"""Similarity group pruning.

Distances compare residual-stream states ``trace[l]`` and ``trace[l + n]``
(trace indices, so ``trace[0]`` is the embedding output).  Selecting start
``t`` removes blocks ``t+1 .. t+n`` (1-based) and keeps block ``t``; with
``t == 0`` the kept "layer" is the embedding itself.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, make_batch
from .model import TransformerModel, assemble, deepcopy_blocks, partition


@dataclass(frozen=True)
class PruningConfig:
    n: int = 2
    p: int = 3
    token_position: str = "last"  # or "mean"

    def __post_init__(self):
        if self.n < 1 or self.p < 0:
            raise ValueError("need n >= 1 and p >= 0")
        if self.token_position not in ("last", "mean"):
            raise ValueError("token_position must be 'last' or 'mean'")

    def check(self, L_E: int) -> None:
        if self.n * self.p >= L_E:
            raise ValueError(f"n*p = {self.n * self.p} must be smaller than the emulator size {L_E}")


@dataclass(frozen=True)
class DistanceEntry:
    start: int
    end: int
    distance: float


DistanceTable = list[DistanceEntry]


@dataclass(frozen=True)
class LayerIndexMap:
    """Pairs ``(t_i, s_i)``: group start in the full trace and its index in the sub trace."""

    pairs: tuple[tuple[int, int], ...]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


@dataclass
class PruningPlan:
    n: int
    group_starts: list[int]
    L_E: int
    distance_table: DistanceTable = field(default_factory=list)

    def __post_init__(self):
        starts = list(self.group_starts)
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError("group starts must be strictly increasing")
        for a, b in zip(starts, starts[1:]):
            if b - a < self.n:
                raise ValueError(f"groups starting at {a} and {b} overlap (n={self.n})")
        if starts and (starts[0] < 0 or starts[-1] + self.n > self.L_E):
            raise ValueError("a group reaches outside the emulator")

    @property
    def p(self) -> int:
        return len(self.group_starts)

    @property
    def pruned_layers(self) -> list[int]:
        """1-based block numbers removed from the emulator."""
        return [t + j for t in self.group_starts for j in range(1, self.n + 1)]

    @property
    def L_E_star(self) -> int:
        return self.L_E - self.n * self.p

    def index_map(self) -> LayerIndexMap:
        pruned = self.pruned_layers
        return LayerIndexMap(tuple((t, t - sum(1 for q in pruned if q < t)) for t in self.group_starts))

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "L_E": self.L_E,
            "group_starts": list(self.group_starts),
            "pruned_layers": self.pruned_layers,
            "index_map": [list(pair) for pair in self.index_map()],
            "distance_table": [[e.start, e.end, e.distance] for e in self.distance_table],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, d: dict) -> "PruningPlan":
        table = [DistanceEntry(int(a), int(b), float(c)) for a, b, c in d.get("distance_table", [])]
        plan = cls(int(d["n"]), [int(t) for t in d["group_starts"]], int(d["L_E"]), table)
        if "pruned_layers" in d and plan.pruned_layers != list(d["pruned_layers"]):
            raise ValueError("pruned_layers do not match group_starts")
        return plan

    @classmethod
    def load(cls, path: str | Path) -> "PruningPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def angular_distance(x, y) -> float:
    """``arccos(cos(x, y)) / pi`` in [0, 1].

    Evaluated as ``2 atan2(|u - v|, |u + v|) / pi`` on the unit vectors: the
    same angle, but well conditioned for nearly parallel and nearly opposite
    inputs where ``arccos`` loses digits.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("vectors must have equal length")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("angular distance is undefined for a zero vector")
    u, v = x / nx, y / ny
    return 2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v)) / math.pi


def _positions(states: np.ndarray, lengths: np.ndarray, policy: str) -> np.ndarray:
    """Pick one vector per sample from ``[B, S, d]`` states."""
    if policy == "last":
        return states[np.arange(states.shape[0]), lengths - 1]
    out = np.empty((states.shape[0], states.shape[2]))
    for i, L in enumerate(lengths):
        out[i] = states[i, :L].mean(axis=0)
    return out


def sample_distances(
    model: TransformerModel, corpus: Corpus, n: int, policy: str = "last", batch_size: int = 64
) -> np.ndarray:
    """Per-sample distances, shape ``[samples, L_E - n + 1]``."""
    if len(corpus) == 0:
        raise ValueError("distance table needs a non-empty corpus")
    L_E = model.config.L_E
    if not 1 <= n < L_E + 1:
        raise ValueError(f"n={n} does not fit an emulator of {L_E} blocks")
    rows = []
    for s in range(0, len(corpus), batch_size):
        exs = corpus.examples[s : s + batch_size]
        inp, _ = make_batch(exs)
        lengths = np.array([len(e.tokens) - 1 for e in exs])
        _, states = model.forward(inp, trace=True, stop_after=L_E)
        picked = [_positions(st.data, lengths, policy) for st in states]
        for i in range(len(exs)):
            rows.append([angular_distance(picked[l][i], picked[l + n][i]) for l in range(L_E - n + 1)])
    return np.asarray(rows)


def compute_distance_table(
    model: TransformerModel, corpus: Corpus, n: int, policy: str = "last"
) -> DistanceTable:
    """Mean over samples of the angular distance between ``trace[l]`` and ``trace[l+n]``."""
    per = sample_distances(model, corpus, n, policy)
    means = per.mean(axis=0)
    return [DistanceEntry(l, l + n, float(means[l])) for l in range(per.shape[1])]


def find_min_distance(table: DistanceTable | Sequence[float], p: int, n: int) -> list[int]:
    """Exact minimum-sum choice of ``p`` starts with pairwise gaps ``>= n``.

    Dynamic programme over (entry index, groups left).  Among optimal
    selections the lexicographically smallest start list is returned.
    """
    d = [e.distance for e in table] if table and isinstance(table[0], DistanceEntry) else list(table)
    K = len(d)
    if p == 0:
        return []
    if p < 0 or (p - 1) * n + 1 > K:
        raise ValueError(f"cannot place {p} non-overlapping groups of {n} in {K} candidate starts")
    INF = math.inf
    # best[i][k]: minimal sum choosing k starts from entries i..K-1
    best = [[INF] * (p + 1) for _ in range(K + n + 1)]
    for i in range(K + n + 1):
        best[i][0] = 0.0
    for i in range(K - 1, -1, -1):
        for k in range(1, p + 1):
            skip = best[i + 1][k]
            take = d[i] + best[i + n][k - 1] if i + n <= K + n else INF
            best[i][k] = take if take <= skip else skip
    starts = []
    i, k = 0, p
    while k:
        take = d[i] + best[i + n][k - 1]
        if take == best[i][k]:
            starts.append(i)
            i += n
            k -= 1
        else:
            i += 1
    return starts


def brute_force_min(d: Sequence[float], p: int, n: int) -> tuple[list[int], float]:
    """Exhaustive oracle for :func:`find_min_distance`."""
    best, best_sum = None, math.inf
    for combo in itertools.combinations(range(len(d)), p):
        if any(b - a < n for a, b in zip(combo, combo[1:])):
            continue
        s = math.fsum(d[i] for i in combo)
        if s < best_sum:
            best, best_sum = list(combo), s
    if best is None:
        raise ValueError("infeasible")
    return best, best_sum


def prune(model: TransformerModel, plan: PruningPlan) -> tuple[TransformerModel, LayerIndexMap]:
    """Sub-LLM = retained emulator blocks (original order) + the unchanged adapter.

    Retained blocks are copied so the sub-model never aliases full-model storage.
    """
    parts = partition(model)
    if plan.L_E != parts.L_E:
        raise ValueError(f"plan was built for L_E={plan.L_E}, model has {parts.L_E}")
    gone = set(plan.pruned_layers)
    kept = [blk for j, blk in enumerate(parts.emulator, start=1) if j not in gone]
    template = model.clone()
    sub = assemble(template, deepcopy_blocks(kept), deepcopy_blocks(parts.adapter))
    return sub, plan.index_map()


def similarity_group_pruning(
    model: TransformerModel, corpus: Corpus, cfg: PruningConfig
) -> tuple[TransformerModel, PruningPlan]:
    """Distance table, optimal group choice and pruning in one call."""
    cfg.check(model.config.L_E)
    table = compute_distance_table(model, corpus, cfg.n, cfg.token_position)
    starts = find_min_distance(table, cfg.p, cfg.n)
    plan = PruningPlan(cfg.n, starts, model.config.L_E, table)
    sub, _ = prune(model, plan)
    return sub, plan


def random_plan(L_E: int, n: int, p: int, rng: np.random.Generator) -> PruningPlan:
    """Uniform draw from all valid plans with ``p`` groups of ``n``."""
    K = L_E - n + 1
    valid = [c for c in itertools.combinations(range(K), p) if all(b - a >= n for a, b in zip(c, c[1:]))]
    return PruningPlan(n, list(valid[int(rng.integers(len(valid)))]), L_E)
