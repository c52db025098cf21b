"""Distillation alignment of the pruned emulator.

Only the emulator LoRA modules are trained.  The full model, the sub-model's
own weights and the adapter LoRA stay frozen; the full model provides target
hidden states and output distributions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus, make_batch
from .lora import LoraModule, Target, copy_set, lora_parameters, shift_layers
from .model import TransformerModel, adapter_offset
from .optim import AdamW
from .pruning import LayerIndexMap
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignmentConfig:
    alpha: float = 1.0
    beta: float = 1.0
    E_p: int = 1
    E_r: int = 2
    r_interval: int = 5
    sample_count: int = 64
    batch_size: int = 16
    lr: float = 1e-3
    persist_optimizer: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.r_interval < 1:
            raise ValueError("r_interval must be >= 1")
        if self.E_p < 0 or self.E_r < 0 or self.sample_count < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, sample_count and batch_size >= 1")


@dataclass(frozen=True)
class AlignmentLossReport:
    phase: str
    round: int
    epoch: int
    step: int
    L_inter: float
    L_final: float
    L_KL: float
    joint: float

    @property
    def L_rep(self) -> float:
        return self.L_inter + self.L_final

    def as_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AlignmentGeometry:
    """Which trace entries are compared: anchored pairs plus the emulator outputs.

    A group whose start was itself removed by the previous group (starts
    exactly ``n`` apart) extends that group instead of opening a new pair, so
    a chain of groups yields one pair ``(s_first, t_last + n)``.
    """

    index_map: LayerIndexMap
    n: int
    L_E: int
    L_E_star: int

    def pairs(self) -> list[tuple[int, int]]:
        """``(full trace index, sub trace index)`` for each anchored chain."""
        out: list[list[int]] = []
        prev_t = None
        for t, s in self.index_map:
            if prev_t is not None and t - prev_t == self.n:
                out[-1][0] = t + self.n
            else:
                out.append([t + self.n, s])
            prev_t = t
        return [(a, b) for a, b in out]

    def emulator_layers(self) -> list[int]:
        """0-based sub-model blocks whose outputs are the anchors (the embedding has none)."""
        return [s - 1 for _, s in self.pairs() if s > 0]

    @classmethod
    def from_plan(cls, plan) -> "AlignmentGeometry":
        return cls(plan.index_map(), plan.n, plan.L_E, plan.L_E_star)


def _sq_err(pred: Tensor, target: np.ndarray, mask: np.ndarray | None) -> Tensor:
    """Mean over valid positions of the squared L2 distance divided by ``d_model``."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"trace shapes differ: {pred.shape} vs {target.shape}")
    d = pred.shape[-1]
    diff = pred - Tensor(target)
    if mask is None:
        count = diff.size // d
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], diff.shape).copy()
        diff = diff * Tensor(m)
        count = float(np.asarray(mask).sum())
    return T.sq_sum(diff) * (1.0 / (count * d))


def rep_loss(
    full_trace: Sequence,
    sub_trace: Sequence[Tensor],
    geometry: AlignmentGeometry,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """``(L_inter, L_final)``.

    ``L_inter`` sums, over anchored pairs, the normalised squared distance
    between ``full_trace[t + n]`` and ``sub_trace[s]``.  ``L_final``
    compares the two emulator outputs.  Each term is divided by the number of
    positions times ``d_model``.
    """
    if len(full_trace) <= geometry.L_E or len(sub_trace) <= geometry.L_E_star:
        raise ValueError("traces are shorter than the emulator geometry")

    def arr(x):
        return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)

    inter = Tensor(np.asarray(0.0))
    for f, s in geometry.pairs():
        if f > geometry.L_E or s > geometry.L_E_star:
            raise ValueError(f"pair ({f}, {s}) lies outside the emulators")
        inter = inter + _sq_err(sub_trace[s], arr(full_trace[f]), mask)
    final = _sq_err(sub_trace[geometry.L_E_star], arr(full_trace[geometry.L_E]), mask)
    return inter, final


def kl_loss(full_logits, sub_logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``KL(softmax(full) || softmax(sub))`` per position, averaged; full side detached."""
    return T.kl_divergence(full_logits, sub_logits, mask)


class Aligner:
    """Holds the frozen pair of models and the trainable emulator LoRA set."""

    def __init__(
        self,
        full: TransformerModel,
        sub: TransformerModel,
        geometry: AlignmentGeometry,
        emulator_lora: Mapping[Target, LoraModule],
        cfg: AlignmentConfig,
    ):
        if full.config.L_A != sub.config.L_A:
            raise ValueError("full and sub models must share the adapter")
        if sub.config.L_E != geometry.L_E_star or full.config.L_E != geometry.L_E:
            raise ValueError("pruning geometry does not match the models")
        self.full = full
        self.sub = sub
        self.geometry = geometry
        self.cfg = cfg
        self.lora = dict(emulator_lora)
        for mod in self.lora.values():
            for p in mod.parameters():
                p.requires_grad = True
        self.optimizer: AdamW | None = None
        self.history: list[AlignmentLossReport] = []
        self._frozen = [p for p in full.parameters()] + [p for p in sub.parameters()]

    def _opt(self) -> AdamW:
        if self.optimizer is None or not self.cfg.persist_optimizer:
            self.optimizer = AdamW(lora_parameters(self.lora), lr=self.cfg.lr)
        return self.optimizer

    def _lora_maps(self, adapter_lora: Mapping[Target, LoraModule] | None):
        adapter = copy_set(adapter_lora or {}, requires_grad=False)
        full_map = shift_layers(adapter, adapter_offset(self.full))
        sub_map = dict(self.lora)
        sub_map.update(shift_layers(adapter, adapter_offset(self.sub)))
        return full_map, sub_map

    def losses(self, inputs: np.ndarray, targets: np.ndarray, full_map, sub_map):
        mask = targets >= 0
        full_logits, full_trace = self.full.forward(inputs, lora=full_map, trace=True)
        sub_logits, sub_trace = self.sub.forward(inputs, lora=sub_map, trace=True)
        inter, final = rep_loss(full_trace, sub_trace, self.geometry, mask)
        kl = kl_loss(full_logits.data, sub_logits, mask)
        joint = (inter + final) * self.cfg.alpha + kl * self.cfg.beta
        return inter, final, kl, joint

    def measure(self, corpus: Corpus, adapter_lora=None, batch_size: int = 64) -> dict[str, float]:
        """Example-weighted mean losses over ``corpus`` without training."""
        if len(corpus) == 0:
            raise ValueError("alignment needs a non-empty corpus")
        full_map, sub_map = self._lora_maps(adapter_lora)
        sums = np.zeros(4)
        for s in range(0, len(corpus), batch_size):
            exs = corpus.examples[s : s + batch_size]
            inp, tgt = make_batch(exs)
            vals = self.losses(inp, tgt, full_map, sub_map)
            sums += len(exs) * np.array([v.item() for v in vals])
        sums /= len(corpus)
        return dict(zip(("L_inter", "L_final", "L_KL", "joint"), map(float, sums)))

    def _snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self._frozen]

    def _audit(self, snap: list[np.ndarray]) -> None:
        for p, ref in zip(self._frozen, snap):
            if p.grad is not None and np.any(p.grad != 0):
                raise AssertionError("a frozen parameter received a gradient")
            if not np.array_equal(p.data, ref):
                raise AssertionError("a frozen parameter changed during alignment")

    def align(
        self,
        corpus: Corpus,
        epochs: int,
        rng: np.random.Generator,
        adapter_lora: Mapping[Target, LoraModule] | None = None,
        phase: str = "pre",
        round_index: int = 0,
        audit: bool = False,
    ) -> list[AlignmentLossReport]:
        """Run ``epochs`` shuffled passes over ``corpus``; returns one report per step."""
        if len(corpus) == 0:
            raise ValueError("alignment needs a non-empty corpus")
        full_map, sub_map = self._lora_maps(adapter_lora)
        adapter_snap = [p.data.copy() for p in lora_parameters(adapter_lora or {})]
        snap = self._snapshot() if audit else None
        train = self.cfg.alpha > 0 or self.cfg.beta > 0
        opt = self._opt() if train else None
        params = lora_parameters(self.lora)
        reports = []
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(len(corpus))
            for s in range(0, len(order), self.cfg.batch_size):
                exs = [corpus.examples[i] for i in order[s : s + self.cfg.batch_size]]
                inp, tgt = make_batch(exs)
                inter, final, kl, joint = self.losses(inp, tgt, full_map, sub_map)
                if train:
                    opt.zero_grad()
                    T.backward(joint)
                    opt.step()
                else:
                    T.zero_grad(params)
                if audit:
                    self._audit(snap)
                rep = AlignmentLossReport(
                    phase, round_index, epoch, step, inter.item(), final.item(), kl.item(), joint.item()
                )
                reports.append(rep)
                step += 1
        for p, ref in zip(lora_parameters(adapter_lora or {}), adapter_snap):
            if not np.array_equal(p.data, ref):
                raise AssertionError("alignment modified the adapter LoRA")
        self.history.extend(reports)
        return reports

    def pre_align(self, public: Corpus, rng: np.random.Generator, adapter_lora=None, audit=False):
        return self.align(public, self.cfg.E_p, rng, adapter_lora, "pre", 0, audit)

    def should_realign(self, round_index: int) -> bool:
        return round_index % self.cfg.r_interval == 0

    def realign(self, round_index: int, public: Corpus, seed: int, adapter_lora=None, audit=False):
        """Sample ``sample_count`` public items (seeded by round) and run ``E_r`` epochs."""
        rng = np.random.default_rng([seed, round_index])
        idx = realign_sample(rng, len(public), self.cfg.sample_count)
        return self.align(public.subset(idx), self.cfg.E_r, rng, adapter_lora, "re", round_index, audit)


def realign_sample(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    """Sorted indices of ``min(count, size)`` distinct public items."""
    return np.sort(rng.choice(size, size=min(count, size), replace=False))


def realign_rounds(I: int, r_interval: int) -> list[int]:
    """Rounds ``t in 1..I`` with ``t mod r == 0``."""
    return [t for t in range(1, I + 1) if t % r_interval == 0]


def epoch_means(reports: Sequence[AlignmentLossReport]) -> list[dict]:
    """Average the step reports of each (phase, round, epoch)."""
    groups: dict[tuple, list[AlignmentLossReport]] = {}
    for r in reports:
        groups.setdefault((r.phase, r.round, r.epoch), []).append(r)
    out = []
    for (phase, rnd, ep), rs in groups.items():
        row = {"phase": phase, "round": rnd, "epoch": ep}
        for f in ("L_inter", "L_final", "L_KL", "joint"):
            row[f] = math.fsum(getattr(r, f) for r in rs) / len(rs)
        out.append(row)
    return out
