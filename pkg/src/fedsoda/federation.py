"""Simulated federation: Dirichlet partitioning, proximal local LoRA training,
FedAvg over LoRA factors, and the round loop with periodic realignment.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .alignment import Aligner
from .corpus import Corpus, make_batch
from .ledger import CostLedger
from .lora import LoraModule, Target, copy_set, decode, encode, lora_param_count, lora_parameters, shift_layers
from .model import TransformerModel
from .optim import AdamW
from .tensor import Tensor
from .training import evaluate

log = logging.getLogger(__name__)

MODES = ("fedsoda", "full_lora", "no_realign", "align_every_round")


@dataclass(frozen=True)
class FedConfig:
    N: int = 10
    I: int = 20
    H: int = 1
    mu: float = 0.01
    dirichlet_beta: float = 1.0
    mode: str = "fedsoda"
    seed: int = 0
    batch_size: int = 16
    lr: float = 1e-3
    max_local_steps: int | None = None
    parallel: bool = False
    workers: int = 4

    def __post_init__(self):
        if self.N < 1 or self.I < 1 or self.H < 1:
            raise ValueError("N, I and H must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.dirichlet_beta <= 0:
            raise ValueError("dirichlet_beta must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.batch_size < 1 or (self.max_local_steps is not None and self.max_local_steps < 1):
            raise ValueError("batch_size and max_local_steps must be >= 1")


def realign_interval(mode: str, r_interval: int) -> int | None:
    """Rounds between realignments for a mode, ``None`` when it never realigns."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "fedsoda":
        return r_interval
    if mode == "align_every_round":
        return 1
    return None


# -- partitioning ---------------------------------------------------------
def partition_dirichlet(labels: Sequence, N: int, beta: float, seed: int) -> list[np.ndarray]:
    """Per label, split its samples across clients by a ``Dirichlet(beta)`` draw.

    Every index lands in exactly one client.  A client left empty takes one
    sample from the currently largest client.
    """
    labels = list(labels)
    if N < 1 or beta <= 0:
        raise ValueError("need N >= 1 and beta > 0")
    if len(labels) < N:
        raise ValueError(f"corpus of {len(labels)} samples cannot feed {N} clients")
    if any(l is None for l in labels):
        raise ValueError("Dirichlet partitioning needs a label on every sample")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(N)]
    for lab in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == lab])
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(N, beta))
        cuts = np.floor(np.cumsum(props)[:-1] * idx.size).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(int(i) for i in part)
    for k in range(N):
        if not buckets[k]:
            donor = max(range(N), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


def label_counts(parts: Sequence[np.ndarray], labels: Sequence) -> list[dict]:
    return [{str(l): int(sum(1 for i in p if labels[i] == l)) for l in sorted(set(labels))} for p in parts]


# -- aggregation ------------------------------------------------------------
def fedavg(updates: Sequence[Mapping[Target, LoraModule]], sizes: Sequence[int]) -> dict[Target, LoraModule]:
    """``sum_k (|D_k| / sum |D|) w_k`` over every A and B factor.

    Accumulation is in extended precision with one final rounding, so equal
    inputs return themselves and two equal weights give the exact mean.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    if len(updates) != len(sizes):
        raise ValueError("one size per update is required")
    if any(s < 0 for s in sizes) or sum(sizes) == 0:
        raise ValueError("sizes must be non-negative with a positive total")
    keys = sorted(updates[0])
    for u in updates[1:]:
        if sorted(u) != keys:
            raise ValueError("updates target different matrices")
    total = sum(sizes)
    out = {}
    for key in keys:
        ref = updates[0][key]
        facs = []
        for name in ("A", "B"):
            acc = np.zeros(getattr(ref, name).shape, dtype=np.longdouble)
            for u, n in zip(updates, sizes):
                arr = getattr(u[key], name).data
                if arr.shape != acc.shape:
                    raise T.ShapeError(f"{key} {name}: shape {arr.shape} != {acc.shape}")
                acc += np.longdouble(n) * arr.astype(np.longdouble)
            facs.append(Tensor((acc / np.longdouble(total)).astype(np.float64)))
        out[key] = LoraModule(key, facs[0], facs[1], ref.alpha, ref.sigma_A)
    return out


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    s = np.asarray(sizes, dtype=np.float64)
    return s / s.sum()


# -- clients ----------------------------------------------------------------
class Client:
    """Holds its private data, its LoRA replica, optimizer state and RNG stream.

    Clients only ever receive the sub-LLM handle (plus frozen LoRA sets), never
    the full model.
    """

    def __init__(self, cid: int, data: Corpus, seed: int, lr: float):
        self.id = cid
        self.data = data
        self.rng = np.random.default_rng([seed, 1000 + cid])
        self.lr = lr
        self.lora: dict[Target, LoraModule] = {}
        self.optimizer: AdamW | None = None
        self.last_loss = math.nan

    def receive(self, global_lora: Mapping[Target, LoraModule]) -> None:
        """Overwrite the local LoRA with the broadcast values, keeping optimizer state."""
        if not self.lora:
            self.lora = copy_set(global_lora, requires_grad=True)
            self.optimizer = AdamW(lora_parameters(self.lora), lr=self.lr)
            return
        for key, mod in global_lora.items():
            self.lora[key].A.data[...] = mod.A.data
            self.lora[key].B.data[...] = mod.B.data


def proximal_grads(local: Sequence[Tensor], anchor: Sequence[np.ndarray], mu: float) -> list[np.ndarray]:
    """Gradient of ``(mu/2) ||w - w_anchor||^2``: ``mu (w - w_anchor)``."""
    return [mu * (p.data - a) for p, a in zip(local, anchor)]


def proximal_value(local: Sequence[Tensor], anchor: Sequence[np.ndarray], mu: float) -> float:
    return 0.5 * mu * math.fsum(float(np.sum((p.data - a) ** 2)) for p, a in zip(local, anchor))


def local_update(
    client: Client,
    model: TransformerModel,
    global_lora: Mapping[Target, LoraModule],
    mu: float,
    H: int,
    batch_size: int,
    offset: int,
    frozen_lora: Mapping[Target, LoraModule] | None = None,
    max_steps: int | None = None,
) -> dict[Target, LoraModule] | None:
    """``H`` epochs of proximal training of the client's LoRA on its own data.

    ``global_lora`` is keyed relative to ``offset`` (the first block it
    targets in ``model``).  Returns ``None`` for a client without data.
    """
    if len(client.data) == 0:
        warnings.warn(f"client {client.id} has no data and is skipped", stacklevel=2)
        return None
    client.receive(global_lora)
    params = lora_parameters(client.lora)
    anchor = [p.data.copy() for p in lora_parameters(global_lora)]
    lora_map = dict(frozen_lora or {})
    lora_map.update(shift_layers(client.lora, offset))
    losses = []
    steps = 0
    for _ in range(H):
        order = client.rng.permutation(len(client.data))
        for s in range(0, len(order), batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            inp, tgt = make_batch([client.data.examples[i] for i in order[s : s + batch_size]])
            loss = T.cross_entropy(model(inp, lora=lora_map), tgt)
            client.optimizer.zero_grad()
            T.backward(loss)
            extra = proximal_grads(params, anchor, mu) if mu else None
            client.optimizer.step(extra)
            losses.append(loss.item())
            steps += 1
    client.last_loss = float(np.mean(losses)) if losses else math.nan
    return copy_set(client.lora, requires_grad=False)


def train_centralized(
    model: TransformerModel,
    lora: Mapping[Target, LoraModule],
    data: Corpus,
    epochs: int,
    batch_size: int,
    lr: float,
    offset: int,
    rng: np.random.Generator,
    frozen_lora: Mapping[Target, LoraModule] | None = None,
) -> dict[Target, LoraModule]:
    """Plain LoRA training on one corpus (reference for the one-client federation)."""
    lora = copy_set(lora, requires_grad=True)
    opt = AdamW(lora_parameters(lora), lr=lr)
    lora_map = dict(frozen_lora or {})
    lora_map.update(shift_layers(lora, offset))
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), batch_size):
            inp, tgt = make_batch([data.examples[i] for i in order[s : s + batch_size]])
            loss = T.cross_entropy(model(inp, lora=lora_map), tgt)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    return copy_set(lora, requires_grad=False)


# -- server and round loop -------------------------------------------------------
@dataclass
class ServerState:
    """Everything the server keeps between rounds.

    ``client_model`` is the model handed to clients (the quantised sub-LLM, or
    the quantised full model for ``full_lora``).  ``global_lora`` is keyed
    relative to ``offset`` inside ``client_model``; ``plug`` merges it into the
    full model.
    """

    full: TransformerModel
    client_model: TransformerModel
    global_lora: dict[Target, LoraModule]
    offset: int
    plug: Callable[[TransformerModel, Mapping[Target, LoraModule]], TransformerModel]
    aligner: Aligner | None = None
    round: int = 0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    mode: str
    mean_client_loss: float
    eval_loss: float
    eval_accuracy: float
    bytes_up: int
    bytes_down: int
    params_up: int
    params_down: int
    realigned: int

    def as_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FedResult:
    model: TransformerModel
    global_lora: dict[Target, LoraModule]
    rounds: list[RoundRecord]
    ledger: CostLedger
    initial_eval: dict
    alignment: list = field(default_factory=list)
    trajectory: list[dict[Target, LoraModule]] = field(default_factory=list)


def _payload(modules: Mapping[Target, LoraModule], d_model: int) -> tuple[bytes, int, int]:
    raw = encode(modules)
    nf4 = len(encode(modules, quantized=True))
    r = next(iter(modules.values())).rank if modules else 0
    return raw, lora_param_count(list(modules), d_model, r), nf4


def run_fft(
    server: ServerState,
    client_data: Sequence[Corpus],
    cfg: FedConfig,
    ledger: CostLedger,
    public: Corpus | None = None,
    eval_corpus: Corpus | None = None,
    r_interval: int = 5,
    keep_trajectory: bool = False,
) -> FedResult:
    """The federated rounds.  Round ``t``: optional realignment, broadcast,
    local updates, upload, FedAvg, ledger and metrics.
    """
    if len(client_data) != cfg.N:
        raise ValueError(f"{len(client_data)} client corpora for N={cfg.N}")
    interval = realign_interval(cfg.mode, r_interval)
    if interval is not None and server.aligner is None:
        raise ValueError(f"mode {cfg.mode} realigns but no aligner was set up")
    if interval is not None and public is None:
        raise ValueError("realignment needs the public corpus")
    d_model = server.full.config.d_model
    clients = [Client(k, data, cfg.seed, cfg.lr) for k, data in enumerate(client_data)]
    alpha = next(iter(server.global_lora.values())).alpha
    initial = evaluate(server.plug(server.full, server.global_lora), eval_corpus).as_dict() if eval_corpus else {}
    records: list[RoundRecord] = []
    trajectory = []
    align_reports = []
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.parallel else None
    try:
        for t in range(1, cfg.I + 1):
            server.round = t
            ledger.begin_round(t)
            realigned = interval is not None and t % interval == 0
            frozen = {}
            if server.aligner is not None:
                if realigned:
                    align_reports.extend(
                        server.aligner.realign(t, public, cfg.seed, adapter_lora=server.global_lora)
                    )
                    raw, params, nf4 = _payload(server.aligner.lora, d_model)
                    ledger.transfer(t, "down", "emulator_lora", params, len(raw), nf4, copies=cfg.N)
                frozen = copy_set(server.aligner.lora, requires_grad=False)
            raw, params, nf4 = _payload(server.global_lora, d_model)
            ledger.transfer(t, "down", "adapter_lora", params, len(raw), nf4, copies=cfg.N)
            broadcast = decode(raw, alpha)

            def work(client):
                return local_update(
                    client, server.client_model, broadcast, cfg.mu, cfg.H, cfg.batch_size,
                    server.offset, frozen, cfg.max_local_steps,
                )

            results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            uploads, sizes = [], []
            for client, upd in zip(clients, results):
                if upd is None:
                    continue
                raw, params, nf4 = _payload(upd, d_model)
                ledger.transfer(t, "up", "adapter_lora", params, len(raw), nf4)
                uploads.append(decode(raw, alpha))
                sizes.append(len(client.data))
            if not uploads:
                raise RuntimeError(f"no client produced an update in round {t}")
            server.global_lora = fedavg(uploads, sizes)
            if keep_trajectory:
                trajectory.append(copy_set(server.global_lora, requires_grad=False))
            ev = evaluate(server.plug(server.full, server.global_lora), eval_corpus) if eval_corpus else None
            rc = ledger.rounds[-1]
            losses = [c.last_loss for c, u in zip(clients, results) if u is not None]
            records.append(
                RoundRecord(
                    t, cfg.mode, float(np.mean(losses)),
                    ev.loss if ev else math.nan, ev.accuracy if ev else math.nan,
                    rc.bytes_up, rc.bytes_down, rc.params_up, rc.params_down, int(realigned),
                )
            )
            log.info("round %d mode %s client loss %.4f eval %.4f", t, cfg.mode, records[-1].mean_client_loss,
                     records[-1].eval_loss)
    finally:
        if pool:
            pool.shutdown()
    final = server.plug(server.full, server.global_lora)
    return FedResult(final, server.global_lora, records, ledger, initial, align_reports, trajectory)
