"""Communication, storage and compute accounting.

Every transfer is recorded with the length of the payload that was actually
serialised.  Round 0 (initial model and emulator LoRA broadcast) is kept in a
separate setup account so per-round totals cover federated rounds only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .lora import Target, lora_param_count

KINDS = ("adapter_lora", "emulator_lora", "model")


@dataclass
class RoundCost:
    round: int
    params_up: int = 0
    params_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    emulator_params_down: int = 0
    emulator_transfers: int = 0
    realigned: bool = False
    bytes_up_nf4: int = 0
    bytes_down_nf4: int = 0


@dataclass
class CostLedger:
    mode: str = "fedsoda"
    rounds: list[RoundCost] = field(default_factory=list)
    setup: RoundCost = field(default_factory=lambda: RoundCost(0))
    storage: dict[str, int] = field(default_factory=dict)
    flops: dict[str, dict] = field(default_factory=dict)

    def _record(self, rnd: int) -> RoundCost:
        if rnd == 0:
            return self.setup
        if self.rounds and self.rounds[-1].round == rnd:
            return self.rounds[-1]
        if self.rounds and rnd <= self.rounds[-1].round:
            raise ValueError(f"round {rnd} recorded after round {self.rounds[-1].round}")
        self.rounds.append(RoundCost(rnd))
        return self.rounds[-1]

    def transfer(
        self, rnd: int, direction: str, kind: str, params: int, nbytes: int, nbytes_nf4: int = 0, copies: int = 1
    ) -> None:
        """Log ``copies`` identical transfers of one payload."""
        if direction not in ("up", "down") or kind not in KINDS:
            raise ValueError(f"bad transfer {direction}/{kind}")
        if params < 0 or nbytes < 0 or copies < 0:
            raise ValueError("negative transfer size")
        rec = self._record(rnd)
        if direction == "up":
            rec.params_up += params * copies
            rec.bytes_up += nbytes * copies
            rec.bytes_up_nf4 += nbytes_nf4 * copies
        else:
            rec.params_down += params * copies
            rec.bytes_down += nbytes * copies
            rec.bytes_down_nf4 += nbytes_nf4 * copies
        if kind == "emulator_lora" and direction == "down":
            rec.emulator_params_down += params * copies
            rec.emulator_transfers += copies
            if rnd:
                rec.realigned = True

    def begin_round(self, rnd: int) -> RoundCost:
        return self._record(rnd)

    # -- totals ---------------------------------------------------------------
    def totals(self) -> dict[str, int]:
        keys = ("params_up", "params_down", "bytes_up", "bytes_down", "emulator_params_down")
        return {k: sum(getattr(r, k) for r in self.rounds) for k in keys}

    def cumulative(self, key: str = "params_up") -> list[int]:
        out, acc = [], 0
        for r in self.rounds:
            acc += getattr(r, key)
            out.append(acc)
        return out

    def total_params(self) -> int:
        t = self.totals()
        return t["params_up"] + t["params_down"]

    def realigned_rounds(self) -> list[int]:
        return [r.round for r in self.rounds if r.realigned]

    def per_round_type(self) -> dict[str, float | None]:
        """Mean communicated params for ordinary rounds, realignment rounds, and overall."""
        def mean(rs):
            return (sum(r.params_up + r.params_down for r in rs) / len(rs)) if rs else None

        plain = [r for r in self.rounds if not r.realigned]
        re = [r for r in self.rounds if r.realigned]
        return {"ordinary": mean(plain), "realign": mean(re), "average": mean(self.rounds)}

    def summary(self, reduction_vs: Mapping[str, float] | None = None) -> dict:
        t = self.totals()
        return {
            "mode": self.mode,
            "rounds": len(self.rounds),
            "params_up_total": t["params_up"],
            "params_down_total": t["params_down"],
            "bytes_up_total": t["bytes_up"],
            "bytes_down_total": t["bytes_down"],
            "bytes_up_total_nf4": sum(r.bytes_up_nf4 for r in self.rounds),
            "bytes_down_total_nf4": sum(r.bytes_down_nf4 for r in self.rounds),
            "emulator_lora_rounds": self.realigned_rounds(),
            "per_round_type": self.per_round_type(),
            "setup": asdict(self.setup),
            "storage": dict(self.storage),
            "flops_estimates": dict(self.flops),
            "reduction_vs": dict(reduction_vs or {}),
            "note": "ordinary rounds move only the adapter LoRA; emulator LoRA is added on realignment rounds",
        }

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "setup": asdict(self.setup),
            "rounds": [asdict(r) for r in self.rounds],
            "storage": dict(self.storage),
            "flops": dict(self.flops),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CostLedger":
        return cls(
            d["mode"],
            [RoundCost(**r) for r in d["rounds"]],
            RoundCost(**d["setup"]),
            dict(d.get("storage", {})),
            dict(d.get("flops", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def comm_params_round(
    d_model: int,
    r: int,
    adapter_targets: Iterable[Target],
    emulator_targets: Iterable[Target] = (),
    realigned: bool = False,
) -> dict[str, int]:
    """Per-client parameter counts for one round.

    Upload is the adapter LoRA; download is the adapter LoRA plus the emulator
    LoRA on realignment rounds.
    """
    if r == 0:
        return {"up": 0, "down": 0}
    adapter = lora_param_count(list(adapter_targets), d_model, r)
    emulator = lora_param_count(list(emulator_targets), d_model, r) if realigned else 0
    return {"up": adapter, "down": adapter + emulator}


def predicted_total_params(
    d_model: int,
    r: int,
    adapter_targets: Iterable[Target],
    emulator_targets: Iterable[Target],
    N: int,
    I: int,
    realign_rounds: Iterable[int],
) -> int:
    """Closed-form total over ``I`` rounds and ``N`` clients."""
    adapter_targets = list(adapter_targets)
    emulator_targets = list(emulator_targets)
    re = set(realign_rounds)
    total = 0
    for t in range(1, I + 1):
        c = comm_params_round(d_model, r, adapter_targets, emulator_targets, t in re)
        total += N * (c["up"] + c["down"])
    return total


def flops_terms(S: int, d_model: int, r: int, m_f: int, m_b: int) -> dict[str, int]:
    """Per-term breakdown of ``(m_f + m_b) (S d^2 + S^2 d + S r d)``."""
    layers = m_f + m_b
    return {
        "projection": layers * S * d_model * d_model,
        "attention": layers * S * S * d_model,
        "lora": layers * S * r * d_model,
    }


def flops_estimate(S: int, d_model: int, r: int, m_f: int, m_b: int) -> int:
    """Forward cost ``m_f (S d^2 + S^2 d + S r d)`` plus the same form for ``m_b`` backward layers."""
    return sum(flops_terms(S, d_model, r, m_f, m_b).values())


def phase_flops(S: int, d_model: int, r: int, m_G: int, m_L: int, m_A: int) -> dict[str, dict]:
    """Estimates for full training and for the client fine-tuning phase."""
    return {
        "full_training": {"m_f": m_G, "m_b": m_G, "flops": flops_estimate(S, d_model, r, m_G, m_G)},
        "fft_client": {"m_f": m_L, "m_b": m_A, "flops": flops_estimate(S, d_model, r, m_L, m_A)},
    }


def storage_report(sizes: Mapping[str, int], param_counts: Mapping[str, int] | None = None) -> dict:
    """Bytes per artifact and compression ratios against the ``f32`` size ``4 P``."""
    out: dict = {"bytes": dict(sizes)}
    if param_counts:
        out["f32_bytes"] = {k: 4 * v for k, v in param_counts.items()}
        out["ratio_vs_f32"] = {
            k: (4 * param_counts[k] / sizes[k]) for k in sizes if k in param_counts and sizes[k] > 0
        }
    return out


def reduction_summary(ledgers: Mapping[str, CostLedger], reference: str = "fedsoda") -> dict[str, dict]:
    """Reference total params divided by each other mode's total, with the fraction saved."""
    if reference not in ledgers:
        raise ValueError(f"no ledger for reference mode {reference!r}")
    base = ledgers[reference]
    n_rounds = len(base.rounds)
    out = {}
    for mode, led in ledgers.items():
        if len(led.rounds) != n_rounds:
            raise ValueError(f"mode {mode} ran {len(led.rounds)} rounds, reference ran {n_rounds}")
        other = led.total_params()
        ratio = base.total_params() / other if other else math.nan
        out[mode] = {"ratio": ratio, "fewer_fraction": 1.0 - ratio if other else math.nan}
    return out
