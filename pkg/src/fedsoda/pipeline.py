"""End-to-end wiring: pruning, quantisation, alignment and federated rounds per mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignmentGeometry, Aligner
from .checkpoint import encode_model, quantize_model
from .config import ExperimentConfig
from .corpus import CorpusBundle
from .federation import FedResult, ServerState, partition_dirichlet, run_fft
from .ledger import CostLedger, phase_flops
from .lora import LoraModule, Target, encode, lora_param_count, make_lora_set
from .model import TransformerModel, merge_lora, plug_adapter
from .pruning import PruningPlan, prune, similarity_group_pruning


@dataclass
class SubLLM:
    plan: PruningPlan
    sub: TransformerModel
    client_model: TransformerModel
    geometry: AlignmentGeometry


def rng_for(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, sum(ord(c) * 31**i for i, c in enumerate(tag)) % (2**32)])


def build_sub(full: TransformerModel, bundle: CorpusBundle, cfg: ExperimentConfig, plan: PruningPlan | None = None) -> SubLLM:
    """Prune with SGP (or replay ``plan``) and quantise the result if enabled."""
    if plan is None:
        calib = bundle.public.subset(range(min(cfg.pruning.calibration_samples, len(bundle.public))))
        sub, plan = similarity_group_pruning(full, calib, cfg.pruning_config())
    else:
        sub, _ = prune(full, plan)
    client = quantize_model(sub, cfg.quant.double_quant, cfg.quant.block_size) if cfg.quant.enabled else sub
    return SubLLM(plan, sub, client, AlignmentGeometry.from_plan(plan))


def emulator_lora(geometry: AlignmentGeometry, cfg: ExperimentConfig) -> dict[Target, LoraModule]:
    targets = [(l, m) for l in geometry.emulator_layers() for m in cfg.lora.targets]
    return make_lora_set(targets, cfg.model.d_model, cfg.lora.r, cfg.lora.alpha, cfg.lora.sigma_A,
                         rng_for(cfg.seed, "emulator_lora"))


def make_aligner(full: TransformerModel, s: SubLLM, cfg: ExperimentConfig) -> Aligner:
    return Aligner(full, s.client_model, s.geometry, emulator_lora(s.geometry, cfg), cfg.alignment_config())


def client_partitions(bundle: CorpusBundle, cfg: ExperimentConfig):
    parts = partition_dirichlet(bundle.private.labels, cfg.fed.N, cfg.fed.dirichlet_beta, cfg.seed)
    return [bundle.private.subset(p) for p in parts], parts


def _checkpoint_fmt(cfg: ExperimentConfig) -> str:
    if not cfg.quant.enabled:
        return "f64"
    return "nf4dq" if cfg.quant.double_quant else "nf4"


def build_server(
    full: TransformerModel,
    bundle: CorpusBundle,
    cfg: ExperimentConfig,
    mode: str,
    ledger: CostLedger,
    sub: SubLLM | None = None,
    pre_align: bool | None = None,
    aligner: Aligner | None = None,
) -> tuple[ServerState, list]:
    """Server state for ``mode``, with round-0 transfers logged in the setup account."""
    pre_align = cfg.alignment.pre_align if pre_align is None else pre_align
    N, r = cfg.fed.N, cfg.lora.r
    mc = full.config
    reports = []
    if mode == "full_lora":
        client_model = quantize_model(full, cfg.quant.double_quant, cfg.quant.block_size) if cfg.quant.enabled \
            else full.clone()
        targets = [(l, m) for l in range(mc.m) for m in cfg.lora.targets]
        lora = make_lora_set(targets, mc.d_model, r, cfg.lora.alpha, cfg.lora.sigma_A, rng_for(cfg.seed, "adapter_lora"))
        blob, _ = encode_model(client_model, _checkpoint_fmt(cfg), cfg.quant.block_size)
        ledger.transfer(0, "down", "model", client_model.param_count(), len(blob), copies=N)
        ledger.flops = phase_flops(mc.S, mc.d_model, r, mc.m, mc.m, mc.m)
        return ServerState(full, client_model, lora, 0, merge_lora), reports
    sub = sub or build_sub(full, bundle, cfg)
    if aligner is None:
        aligner = make_aligner(full, sub, cfg)
        if pre_align:
            reports = aligner.pre_align(bundle.public, rng_for(cfg.seed, "pre_align"))
    targets = [(l, m) for l in range(mc.L_A) for m in cfg.lora.targets]
    lora = make_lora_set(targets, mc.d_model, r, cfg.lora.alpha, cfg.lora.sigma_A, rng_for(cfg.seed, "adapter_lora"))
    blob, _ = encode_model(sub.client_model, _checkpoint_fmt(cfg), cfg.quant.block_size)
    ledger.transfer(0, "down", "model", sub.client_model.param_count(), len(blob), copies=N)
    raw = encode(aligner.lora)
    ledger.transfer(0, "down", "emulator_lora", lora_param_count(list(aligner.lora), mc.d_model, r), len(raw),
                    len(encode(aligner.lora, quantized=True)), copies=N)
    m_L = sub.client_model.config.m
    ledger.flops = phase_flops(mc.S, mc.d_model, r, mc.m, m_L, mc.L_A)
    offset = sub.client_model.config.L_E
    return ServerState(full, sub.client_model, lora, offset, plug_adapter, aligner), reports


def run_mode(
    full: TransformerModel,
    bundle: CorpusBundle,
    cfg: ExperimentConfig,
    mode: str | None = None,
    sub: SubLLM | None = None,
    pre_align: bool | None = None,
    keep_trajectory: bool = False,
    evaluate_rounds: bool = True,
) -> FedResult:
    mode = mode or cfg.fed.mode
    ledger = CostLedger(mode)
    server, reports = build_server(full, bundle, cfg, mode, ledger, sub, pre_align)
    data, _ = client_partitions(bundle, cfg)
    res = run_fft(
        server, data, cfg.fed_config(mode), ledger, bundle.public,
        bundle.eval if evaluate_rounds else None, cfg.alignment.r_interval, keep_trajectory,
    )
    res.alignment = list(reports) + res.alignment
    return res
