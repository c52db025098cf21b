"""Command-line entry point.

Every command resolves an output root (``--out``, then ``$FEDSODA_OUT``, then
``paths.output_dir`` in the config, then ``./fedsoda_out``) and writes a
resolved config snapshot there.  Stages communicate through files only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import Aligner, AlignmentGeometry, epoch_means
from .checkpoint import CheckpointError, encode_model, load_model, save_model
from .config import ConfigError, ExperimentConfig, json_schema, load_config
from .corpus import Corpus, CorpusBundle, gen_corpus
from .federation import label_counts, run_fft
from .ledger import CostLedger, reduction_summary, storage_report
from .lora import decode, encode, shift_layers
from .model import TransformerModel
from .pipeline import SubLLM, build_server, client_partitions, emulator_lora, rng_for
from .pruning import PruningPlan, prune, similarity_group_pruning
from .tensor import NumericError
from .training import evaluate, pretrain

log = logging.getLogger("fedsoda")

ENV_OUT = "FEDSODA_OUT"
METRIC_FIELDS = ["round", "mode", "mean_client_loss", "eval_loss", "eval_accuracy",
                 "bytes_up", "bytes_down", "params_up", "params_down", "realigned"]
ALIGN_FIELDS = ["phase", "round", "epoch", "L_inter", "L_final", "L_KL", "joint"]
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


class MissingPrerequisite(RuntimeError):
    pass


# -- paths and io -----------------------------------------------------------
class Layout:
    def __init__(self, root: Path):
        self.root = root
        self.corpus = root / "corpus"
        self.full = root / "full.ckpt"
        self.prune = root / "prune"
        self.plan = self.prune / "plan.json"
        self.sub = self.prune / "sub.ckpt"
        self.sub_nf4 = self.prune / "sub_nf4.ckpt"
        self.align = root / "align"
        self.emulator = self.align / "emulator_lora.bin"
        self.runs = root / "runs"

    def run(self, mode: str, tag: str = "") -> Path:
        return self.runs / (mode + (f"-{tag}" if tag else ""))


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} is missing; run `fedsoda {command}` first")
    return path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serialisable: {type(o)}")


def resolve_root(args, cfg: ExperimentConfig) -> Path:
    root = getattr(args, "out", None) or os.environ.get(ENV_OUT) or cfg.paths.output_dir or "fedsoda_out"
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _snapshot(lay: Layout, cfg: ExperimentConfig) -> None:
    """Write the resolved config; refuse to mix artifacts from a different config."""
    snap = lay.root / "config.json"
    text = cfg.to_json()
    if snap.exists() and snap.read_text() != text:
        old = ExperimentConfig.model_validate_json(snap.read_text())
        if old.model != cfg.model or old.seed != cfg.seed or old.corpus != cfg.corpus:
            raise ConfigError(f"{snap} was written by a config with a different model/corpus/seed")
    snap.write_text(text)


def _bundle(lay: Layout, cfg: ExperimentConfig) -> CorpusBundle:
    if cfg.paths.corpus_dir:
        return CorpusBundle.load(_require(Path(cfg.paths.corpus_dir), "gen-corpus"))
    _require(lay.corpus / "public.jsonl", "gen-corpus")
    return CorpusBundle.load(lay.corpus)


# -- commands ---------------------------------------------------------------
def cmd_gen_corpus(args, cfg: ExperimentConfig, lay: Layout) -> int:
    bundle = gen_corpus(cfg.corpus_spec())
    for name, c in bundle.splits().items():
        c.validate(cfg.model.V, cfg.model.S, need_labels=name in ("private", "eval"))
    bundle.save(lay.corpus)
    print(json.dumps({k: len(v) for k, v in bundle.splits().items()}))
    return 0


def cmd_pretrain(args, cfg: ExperimentConfig, lay: Layout) -> int:
    bundle = _bundle(lay, cfg)
    model = TransformerModel.init(cfg.to_model_config(), seed=cfg.seed)
    p = cfg.pretrain
    losses = pretrain(model, bundle.pretrain, p.steps, p.batch_size, p.lr, cfg.optimizer.betas, p.warmup, cfg.seed,
                      log_every=100)
    save_model(model, lay.full, "f64")
    rows = [{"step": i + 1, "loss": l} for i, l in enumerate(losses)]
    write_csv(lay.root / "pretrain.csv", ["step", "loss"], rows)
    ev = {s: evaluate(model, getattr(bundle, s)).as_dict() for s in ("public_eval", "eval")}
    write_json(lay.root / "pretrain_eval.json", ev)
    print(json.dumps(ev))
    return 0


def cmd_prune(args, cfg: ExperimentConfig, lay: Layout) -> int:
    full = load_model(_require(lay.full, "pretrain"))
    bundle = _bundle(lay, cfg)
    calib = bundle.public.subset(range(min(cfg.pruning.calibration_samples, len(bundle.public))))
    sub, plan = similarity_group_pruning(full, calib, cfg.pruning_config())
    lay.prune.mkdir(parents=True, exist_ok=True)
    plan.save(lay.plan)
    infos = {"sub_f64": save_model(sub, lay.sub, "f64")}
    fmt = "nf4dq" if cfg.quant.double_quant else "nf4"
    infos["sub_nf4"] = save_model(sub, lay.sub_nf4, fmt, cfg.quant.block_size)
    _, full_f32 = encode_model(full, "f32")
    _, sub_f32 = encode_model(sub, "f32")
    sizes = {"full_f32": full_f32.payload_bytes, "sub_f32": sub_f32.payload_bytes,
             "sub_nf4": infos["sub_nf4"].payload_bytes}
    report = storage_report(sizes, {"full_f32": full.param_count(), "sub_f32": sub.param_count(),
                                    "sub_nf4": sub.param_count()})
    report["sub_nf4_bits_per_quantized_param"] = infos["sub_nf4"].quantized_bits_per_param
    report["files"] = {k: v.total_bytes for k, v in infos.items()}
    write_json(lay.prune / "storage.json", report)
    print(json.dumps({"group_starts": plan.group_starts, "pruned_layers": plan.pruned_layers,
                      "L_E_star": plan.L_E_star}))
    return 0


def _sub_llm(lay: Layout, cfg: ExperimentConfig, full: TransformerModel) -> SubLLM:
    plan = PruningPlan.load(_require(lay.plan, "prune"))
    sub, _ = prune(full, plan)
    client = load_model(_require(lay.sub_nf4, "prune")) if cfg.quant.enabled else sub
    if client.config.m != sub.config.m:
        raise CheckpointError("sub-LLM checkpoint does not match the pruning plan")
    return SubLLM(plan, sub, client, AlignmentGeometry.from_plan(plan))


def _load_lora(path: Path, cfg: ExperimentConfig):
    return decode(path.read_bytes(), cfg.lora.alpha)


def cmd_align(args, cfg: ExperimentConfig, lay: Layout) -> int:
    full = load_model(_require(lay.full, "pretrain"))
    bundle = _bundle(lay, cfg)
    s = _sub_llm(lay, cfg, full)
    lay.align.mkdir(parents=True, exist_ok=True)
    if args.phase == "pre":
        aligner = Aligner(full, s.client_model, s.geometry, emulator_lora(s.geometry, cfg), cfg.alignment_config())
        held_before = aligner.measure(bundle.public_eval)
        reports = aligner.pre_align(bundle.public, rng_for(cfg.seed, "pre_align"))
        held_after = aligner.measure(bundle.public_eval)
        write_json(lay.align / "pre_heldout.json", {"before": held_before, "after": held_after})
        csv_path = lay.align / "alignment.csv"
        rows = epoch_means(reports)
    else:
        lora = _load_lora(_require(lay.emulator, "align --phase pre"), cfg)
        aligner = Aligner(full, s.client_model, s.geometry, lora, cfg.alignment_config())
        adapter = None
        if args.adapter:
            adapter = _load_lora(_require(Path(args.adapter), "fedtune"), cfg)
        reports = aligner.realign(args.round, bundle.public, cfg.seed, adapter_lora=adapter)
        csv_path = lay.align / f"realign_round{args.round}.csv"
        rows = epoch_means(reports)
    lay.emulator.write_bytes(encode(aligner.lora))
    write_csv(csv_path, ALIGN_FIELDS, rows)
    print(json.dumps(rows[-1] if rows else {}))
    return 0


def run_fedtune(cfg: ExperimentConfig, lay: Layout, mode: str, tag: str = "") -> Path:
    full = load_model(_require(lay.full, "pretrain"))
    bundle = _bundle(lay, cfg)
    ledger = CostLedger(mode)
    pre_reports = []
    if mode == "full_lora":
        server, _ = build_server(full, bundle, cfg, mode, ledger)
        sub = None
    else:
        sub = _sub_llm(lay, cfg, full)
        if cfg.alignment.pre_align:
            lora = _load_lora(_require(lay.emulator, "align --phase pre"), cfg)
            rows = read_csv(_require(lay.align / "alignment.csv", "align --phase pre"))
            pre_reports = rows
        else:
            lora = emulator_lora(sub.geometry, cfg)
        aligner = Aligner(full, sub.client_model, sub.geometry, lora, cfg.alignment_config())
        server, _ = build_server(full, bundle, cfg, mode, ledger, sub, aligner=aligner)
    data, parts = client_partitions(bundle, cfg)
    res = run_fft(server, data, cfg.fed_config(mode), ledger, bundle.public, bundle.eval,
                  cfg.alignment.r_interval)
    out = lay.run(mode, tag)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    write_csv(out / "metrics.csv", METRIC_FIELDS, [r.as_row() for r in res.rounds])
    align_rows = [dict(r) for r in pre_reports] + epoch_means(res.alignment)
    write_csv(out / "alignment.csv", ALIGN_FIELDS, align_rows)
    ledger.storage = _storage_for(lay, sub)
    ledger.save(out / "ledger.json")
    write_json(out / "summary.json", ledger.summary())
    write_json(out / "initial_eval.json", res.initial_eval)
    write_json(out / "label_counts.json", label_counts(parts, bundle.private.labels))
    (out / "adapter_lora.bin").write_bytes(encode(res.global_lora))
    save_model(res.model, out / "plugged.ckpt", "f64")
    return out


def _storage_for(lay: Layout, sub) -> dict:
    path = lay.prune / "storage.json"
    if sub is None or not path.exists():
        return {}
    rep = json.loads(path.read_text())
    return {k: int(v) for k, v in rep.get("files", {}).items()}


def cmd_fedtune(args, cfg: ExperimentConfig, lay: Layout) -> int:
    mode = args.mode or cfg.fed.mode
    out = run_fedtune(cfg, lay, mode, args.tag or "")
    rows = read_csv(out / "metrics.csv")
    print(json.dumps({"run": str(out), "final_eval_loss": rows[-1]["eval_loss"]}))
    return 0


def cmd_eval(args, cfg: ExperimentConfig, lay: Layout) -> int:
    corpus = Corpus.load(_require(Path(args.corpus), "gen-corpus"))
    rows = []
    for ck in args.checkpoint:
        model = load_model(_require(Path(ck), "fedtune"))
        lora = None
        if args.lora:
            lora = shift_layers(_load_lora(Path(args.lora), cfg), model.config.L_E)
        r = evaluate(model, corpus, lora=lora).as_dict()
        rows.append({"checkpoint": ck, "corpus": args.corpus, **r})
    fields = ["checkpoint", "corpus", "loss", "perplexity", "accuracy", "tokens", "examples"]
    if args.output:
        write_csv(Path(args.output), fields, rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_report(args, cfg: ExperimentConfig, lay: Layout) -> int:
    runs = Path(args.runs)
    if not runs.exists():
        raise MissingPrerequisite(f"{runs} does not exist; run `fedsoda fedtune` first")
    ledgers, finals = {}, {}
    for d in sorted(p for p in runs.iterdir() if (p / "metrics.csv").exists()):
        ledgers[d.name] = CostLedger.from_json(json.loads(_require(d / "ledger.json", "fedtune").read_text()))
        rows = read_csv(d / "metrics.csv")
        finals[d.name] = {"final_eval_loss": float(rows[-1]["eval_loss"]),
                          "final_eval_accuracy": float(rows[-1]["eval_accuracy"]), "rounds": len(rows)}
    if not ledgers:
        raise MissingPrerequisite(f"no runs with metrics.csv under {runs}; run `fedsoda fedtune` first")
    ref = args.reference if args.reference in ledgers else next(iter(ledgers))
    comparable = {k: v for k, v in ledgers.items() if len(v.rounds) == len(ledgers[ref].rounds)}
    summary = {
        "reference": ref,
        "runs": {k: {**finals[k], **ledgers[k].summary()} for k in ledgers},
        "reduction_vs": reduction_summary(comparable, ref),
    }
    out = Path(args.output) if args.output else runs.parent / "report"
    write_json(out / "summary.json", summary)
    if not args.no_plots:
        _plots(runs, out)
    print(json.dumps({k: v["final_eval_loss"] for k, v in finals.items()}))
    return 0


def _plots(runs: Path, out: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping plots")
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for d in sorted(p for p in runs.iterdir() if (p / "metrics.csv").exists()):
        rows = read_csv(d / "metrics.csv")
        ax.plot([int(r["round"]) for r in rows], [float(r["eval_loss"]) for r in rows], label=d.name)
    ax.set_xlabel("round")
    ax.set_ylabel("eval loss")
    ax.legend()
    fig.tight_layout()
    out.mkdir(parents=True, exist_ok=True)
    fig.savefig(out / "eval_loss.png", dpi=100)
    plt.close(fig)


def cmd_pipeline(args, cfg: ExperimentConfig, lay: Layout) -> int:
    """Every stage in order; existing artifacts are reused unless ``--fresh``."""
    if args.fresh or not (lay.corpus / "public.jsonl").exists():
        cmd_gen_corpus(args, cfg, lay)
    if args.fresh or not lay.full.exists():
        cmd_pretrain(args, cfg, lay)
    cmd_prune(args, cfg, lay)
    if cfg.alignment.pre_align:
        args.phase = "pre"
        cmd_align(args, cfg, lay)
    modes = args.modes.split(",") if args.modes else [cfg.fed.mode]
    for mode in modes:
        run_fedtune(cfg, lay, mode)
    args.runs = str(lay.runs)
    args.output = None
    return cmd_report(args, cfg, lay)


def cmd_schema(args, cfg, lay) -> int:
    print(json.dumps(json_schema(), indent=2))
    return 0


# -- entry --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsoda", description="Desk-scale federated split fine-tuning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        sp.add_argument("--out", help=f"output root (overrides ${ENV_OUT})")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpora")
    add("pretrain", cmd_pretrain, "train the full model on the pre-training split")
    add("prune", cmd_prune, "similarity group pruning and NF4 sub-LLM checkpoint")
    sp = add("align", cmd_align, "pre-alignment or one realignment of the emulator LoRA")
    sp.add_argument("--phase", choices=("pre", "re"), default="pre")
    sp.add_argument("--round", type=int, default=0)
    sp.add_argument("--adapter", help="adapter LoRA payload to keep plugged in during realignment")
    sp = add("fedtune", cmd_fedtune, "federated fine-tuning rounds")
    sp.add_argument("--mode", choices=("fedsoda", "full_lora", "no_realign", "align_every_round"))
    sp.add_argument("--tag", help="suffix for the run directory")
    sp = add("eval", cmd_eval, "evaluate checkpoints on a corpus file")
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--lora", help="adapter LoRA payload applied to the adapter blocks")
    sp.add_argument("--output", help="CSV file for the metric rows")
    sp = add("report", cmd_report, "aggregate run directories")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--reference", default="fedsoda")
    sp.add_argument("--output")
    sp.add_argument("--no-plots", action="store_true")
    sp = add("pipeline", cmd_pipeline, "run every stage")
    sp.add_argument("--modes", help="comma-separated modes (default: the config's mode)")
    sp.add_argument("--fresh", action="store_true")
    sp.add_argument("--reference", default="fedsoda")
    sp.add_argument("--no-plots", action="store_true")
    add("schema", cmd_schema, "print the config JSON schema")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        lay = Layout(resolve_root(args, cfg))
        if args.command not in ("schema", "eval", "report"):
            _snapshot(lay, cfg)
        return args.fn(args, cfg, lay)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
