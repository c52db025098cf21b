"""Pre-norm decoder-only transformer with hidden-state tracing.

Layer numbering follows the residual-stream trace: ``trace[0]`` is the
post-embedding state and ``trace[l]`` is the output of the ``l``-th block
(1-based).  Python lists of blocks are 0-based, so block ``l`` lives at
``model.layers[l - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .lora import LoraModule, Target, apply_rows
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    V: int = 64
    S: int = 64
    d_model: int = 64
    f: int = 4
    heads: int = 4
    m: int = 16
    L_A: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("V", "S", "d_model", "f", "heads", "m", "L_A"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.L_A >= self.m:
            raise ValueError("adapter must be smaller than the model (L_A < m)")

    @property
    def d_ff(self) -> int:
        return self.f * self.d_model

    @property
    def L_E(self) -> int:
        return self.m - self.L_A

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


Block = dict[str, Tensor]


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    return {
        "ln1.gain": (d,),
        "ln1.bias": (d,),
        "attn.q": (d, d),
        "attn.k": (d, d),
        "attn.v": (d, d),
        "attn.o": (d, d),
        "ln2.gain": (d,),
        "ln2.bias": (d,),
        "ffn.up": (d, cfg.d_ff),
        "ffn.down": (cfg.d_ff, d),
    }


class TransformerModel:
    def __init__(self, config: ModelConfig, embed: Block, layers: list[Block], head: Block):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.head = head
        if len(layers) != config.m:
            raise ValueError(f"config says m={config.m} but {len(layers)} blocks were given")
        self._check_shapes()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        d = config.d_model
        resid_std = std / math.sqrt(2 * config.m)
        embed = {
            "tok": Tensor(rng.normal(0, std, (config.V, d))),
            "pos": Tensor(rng.normal(0, std, (config.S, d))),
        }
        layers = []
        for _ in range(config.m):
            blk = {}
            for name, shape in _block_shapes(config).items():
                if name.endswith("gain"):
                    blk[name] = Tensor(np.ones(shape))
                elif name.endswith("bias"):
                    blk[name] = Tensor(np.zeros(shape))
                elif name in ("attn.o", "ffn.down"):
                    blk[name] = Tensor(rng.normal(0, resid_std, shape))
                else:
                    blk[name] = Tensor(rng.normal(0, std, shape))
            layers.append(blk)
        head = {
            "ln.gain": Tensor(np.ones(d)),
            "ln.bias": Tensor(np.zeros(d)),
            "unembed": Tensor(rng.normal(0, std, (d, config.V))),
        }
        return cls(config, embed, layers, head)

    def _check_shapes(self) -> None:
        cfg = self.config
        expect = {"tok": (cfg.V, cfg.d_model), "pos": (cfg.S, cfg.d_model)}
        for k, s in expect.items():
            if self.embed[k].shape != s:
                raise ValueError(f"embedding {k} has shape {self.embed[k].shape}, expected {s}")
        shapes = _block_shapes(cfg)
        for i, blk in enumerate(self.layers):
            for k, s in shapes.items():
                if blk[k].shape != s:
                    raise ValueError(f"layer {i} {k} has shape {blk[k].shape}, expected {s}")
        if self.head["unembed"].shape != (cfg.d_model, cfg.V):
            raise ValueError("unembedding shape mismatch")

    # -- parameters ------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"embed.{k}", v) for k, v in self.embed.items()]
        for i, blk in enumerate(self.layers):
            out.extend((f"layers.{i}.{k}", v) for k, v in blk.items())
        out.extend((f"head.{k}", v) for k, v in self.head.items())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "TransformerModel":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def clone(self) -> "TransformerModel":
        """Deep copy with fresh parameter storage and no gradients."""
        def cp(block):
            return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in block.items()}

        return TransformerModel(self.config, cp(self.embed), [cp(b) for b in self.layers], cp(self.head))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    # -- forward ------------------------------------------------------------
    def forward(
        self,
        tokens,
        lora: Mapping[Target, LoraModule] | None = None,
        trace: bool = False,
        stop_after: int | None = None,
    ):
        """Run the model on ``[S]`` or ``[B, S]`` token ids.

        Returns logits, or ``(logits, trace)`` when ``trace`` is set.  LoRA keys
        are ``(0-based block index, projection)``.  ``stop_after`` ends the pass
        after that many blocks and returns ``(None, trace)``.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError("tokens must be [S] or [B, S]")
        S = ids.shape[1]
        if S > self.config.S:
            raise ValueError(f"sequence length {S} exceeds the model maximum {self.config.S}")
        if S == 0:
            raise ValueError("empty sequence")
        lora = lora or {}
        x = T.embedding(self.embed["tok"], ids) + T.reshape(
            T.embedding(self.embed["pos"], np.arange(S)), (S, self.config.d_model)
        )
        states = [x] if trace else None
        n_blocks = self.config.m if stop_after is None else stop_after
        for i in range(n_blocks):
            x = self._block(x, self.layers[i], i, lora)
            if trace:
                states.append(x)
        if stop_after is not None:
            return None, _squeeze(states, single)
        h = T.layer_norm(x, self.head["ln.gain"], self.head["ln.bias"], self.config.ln_eps)
        logits = h @ self.head["unembed"]
        if single:
            logits = T.reshape(logits, logits.shape[1:])
        if trace:
            return logits, _squeeze(states, single)
        return logits

    __call__ = forward

    def _block(self, x: Tensor, blk: Block, index: int, lora) -> Tensor:
        cfg = self.config
        B, S, d = x.shape
        h, dh = cfg.heads, d // cfg.heads
        a = T.layer_norm(x, blk["ln1.gain"], blk["ln1.bias"], cfg.ln_eps)
        q = apply_rows(a, blk["attn.q"], lora.get((index, "q")))
        k = apply_rows(a, blk["attn.k"], lora.get((index, "k")))
        v = apply_rows(a, blk["attn.v"], lora.get((index, "v")))

        def heads(t):
            return T.transpose(T.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(dh))
        att = T.causal_softmax(scores)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, S, d))
        x = x + apply_rows(ctx, blk["attn.o"], lora.get((index, "o")))
        b = T.layer_norm(x, blk["ln2.gain"], blk["ln2.bias"], cfg.ln_eps)
        return x + T.gelu(b @ blk["ffn.up"]) @ blk["ffn.down"]


def _squeeze(states, single):
    if not single:
        return states
    return [T.reshape(s, s.shape[1:]) for s in states]


def forward_with_trace(model: TransformerModel, tokens, lora=None):
    """``(logits, trace)`` with ``len(trace) == m + 1``."""
    return model.forward(tokens, lora=lora, trace=True)


@dataclass(frozen=True)
class ModelPartition:
    emulator: list[Block]
    adapter: list[Block]

    @property
    def L_E(self) -> int:
        return len(self.emulator)

    @property
    def L_A(self) -> int:
        return len(self.adapter)


def partition(model: TransformerModel, L_A: int | None = None) -> ModelPartition:
    """Emulator = first ``m - L_A`` blocks, adapter = last ``L_A`` blocks."""
    m = model.config.m
    L_A = model.config.L_A if L_A is None else L_A
    if not 0 < L_A < m:
        raise ValueError(f"adapter size must satisfy 0 < L_A < m (got L_A={L_A}, m={m})")
    return ModelPartition(emulator=model.layers[: m - L_A], adapter=model.layers[m - L_A :])


def assemble(
    template: TransformerModel, emulator: Sequence[Block], adapter: Sequence[Block]
) -> TransformerModel:
    """Build a model sharing ``template``'s embeddings and head over the given blocks."""
    cfg = template.config.replace(m=len(emulator) + len(adapter), L_A=len(adapter))
    return TransformerModel(cfg, dict(template.embed), list(emulator) + list(adapter), dict(template.head))


def adapter_offset(model: TransformerModel) -> int:
    return model.config.m - model.config.L_A


def plug_adapter(full: TransformerModel, adapter_lora: Mapping[Target, LoraModule]) -> TransformerModel:
    """Return a copy of ``full`` with adapter LoRA updates merged into its weights.

    ``adapter_lora`` is keyed by adapter-relative block index.  Weights are
    stored ``[in, out]``, so the merged update is ``((alpha/r) B A)^T``.
    """
    out = full.clone()
    offset = adapter_offset(full)
    for (rel, matrix), mod in adapter_lora.items():
        if not 0 <= rel < full.config.L_A:
            raise ValueError(f"adapter LoRA targets block {rel} outside the adapter")
        W = out.layers[offset + rel][f"attn.{matrix}"]
        if W.shape != (mod.d_in, mod.d_out):
            raise ValueError(f"LoRA {mod.d_out}x{mod.d_in} does not fit weight {W.shape}")
        W.data = W.data + (mod.scaling * (mod.B.data @ mod.A.data)).T
    return out


def merge_lora(model: TransformerModel, lora: Mapping[Target, LoraModule]) -> TransformerModel:
    """Merge a LoRA set keyed by absolute block index into a copy of ``model``."""
    out = model.clone()
    for (layer, matrix), mod in lora.items():
        W = out.layers[layer][f"attn.{matrix}"]
        W.data = W.data + (mod.scaling * (mod.B.data @ mod.A.data)).T
    return out


def uniform_model(config: ModelConfig) -> TransformerModel:
    """A model with zero unembedding, so every position predicts uniformly."""
    model = TransformerModel.init(config, seed=0)
    model.head["unembed"].data = np.zeros_like(model.head["unembed"].data)
    return model


def shares_storage(a: TransformerModel, b: TransformerModel) -> bool:
    ids = {id(p.data) for p in a.parameters()}
    return any(id(p.data) in ids for p in b.parameters())


def deepcopy_blocks(blocks: Sequence[Block]) -> list[Block]:
    return [{k: Tensor(v.data.copy()) for k, v in blk.items()} for blk in blocks]


__all__ = [
    "ModelConfig",
    "TransformerModel",
    "ModelPartition",
    "forward_with_trace",
    "partition",
    "assemble",
    "plug_adapter",
    "merge_lora",
    "uniform_model",
]
