"""Language-model loss, evaluation and server-side pre-training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Corpus, batches, make_batch
from .model import TransformerModel
from .optim import AdamW

log = logging.getLogger(__name__)


def lm_loss(model: TransformerModel, inputs: np.ndarray, targets: np.ndarray, lora=None) -> T.Tensor:
    return T.cross_entropy(model(inputs, lora=lora), targets)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    perplexity: float
    accuracy: float  # NaN when the corpus has no answer spans
    tokens: int
    examples: int

    def as_dict(self) -> dict:
        return {"loss": self.loss, "perplexity": self.perplexity, "accuracy": self.accuracy,
                "tokens": self.tokens, "examples": self.examples}


def evaluate(model: TransformerModel, corpus: Corpus, lora=None, batch_size: int = 64) -> EvalResult:
    """Token-weighted mean loss, its perplexity, and exact match on answer spans."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate on an empty corpus")
    total = 0.0
    count = 0
    hits = 0
    scored = 0
    for inp, tgt, idx in batches(corpus, batch_size):
        logits = model(inp, lora=lora).data
        keep = tgt >= 0
        logp = T.log_softmax_np(logits[keep])
        total += float(-logp[np.arange(logp.shape[0]), tgt[keep]].sum())
        count += int(keep.sum())
        pred = logits.argmax(axis=-1)
        for row, i in enumerate(idx):
            ex = corpus.examples[i]
            if ex.answer_start is None or ex.answer_len == 0:
                continue
            lo = ex.answer_start - 1
            hi = lo + ex.answer_len
            scored += 1
            hits += int(np.array_equal(pred[row, lo:hi], tgt[row, lo:hi]))
    loss = total / count
    acc = hits / scored if scored else float("nan")
    return EvalResult(loss, math.exp(loss), acc, count, len(corpus))


def pretrain(
    model: TransformerModel,
    corpus: Corpus,
    steps: int,
    batch_size: int = 16,
    lr: float = 3e-3,
    betas: tuple[float, float] = (0.9, 0.95),
    warmup: int = 50,
    seed: int = 0,
    log_every: int = 0,
) -> list[float]:
    """Full-parameter training with linear warmup and cosine decay; returns step losses."""
    rng = np.random.default_rng(seed)
    model.requires_grad_(True)
    opt = AdamW(model.parameters(), lr=lr, betas=betas)
    losses = []
    n = len(corpus)
    for step in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        inp, tgt = make_batch([corpus.examples[i] for i in idx])
        if step < warmup:
            opt.lr = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        loss = lm_loss(model, inp, tgt)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    model.requires_grad_(False)
    return losses
