"""Low-rank adapters: init, forward composition, merge, counting and wire format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MATRIX_IDS = {"q": 0, "k": 1, "v": 2, "o": 3}
MATRIX_NAMES = {v: k for k, v in MATRIX_IDS.items()}
DEFAULT_TARGET_MATRICES = ("q", "v")

Target = tuple[int, str]


@dataclass
class LoraModule:
    """Trainable factors for ``delta W = (alpha / r) * B @ A``.

    ``A`` is ``[r, k]`` and ``B`` is ``[d, r]`` where the wrapped weight maps
    ``k`` inputs to ``d`` outputs.
    """

    target: Target
    A: Tensor
    B: Tensor
    alpha: float
    sigma_A: float = 0.02

    def __post_init__(self):
        r, k = self.A.shape
        d, rb = self.B.shape
        if r != rb:
            raise ShapeError(f"A is {self.A.shape} but B is {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def param_count(self) -> int:
        return self.A.size + self.B.size

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def copy(self, requires_grad: bool | None = None) -> "LoraModule":
        rg = self.A.requires_grad if requires_grad is None else requires_grad
        return LoraModule(
            self.target,
            Tensor(self.A.data.copy(), requires_grad=rg),
            Tensor(self.B.data.copy(), requires_grad=rg),
            self.alpha,
            self.sigma_A,
        )


def init_lora(
    d: int,
    k: int,
    r: int,
    alpha: float,
    sigma_A: float = 0.02,
    seed: int | np.random.Generator = 0,
    target: Target = (0, "q"),
) -> LoraModule:
    """A ~ N(0, sigma_A^2) i.i.d., B = 0, so the initial update is exactly zero."""
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    if r > min(d, k):
        raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
    if 2 * r > min(d, k):
        raise ValueError(f"rank {r} is not low-rank for a {d}x{k} matrix (need r <= min(d,k)/2)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = rng.normal(0.0, sigma_A, size=(r, k))
    B = np.zeros((d, r))
    return LoraModule(target, Tensor(A, requires_grad=True), Tensor(B, requires_grad=True), alpha, sigma_A)


def lora_forward(W, module: LoraModule, x: Tensor) -> Tensor:
    """``W @ x + (alpha/r) * B @ (A @ x)`` with ``W`` treated as frozen."""
    w = Tensor(W.data if isinstance(W, Tensor) else W)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if w.shape != (module.d_out, module.d_in):
        raise ShapeError(f"weight {w.shape} does not match LoRA {(module.d_out, module.d_in)}")
    if x.shape[0] != module.d_in:
        raise ShapeError(f"input {x.shape} does not match weight {w.shape}")
    base = T.matmul(w, x)
    low = T.matmul(module.B, T.matmul(module.A, x))
    return base + low * module.scaling


def apply_rows(x: Tensor, W: Tensor, module: LoraModule | None) -> Tensor:
    """Row-vector projection ``x @ W`` (``W`` stored ``[in, out]``) plus the adapter path."""
    y = x @ W
    if module is None:
        return y
    if W.shape != (module.d_in, module.d_out):
        raise ShapeError(f"weight {W.shape} does not match LoRA {(module.d_in, module.d_out)}")
    low = (x @ T.transpose(module.A)) @ T.transpose(module.B)
    return y + low * module.scaling


def merge(module: LoraModule) -> np.ndarray:
    """The dense update ``(alpha/r) * B @ A`` as a ``[d, k]`` array."""
    return module.scaling * (module.B.data @ module.A.data)


@dataclass
class AttachmentPlan:
    """Which sub-model weights carry adapters.

    Emulator targets use sub-model layer indices (0-based); adapter targets use
    adapter-relative indices ``0 .. L_A-1``.
    """

    emulator_layers: list[int]
    adapter_layers: list[int]
    matrices: tuple[str, ...] = DEFAULT_TARGET_MATRICES
    emulator_size: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.emulator_size is not None:
            bad = [l for l in self.emulator_layers if not 0 <= l < self.emulator_size]
            if bad:
                raise ValueError(f"emulator targets {bad} outside the sub-emulator")

    @property
    def emulator_targets(self) -> list[Target]:
        return [(l, m) for l in self.emulator_layers for m in self.matrices]

    @property
    def adapter_targets(self) -> list[Target]:
        return [(l, m) for l in self.adapter_layers for m in self.matrices]


def matrix_dims(d_model: int, matrix: str) -> tuple[int, int]:
    """(d_out, d_in) of an attention projection."""
    if matrix not in MATRIX_IDS:
        raise ValueError(f"unknown matrix {matrix!r}")
    return d_model, d_model


def lora_param_count(targets: Iterable[Target] | AttachmentPlan, d_model: int, r: int) -> int:
    """Sum over targets of ``r * (d_in + d_out)``."""
    if isinstance(targets, AttachmentPlan):
        targets = targets.emulator_targets + targets.adapter_targets
    total = 0
    for _, matrix in targets:
        d_out, d_in = matrix_dims(d_model, matrix)
        total += r * (d_in + d_out)
    return total


def make_lora_set(
    targets: Iterable[Target], d_model: int, r: int, alpha: float, sigma_A: float, rng: np.random.Generator
) -> dict[Target, LoraModule]:
    out = {}
    for layer, matrix in targets:
        d_out, d_in = matrix_dims(d_model, matrix)
        out[(layer, matrix)] = init_lora(d_out, d_in, r, alpha, sigma_A, rng, (layer, matrix))
    return out


def lora_parameters(modules: Mapping[Target, LoraModule]) -> list[Tensor]:
    return [p for key in sorted(modules) for p in modules[key].parameters()]


def copy_set(modules: Mapping[Target, LoraModule], requires_grad: bool | None = None) -> dict[Target, LoraModule]:
    return {k: m.copy(requires_grad) for k, m in modules.items()}


def shift_layers(modules: Mapping[Target, LoraModule], offset: int) -> dict[Target, LoraModule]:
    """Re-key a set by ``layer + offset``; the module objects are shared."""
    return {(l + offset, m): mod for (l, m), mod in modules.items()}


# -- wire format ------------------------------------------------------------
def encode(modules: Mapping[Target, LoraModule], quantized: bool = False, block_size: int = 64) -> bytes:
    """Serialise a LoRA set.

    ``[u32 count]`` then per target ``[u16 layer][u8 matrix][u16 r][u16 d][u16 k]``
    followed by A then B, either as little-endian f64 or as NF4 block layouts.
    """
    from .quant import quantize

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(modules)))
    for key in sorted(modules):
        mod = modules[key]
        layer, matrix = key
        buf.write(struct.pack("<HBHHH", layer, MATRIX_IDS[matrix], mod.rank, mod.d_out, mod.d_in))
        for arr in (mod.A.data, mod.B.data):
            if quantized:
                buf.write(quantize(arr, bits=4, block_size=block_size).to_bytes())
            else:
                buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def decode(payload: bytes, alpha: float, quantized: bool = False) -> dict[Target, LoraModule]:
    from .quant import QuantizedTensor

    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = {}
    for _ in range(count):
        layer, mid, r, d, k = struct.unpack_from("<HBHHH", view, pos)
        pos += struct.calcsize("<HBHHH")
        arrays = []
        for shape in ((r, k), (d, r)):
            if quantized:
                q, used = QuantizedTensor.from_bytes(view[pos:], shape)
                arrays.append(q.dequantize())
                pos += used
            else:
                n = shape[0] * shape[1] * 8
                arrays.append(np.frombuffer(view[pos : pos + n], dtype="<f8").reshape(shape).astype(np.float64))
                pos += n
        key = (layer, MATRIX_NAMES[mid])
        out[key] = LoraModule(key, Tensor(arrays[0]), Tensor(arrays[1]), alpha)
    if pos != len(payload):
        raise ValueError("trailing bytes in LoRA payload")
    return out


def header_bytes(n_targets: int) -> int:
    return 4 + n_targets * struct.calcsize("<HBHHH")
