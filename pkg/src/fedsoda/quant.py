"""Blockwise normal-CDF 4-bit quantisation.

Encoding per block of ``block_size`` values with scale ``sigma`` (the block's
population standard deviation)::

    code = round((2**bits - 1) * Phi(x / sigma))      # round half away from zero

Decoding uses the mid-riser point of each code cell::

    x_hat = sigma * Phi^-1((code + 0.5) / 2**bits)

Optional double quantisation replaces the f32 block scales by 8-bit codes
plus one f32 scale per 256 blocks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

SIGMA_EPS = 1e-12
DQ_GROUP = 256
HEADER_BYTES = 8  # u32 block_size, u32 block_count


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _pack(codes: np.ndarray, bits: int) -> bytes:
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    shifts = np.arange(bits, dtype=np.uint8)
    bitmat = ((codes[:, None].astype(np.uint8) >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def _unpack(raw: bytes | memoryview, count: int, bits: int) -> np.ndarray:
    arr = np.frombuffer(raw, dtype=np.uint8)
    if bits == 8:
        return arr[:count].astype(np.int64)
    bitvec = np.unpackbits(arr, bitorder="little")[: count * bits].reshape(count, bits)
    return (bitvec.astype(np.int64) << np.arange(bits)).sum(axis=1)


def _double_quantize(sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-bit absmax codes per 256-sigma group plus one f32 scale per group."""
    groups = math.ceil(sigmas.size / DQ_GROUP)
    scales = np.empty(groups, dtype=np.float32)
    codes = np.empty(sigmas.size, dtype=np.uint8)
    for g in range(groups):
        chunk = sigmas[g * DQ_GROUP : (g + 1) * DQ_GROUP].astype(np.float64)
        top = np.float32(max(chunk.max(), SIGMA_EPS))
        scales[g] = top
        codes[g * DQ_GROUP : (g + 1) * DQ_GROUP] = np.clip(round_half_away(chunk / float(top) * 255.0), 0, 255)
    return codes, scales


def _double_dequantize(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    per = np.repeat(scales.astype(np.float64), DQ_GROUP)[: codes.size]
    return codes.astype(np.float64) * per / 255.0


@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple[int, ...]
    block_size: int
    bits: int
    codes: np.ndarray  # int64, one entry per parameter
    sigmas: np.ndarray  # float32, one per block (the values actually used for coding)
    dq_codes: np.ndarray | None = None
    dq_scales: np.ndarray | None = None

    @property
    def param_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def block_count(self) -> int:
        return math.ceil(self.param_count / self.block_size)

    @property
    def double_quant(self) -> bool:
        return self.dq_codes is not None

    def block_scales(self) -> np.ndarray:
        """Per-block sigma as decoded (after double quantisation, if enabled)."""
        if self.double_quant:
            return _double_dequantize(self.dq_codes, self.dq_scales)
        return self.sigmas.astype(np.float64)

    def dequantize(self) -> np.ndarray:
        levels = 2**self.bits
        sig = np.repeat(self.block_scales(), self.block_size)[: self.param_count]
        vals = sig * ndtri((self.codes + 0.5) / levels)
        return vals.reshape(self.shape)

    def storage_bytes(self) -> int:
        return storage_bytes(self.param_count, self.bits, self.block_size, self.double_quant)

    def bits_per_param(self) -> float:
        return 8.0 * self.storage_bytes() / self.param_count

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<II", self.block_size, self.block_count), _pack(self.codes, self.bits)]
        if self.double_quant:
            parts.append(self.dq_codes.astype(np.uint8).tobytes())
            parts.append(self.dq_scales.astype("<f4").tobytes())
        else:
            parts.append(self.sigmas.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(
        cls, raw: bytes | memoryview, shape: tuple[int, ...], bits: int = 4, double_quant: bool = False
    ) -> tuple["QuantizedTensor", int]:
        """Parse one block layout; returns the tensor and the number of bytes consumed."""
        view = memoryview(raw)
        block_size, block_count = struct.unpack_from("<II", view, 0)
        count = int(np.prod(shape)) if shape else 1
        if block_count != math.ceil(count / block_size):
            raise ValueError("block count does not match tensor shape")
        pos = HEADER_BYTES
        code_len = math.ceil(count * bits / 8)
        codes = _unpack(view[pos : pos + code_len], count, bits)
        pos += code_len
        dq_codes = dq_scales = None
        if double_quant:
            dq_codes = np.frombuffer(view[pos : pos + block_count], dtype=np.uint8).copy()
            pos += block_count
            groups = math.ceil(block_count / DQ_GROUP)
            dq_scales = np.frombuffer(view[pos : pos + 4 * groups], dtype="<f4").astype(np.float32)
            pos += 4 * groups
            sigmas = _double_dequantize(dq_codes, dq_scales).astype(np.float32)
        else:
            sigmas = np.frombuffer(view[pos : pos + 4 * block_count], dtype="<f4").astype(np.float32)
            pos += 4 * block_count
        return cls(tuple(shape), block_size, bits, codes, sigmas, dq_codes, dq_scales), pos


def storage_bytes(param_count: int, bits: int = 4, block_size: int = 64, double_quant: bool = False) -> int:
    """Payload bytes (codes plus scale constants), excluding the 8-byte header."""
    blocks = math.ceil(param_count / block_size)
    code_bytes = math.ceil(param_count * bits / 8)
    if double_quant:
        return code_bytes + blocks + 4 * math.ceil(blocks / DQ_GROUP)
    return code_bytes + 4 * blocks


def block_sigmas(flat: np.ndarray, block_size: int) -> np.ndarray:
    blocks = math.ceil(flat.size / block_size)
    out = np.empty(blocks, dtype=np.float64)
    for b in range(blocks):
        out[b] = np.std(flat[b * block_size : (b + 1) * block_size])
    out[out == 0.0] = SIGMA_EPS
    return out


def quantize(
    x,
    bits: int = 4,
    block_size: int = 64,
    double_quant: bool = False,
    sigmas: np.ndarray | None = None,
) -> QuantizedTensor:
    """Quantise ``x`` blockwise.

    ``sigmas`` overrides the per-block scales (used to re-encode values on an
    existing grid); by default each block's population standard deviation is
    used, rounded to f32 before coding so encode and decode share one scale.
    """
    arr = np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot quantise an empty tensor")
    if not 2 <= bits <= 8:
        raise ValueError("bits must be in 2..8")
    if block_size < 2:
        raise ValueError("block_size must be >= 2")
    flat = arr.reshape(-1)
    sig = block_sigmas(flat, block_size) if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    sig32 = sig.astype(np.float32)
    sig32[sig32 == 0] = np.float32(SIGMA_EPS)
    dq_codes = dq_scales = None
    if double_quant:
        dq_codes, dq_scales = _double_quantize(sig32)
        used = _double_dequantize(dq_codes, dq_scales)
        used[used == 0.0] = SIGMA_EPS
    else:
        used = sig32.astype(np.float64)
    per = np.repeat(used, block_size)[: flat.size]
    top = 2**bits - 1
    codes = np.clip(round_half_away(top * ndtr(flat / per)), 0, top).astype(np.int64)
    return QuantizedTensor(tuple(arr.shape), block_size, bits, codes, used.astype(np.float32), dq_codes, dq_scales)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()
