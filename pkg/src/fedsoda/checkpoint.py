"""Model checkpoints in exact (f64), f32 and NF4 formats.

Layout::

    b"FSODA01" | u8 format | u32 json_len | json | payload

The JSON carries the model config and the ordered parameter names and shapes.
For the NF4 formats every 2-D weight is flattened in name order into one
quantised stream (each weight spans whole blocks); 1-D LayerNorm gains and
biases stay f32 because normal-CDF coding of near-constant blocks collapses
them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerModel, _block_shapes
from .quant import HEADER_BYTES, QuantizedTensor, quantize, storage_bytes
from .tensor import Tensor

MAGIC = b"FSODA01"
FORMATS = {"f64": 0, "f32": 1, "nf4": 2, "nf4dq": 3}
FORMAT_NAMES = {v: k for k, v in FORMATS.items()}
VERSION = 1


class CheckpointError(ValueError):
    pass


def _layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = config.d_model
    out = [("embed.tok", (config.V, d)), ("embed.pos", (config.S, d))]
    for i in range(config.m):
        out.extend((f"layers.{i}.{k}", s) for k, s in _block_shapes(config).items())
    out.extend([("head.ln.gain", (d,)), ("head.ln.bias", (d,)), ("head.unembed", (d, config.V))])
    return out


def _quantizable(layout, block_size: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for name, shape in layout:
        if len(shape) == 2:
            if math.prod(shape) % block_size:
                raise CheckpointError(f"{name} size is not a multiple of the block size {block_size}")
            out.append((name, shape))
    return out


@dataclass(frozen=True)
class CheckpointInfo:
    format: str
    total_bytes: int
    header_bytes: int
    quantized_params: int
    quantized_payload_bytes: int
    other_params: int
    other_payload_bytes: int

    @property
    def payload_bytes(self) -> int:
        return self.total_bytes - self.header_bytes

    @property
    def quantized_bits_per_param(self) -> float:
        return 8.0 * self.quantized_payload_bytes / self.quantized_params if self.quantized_params else math.nan

    @property
    def bits_per_param(self) -> float:
        return 8.0 * self.payload_bytes / (self.quantized_params + self.other_params)


def _header(config: ModelConfig, fmt: str, block_size: int) -> bytes:
    meta = {
        "version": VERSION,
        "config": config.to_dict(),
        "block_size": block_size,
        "params": [[n, list(s)] for n, s in _layout(config)],
    }
    js = json.dumps(meta, sort_keys=True).encode()
    return MAGIC + struct.pack("<BI", FORMATS[fmt], len(js)) + js


def encode_model(model: TransformerModel, fmt: str = "f64", block_size: int = 64) -> tuple[bytes, CheckpointInfo]:
    if fmt not in FORMATS:
        raise CheckpointError(f"unknown checkpoint format {fmt!r}")
    params = dict(model.named_parameters())
    layout = _layout(model.config)
    head = _header(model.config, fmt, block_size)
    body = []
    q_params = q_bytes = o_params = o_bytes = 0
    if fmt in ("f64", "f32"):
        dt = "<f8" if fmt == "f64" else "<f4"
        for name, _ in layout:
            raw = np.ascontiguousarray(params[name].data, dtype=dt).tobytes()
            body.append(raw)
            o_params += params[name].size
            o_bytes += len(raw)
        extra_header = 0
    else:
        qnames = _quantizable(layout, block_size)
        flat = np.concatenate([params[n].data.reshape(-1) for n, _ in qnames])
        q = quantize(flat, bits=4, block_size=block_size, double_quant=fmt == "nf4dq")
        raw = q.to_bytes()
        body.append(raw)
        q_params = flat.size
        q_bytes = len(raw) - HEADER_BYTES
        if q_bytes != storage_bytes(flat.size, 4, block_size, fmt == "nf4dq"):
            raise AssertionError("quantised payload size disagrees with the closed form")
        extra_header = HEADER_BYTES
        for name, shape in layout:
            if len(shape) != 2:
                raw = np.ascontiguousarray(params[name].data, dtype="<f4").tobytes()
                body.append(raw)
                o_params += params[name].size
                o_bytes += len(raw)
    blob = head + b"".join(body)
    info = CheckpointInfo(fmt, len(blob), len(head) + extra_header, q_params, q_bytes, o_params, o_bytes)
    return blob, info


def decode_model(blob: bytes) -> tuple[TransformerModel, str]:
    """Parse a checkpoint; NF4 weights come back dequantised to f64."""
    view = memoryview(blob)
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(MAGIC)
    code, js_len = struct.unpack_from("<BI", view, pos)
    pos += struct.calcsize("<BI")
    if code not in FORMAT_NAMES:
        raise CheckpointError(f"unknown format byte {code}")
    fmt = FORMAT_NAMES[code]
    meta = json.loads(bytes(view[pos : pos + js_len]))
    pos += js_len
    if meta.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != supported {VERSION}")
    config = ModelConfig(**meta["config"])
    layout = _layout(config)
    if [[n, list(s)] for n, s in layout] != meta["params"]:
        raise CheckpointError("parameter layout does not match the config")
    arrays: dict[str, np.ndarray] = {}
    if fmt in ("f64", "f32"):
        dt, width = ("<f8", 8) if fmt == "f64" else ("<f4", 4)
        for name, shape in layout:
            n = math.prod(shape) * width
            arrays[name] = np.frombuffer(view[pos : pos + n], dtype=dt).astype(np.float64).reshape(shape)
            pos += n
    else:
        block = int(meta["block_size"])
        qnames = _quantizable(layout, block)
        total = sum(math.prod(s) for _, s in qnames)
        q, used = QuantizedTensor.from_bytes(view[pos:], (total,), 4, fmt == "nf4dq")
        pos += used
        flat = q.dequantize()
        off = 0
        for name, shape in qnames:
            size = math.prod(shape)
            arrays[name] = flat[off : off + size].reshape(shape).copy()
            off += size
        for name, shape in layout:
            if len(shape) != 2:
                n = math.prod(shape) * 4
                arrays[name] = np.frombuffer(view[pos : pos + n], dtype="<f4").astype(np.float64).reshape(shape)
                pos += n
    if pos != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return _from_arrays(config, arrays), fmt


def _from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> TransformerModel:
    def t(name):
        return Tensor(np.array(arrays[name], dtype=np.float64))

    embed = {"tok": t("embed.tok"), "pos": t("embed.pos")}
    layers = [{k: t(f"layers.{i}.{k}") for k in _block_shapes(config)} for i in range(config.m)]
    head = {"ln.gain": t("head.ln.gain"), "ln.bias": t("head.ln.bias"), "unembed": t("head.unembed")}
    return TransformerModel(config, embed, layers, head)


def save_model(model: TransformerModel, path: str | Path, fmt: str = "f64", block_size: int = 64) -> CheckpointInfo:
    blob, info = encode_model(model, fmt, block_size)
    Path(path).write_bytes(blob)
    return info


def load_model(path: str | Path) -> TransformerModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} does not exist")
    return decode_model(p.read_bytes())[0]


def quantize_model(model: TransformerModel, double_quant: bool = False, block_size: int = 64) -> TransformerModel:
    """Round-trip ``model`` through the NF4 checkpoint format."""
    blob, _ = encode_model(model, "nf4dq" if double_quant else "nf4", block_size)
    return decode_model(blob)[0]
