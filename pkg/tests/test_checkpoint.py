import json
import math
import struct

import numpy as np
import pytest

from fedsoda.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_model,
    encode_model,
    load_model,
    quantize_model,
    save_model,
)
from fedsoda.model import ModelConfig, TransformerModel
from fedsoda.quant import quantize, storage_bytes

from conftest import TINY, tokens

DEFAULT = ModelConfig()


def test_f64_roundtrip_bit_exact(tiny_model, tmp_path):
    info = save_model(tiny_model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    for (n, a), (_, b) in zip(tiny_model.named_parameters(), back.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    assert (tmp_path / "m.ckpt").stat().st_size == info.total_bytes
    assert info.payload_bytes == 8 * tiny_model.param_count()


def test_f32_roundtrip(tiny_model):
    blob, info = encode_model(tiny_model, "f32")
    back, fmt = decode_model(blob)
    assert fmt == "f32" and info.payload_bytes == 4 * tiny_model.param_count()
    for (_, a), (_, b) in zip(tiny_model.named_parameters(), back.named_parameters()):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize(
    "fmt,bits,max_ratio", [("nf4", 4.5, 7.2), ("nf4dq", 4 + 8 / 64 + 32 / (64 * 256), 7.8)]
)
def test_default_model_bits_per_param(fmt, bits, max_ratio):
    model = TransformerModel.init(DEFAULT, seed=0)
    blob, info = encode_model(model, fmt)
    P2 = sum(p.size for _, p in model.named_parameters() if p.data.ndim == 2)
    assert info.quantized_params == P2
    assert info.quantized_payload_bytes == storage_bytes(P2, 4, 64, fmt == "nf4dq")
    assert abs(info.quantized_bits_per_param - bits) < 0.002
    f32_bytes = 4 * model.param_count()
    assert 6.0 <= f32_bytes / info.payload_bytes <= max_ratio
    assert len(blob) == info.total_bytes


def test_nf4_weights_equal_stream_roundtrip(tiny_model):
    blob, _ = encode_model(tiny_model, "nf4")
    back, fmt = decode_model(blob)
    assert fmt == "nf4"
    names = [n for n, p in tiny_model.named_parameters() if p.data.ndim == 2]
    flat = np.concatenate([dict(tiny_model.named_parameters())[n].data.ravel() for n in names])
    want = quantize(flat).dequantize()
    got = np.concatenate([dict(back.named_parameters())[n].data.ravel() for n in names])
    np.testing.assert_array_equal(got, want)
    q = quantize_model(tiny_model)
    x = tokens(np.random.default_rng(0), 2, 5, TINY.V)
    np.testing.assert_array_equal(q(x).data, back(x).data)


def test_header_layout(tiny_model):
    blob, _ = encode_model(tiny_model, "nf4")
    assert blob[:7] == MAGIC
    code, js_len = struct.unpack_from("<BI", blob, 7)
    assert code == 2
    meta = json.loads(blob[12 : 12 + js_len])
    assert meta["version"] == 1 and meta["config"]["m"] == TINY.m and meta["block_size"] == 64


def test_corrupt_and_mismatched_checkpoints(tiny_model, tmp_path):
    blob, _ = encode_model(tiny_model)
    with pytest.raises(CheckpointError):
        decode_model(b"NOTCKPT" + blob[7:])
    with pytest.raises(CheckpointError):
        decode_model(blob + b"\0")
    bad_fmt = blob[:7] + bytes([9]) + blob[8:]
    with pytest.raises(CheckpointError):
        decode_model(bad_fmt)
    js_len = struct.unpack_from("<I", blob, 8)[0]
    meta = json.loads(blob[12 : 12 + js_len])
    meta["version"] = 2
    js = json.dumps(meta, sort_keys=True).encode()
    with pytest.raises(CheckpointError):
        decode_model(blob[:8] + struct.pack("<I", len(js)) + js + blob[12 + js_len :])
    with pytest.raises(CheckpointError):
        encode_model(tiny_model, "int8")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.ckpt")


def test_block_size_must_divide_weights():
    cfg = ModelConfig(V=10, S=6, d_model=6, f=1, heads=2, m=2, L_A=1)
    with pytest.raises(CheckpointError):
        encode_model(TransformerModel.init(cfg, seed=0), "nf4")
    assert math.prod((6, 6)) % 4 == 0
    encode_model(TransformerModel.init(cfg, seed=0), "nf4", block_size=2)
