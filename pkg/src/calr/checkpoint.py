"""Binary model files.

Layout (little-endian, no padding)::

    b"CALR" | version u32 | u32 len + canonical JSON header | tensor count u32 |
    per tensor: u32 len + UTF-8 name, rows u32, cols u32, rows*cols float32

The JSON header holds the model config and the structural layout (which FFNs
and projections are compressed, with which ranks). Vectors are stored as
1 x n. A sparse corrective stores its boolean mask as an extra tensor named
``<param>.mask`` with 0/1 entries.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .compress import CompressedFfn, CorrectiveModule, FactorPair, LowRankLinear, SparseCorrective
from .exceptions import CheckpointError, MagicMismatchError, TruncatedTensorError, VersionMismatchError
from .model import Attention, GatedFfn, Linear, ModelConfig, TransformerBlock, TransformerModel

MAGIC = b"CALR"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def header_for(model: TransformerModel) -> dict:
    return {"config": model.config.to_dict(), "layout": model.layout()}


def model_tensors(model: TransformerModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in model.named_parameters().items():
        data = p.data if p.data.ndim == 2 else p.data.reshape(1, -1)
        out.append((name, data))
        if p.mask is not None:
            out.append((f"{name}.mask", p.mask.astype(np.float64)))
    return out


def encode_model(model: TransformerModel) -> bytes:
    header = canonical_json(header_for(model)).encode("utf-8")
    tensors = model_tensors(model)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(model: TransformerModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"file ends inside {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _corrective_from_layout(entry, d_in: int, d_out: int):
    if entry is None:
        return None
    if entry["kind"] == "dense":
        r = entry["rank"]
        return CorrectiveModule(np.zeros((d_in, r)), np.zeros((r, d_out)))
    if entry["kind"] == "sparse":
        return SparseCorrective(np.zeros((d_in, d_out)), np.ones((d_in, d_out), dtype=bool))
    raise CheckpointError(f"unknown corrective kind {entry['kind']!r}")


def _pair(m: int, r: int, n: int) -> FactorPair:
    return FactorPair(np.zeros((m, r)), np.zeros((r, n)))


def skeleton(config: ModelConfig, layout: dict) -> TransformerModel:
    """Zero-filled model with the structure described by ``layout``."""
    d, f = config.d_model, config.d_ff
    blocks = []
    if len(layout["blocks"]) != config.n_layers:
        raise CheckpointError("layout block count does not match config.n_layers")
    for entry in layout["blocks"]:
        projs = []
        for name in ("q", "k", "v", "o"):
            p = entry["attn"][name]
            if p["kind"] == "dense":
                projs.append(Linear(np.zeros((d, d))))
            elif p["kind"] == "low_rank":
                projs.append(LowRankLinear(_pair(d, p["rank"], d), _corrective_from_layout(p["corrective"], d, d)))
            else:
                raise CheckpointError(f"unknown projection kind {p['kind']!r}")
        fs = entry["ffn"]
        if fs["kind"] == "dense":
            ffn = GatedFfn(np.zeros((d, f)), np.zeros((d, f)), np.zeros((f, d)))
        elif fs["kind"] == "compressed":
            r = fs["rank"]
            ffn = CompressedFfn(
                _pair(d, r, f), _pair(d, r, f), _pair(f, r, d),
                _corrective_from_layout(fs["corrective"], d, d), fs["mode"],
            )
        else:
            raise CheckpointError(f"unknown FFN kind {fs['kind']!r}")
        blocks.append(TransformerBlock(np.zeros(d), Attention(*projs, config.n_heads), np.zeros(d), ffn))
    return TransformerModel(config, np.zeros((config.vocab_size, d)), blocks, np.zeros(d))


def decode_model(buf: bytes) -> TransformerModel:
    reader = _Reader(buf)
    magic = buf[:4]
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    reader.pos = 4
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(reader.take(reader.u32("header length"), "header").decode("utf-8"))
    model = skeleton(ModelConfig.from_dict(header["config"]), header["layout"])
    params = model.named_parameters()
    seen = set()
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("tensor name length"), "tensor name").decode("utf-8")
        rows = reader.u32(f"rows of {name}")
        cols = reader.u32(f"cols of {name}")
        nbytes = rows * cols * 4
        available = len(buf) - reader.pos
        if available < nbytes:
            raise TruncatedTensorError(name, nbytes, available)
        data = np.frombuffer(reader.take(nbytes, name), dtype="<f4").astype(np.float64).reshape(rows, cols)
        if name.endswith(".mask") and name[:-5] in params:
            target = params[name[:-5]]
            target.mask = data.astype(bool)
            target.data = np.where(target.mask, target.data, 0.0)
            seen.add(name)
            continue
        if name not in params:
            raise CheckpointError(f"unexpected tensor {name!r}")
        p = params[name]
        if data.size != p.data.size:
            raise CheckpointError(f"tensor {name!r} has {rows}x{cols} entries, expected shape {p.shape}")
        p.data = data.reshape(p.shape).copy()
        if p.mask is not None:
            p.data = np.where(p.mask, p.data, 0.0)
        seen.add(name)
    missing = [n for n in params if n not in seen]
    if missing:
        raise CheckpointError(f"missing tensors: {missing}")
    if reader.pos != len(buf):
        raise CheckpointError(f"{len(buf) - reader.pos} trailing bytes after last tensor")
    for block in model.blocks:
        corr = getattr(block.ffn, "corrective", None)
        if isinstance(corr, SparseCorrective):
            corr._mask_tensor.data = corr.mask.astype(np.float64)
    return model


def load_model(path) -> TransformerModel:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read model file {path}: {exc}") from exc
    return decode_model(buf)
