"""Checkpoint file format: length-prefixed JSON header plus raw float32 blobs.

Layout: 8-byte little-endian unsigned header length, the UTF-8 JSON header,
then the payload.  The header carries the model config and a tensor directory
mapping each parameter name to shape, dtype and payload offset.  Offsets must
be non-overlapping and in-bounds, and the directory must name every parameter
of the architecture exactly once; save -> load round-trips bit-identically.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from tinyquant.model import (
    AttentionParams,
    MlpParams,
    Model,
    ModelConfig,
    ModelError,
    TransformerBlockParams,
    param_items,
)

FORMAT_NAME = "tinyquant-checkpoint"
FORMAT_VERSION = 1
_DTYPE = "<f4"


class MalformedCheckpointError(ModelError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file and rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def checkpoint_bytes(model: Model) -> bytes:
    items = param_items(model)
    directory = {}
    offset = 0
    blobs = []
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blob = arr.astype(_DTYPE).tobytes()
        directory[name] = {
            "shape": list(arr.shape),
            "dtype": _DTYPE,
            "offset": offset,
        }
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)


def save_checkpoint(model: Model, path: str | Path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def _expected_names(n_blocks: int) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(n_blocks):
        p = f"blocks.{i}."
        names += [p + s for s in (
            "ln1.gamma", "ln1.beta",
            "attn.wq", "attn.bq", "attn.wk", "attn.bk",
            "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "ln2.gamma", "ln2.beta",
            "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        )]
    names += ["ln_f.gamma", "ln_f.beta", "head.weight", "head.bias"]
    return names


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MalformedCheckpointError("file too short for header length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise MalformedCheckpointError("header length exceeds file size")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpointError(f"header is not valid JSON: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise MalformedCheckpointError(
            f"unrecognized format tag {header.get('format')!r}")
    try:
        config = ModelConfig(**header["config"])
        directory = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise MalformedCheckpointError(f"header missing field: {exc}") from exc

    expected = _expected_names(config.n_blocks)
    missing = [n for n in expected if n not in directory]
    if missing:
        raise MalformedCheckpointError(f"missing tensor {missing[0]!r}")
    extra = [n for n in directory if n not in expected]
    if extra:
        raise MalformedCheckpointError(f"unexpected tensor {extra[0]!r}")

    payload = raw[8 + header_len:]
    spans = []
    for name in expected:
        entry = directory[name]
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedCheckpointError(
                f"bad directory entry for {name!r}: {exc}") from exc
        if dtype != _DTYPE:
            raise MalformedCheckpointError(f"tensor {name!r} has dtype {dtype!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise MalformedCheckpointError(
                f"tensor {name!r} is truncated or out of bounds")
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise MalformedCheckpointError(
                f"tensors {n0!r} and {n1!r} have overlapping offsets")

    def tensor(name, *want_shape_of):
        entry = directory[name]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE)
        return arr.reshape(shape).astype(np.float32)

    def check_shape(name, arr, expected_shape):
        if expected_shape is not None and arr.shape != expected_shape:
            raise MalformedCheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {expected_shape}"
            )
        return arr

    d, v = config.d_model, config.vocab_size
    tok = check_shape("tok_emb", tensor("tok_emb"), (v, d))
    pos = check_shape("pos_emb", tensor("pos_emb"), (config.max_seq_len, d))
    blocks = []
    for i in range(config.n_blocks):
        p = f"blocks.{i}."
        w1 = tensor(p + "mlp.w1")
        if w1.ndim != 2 or w1.shape[1] != d or w1.shape[0] < 1:
            raise MalformedCheckpointError(
                f"tensor {p + 'mlp.w1'!r} has shape {w1.shape}")
        dff = w1.shape[0]  # per-block width: channel pruning shrinks it
        blocks.append(TransformerBlockParams(
            ln1_gamma=check_shape(p + "ln1.gamma", tensor(p + "ln1.gamma"), (d,)),
            ln1_beta=check_shape(p + "ln1.beta", tensor(p + "ln1.beta"), (d,)),
            attn=AttentionParams(
                wq=check_shape(p + "attn.wq", tensor(p + "attn.wq"), (d, d)),
                bq=check_shape(p + "attn.bq", tensor(p + "attn.bq"), (d,)),
                wk=check_shape(p + "attn.wk", tensor(p + "attn.wk"), (d, d)),
                bk=check_shape(p + "attn.bk", tensor(p + "attn.bk"), (d,)),
                wv=check_shape(p + "attn.wv", tensor(p + "attn.wv"), (d, d)),
                bv=check_shape(p + "attn.bv", tensor(p + "attn.bv"), (d,)),
                wo=check_shape(p + "attn.wo", tensor(p + "attn.wo"), (d, d)),
                bo=check_shape(p + "attn.bo", tensor(p + "attn.bo"), (d,)),
            ),
            ln2_gamma=check_shape(p + "ln2.gamma", tensor(p + "ln2.gamma"), (d,)),
            ln2_beta=check_shape(p + "ln2.beta", tensor(p + "ln2.beta"), (d,)),
            mlp=MlpParams(
                w1=w1,
                b1=check_shape(p + "mlp.b1", tensor(p + "mlp.b1"), (dff,)),
                w2=check_shape(p + "mlp.w2", tensor(p + "mlp.w2"), (d, dff)),
                b2=check_shape(p + "mlp.b2", tensor(p + "mlp.b2"), (d,)),
            ),
        ))
    return Model(
        config=config,
        tok_emb=tok,
        pos_emb=pos,
        blocks=blocks,
        ln_f_gamma=check_shape("ln_f.gamma", tensor("ln_f.gamma"), (d,)),
        ln_f_beta=check_shape("ln_f.beta", tensor("ln_f.beta"), (d,)),
        w_head=check_shape("head.weight", tensor("head.weight"), (v, d)),
        b_head=check_shape("head.bias", tensor("head.bias"), (v,)),
    )
