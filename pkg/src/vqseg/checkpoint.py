"""VQSG checkpoint container.

Layout (all little-endian)::

    magic "VQSG" | u16 version | u16 reserved | u32 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    per tensor: u16 name_len | name | u8 dtype | u8 rank | u32 dims[rank] | payload

Payloads are 32-bit: dtype 0 = float32, 1 = int32, 2 = uint32.  The JSON
block carries the model and optimiser configs; everything numeric
(weights, codebook, Adam moments, step, epoch, RNG state) is a tensor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .segnet import Adam, AdamConfig, ModelConfig, SegNet, build_model, config_dict, config_from_dict

MAGIC = b"VQSG"
VERSION = 1
_HEAD = struct.Struct("<4sHHI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<u4")}
_CODES = {v: k for k, v in _DTYPES.items()}


def encode_tensors(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = [_HEAD.pack(MAGIC, VERSION, 0, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_tensors(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _HEAD.size:
        raise FormatError("checkpoint truncated before header")
    magic, version, _, meta_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = _HEAD.size
    try:
        meta = json.loads(raw[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode()
            pos += nlen
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64))
            if pos + n * 4 > len(raw):
                raise FormatError(f"tensor {name!r} payload truncated")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=n, offset=pos).reshape(dims).copy()
            pos += n * 4
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after tensor table")
    return meta, tensors


# ---------------------------------------------------------------- RNG state
def _u128_words(value: int) -> list[int]:
    return [(value >> (32 * i)) & 0xFFFFFFFF for i in range(4)]


def _words_u128(words) -> int:
    return sum(int(w) << (32 * i) for i, w in enumerate(words))


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise FormatError(f"only PCG64 generators can be checkpointed, got {st['bit_generator']}")
    words = _u128_words(st["state"]["state"]) + _u128_words(st["state"]["inc"])
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint32)


def rng_from_array(words: np.ndarray) -> np.random.Generator:
    if words.shape != (10,):
        raise FormatError(f"RNG state must have 10 words, got shape {words.shape}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": _words_u128(words[:4]), "inc": _words_u128(words[4:8])},
        "has_uint32": int(words[8]),
        "uinteger": int(words[9]),
    }
    return np.random.Generator(bg)


# ---------------------------------------------------------------- model state
@dataclass
class Checkpoint:
    model: SegNet
    optimiser: Adam
    epoch: int = 0
    rng: np.random.Generator | None = None
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(model: SegNet, optimiser: Adam | None = None, epoch: int = 0,
                     rng: np.random.Generator | None = None, extra: dict | None = None) -> bytes:
    optimiser = optimiser if optimiser is not None else Adam(model.parameters(), AdamConfig())
    meta = {"model": config_dict(model.config), "optimiser": config_dict(optimiser.config), "extra": extra or {}}
    tensors: dict[str, np.ndarray] = {}
    params = model.parameters()
    for name, p in params.items():
        tensors[f"param/{name}"] = p.data.astype(np.float32)
    for name in params:
        tensors[f"adam.m/{name}"] = optimiser.m[name].astype(np.float32)
        tensors[f"adam.v/{name}"] = optimiser.v[name].astype(np.float32)
    tensors["adam.step"] = np.array([optimiser.step_count], dtype=np.int32)
    tensors["epoch"] = np.array([epoch], dtype=np.int32)
    if rng is not None:
        tensors["rng"] = rng_to_array(rng)
    return encode_tensors(meta, tensors)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    meta, tensors = decode_tensors(raw)
    try:
        model = build_model(config_from_dict(ModelConfig, meta["model"]))
        opt_cfg = config_from_dict(AdamConfig, meta["optimiser"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata incomplete: {exc}") from exc
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise FormatError(f"tensor {key!r} has shape {tensors[key].shape}, model expects {p.data.shape}")
        p.data = tensors[key].astype(np.float32)
    opt = Adam(params, opt_cfg)
    for name in params:
        opt.m[name] = tensors[f"adam.m/{name}"].astype(np.float32)
        opt.v[name] = tensors[f"adam.v/{name}"].astype(np.float32)
    opt.step_count = int(tensors["adam.step"][0])
    rng = rng_from_array(tensors["rng"]) if "rng" in tensors else None
    return Checkpoint(model, opt, int(tensors["epoch"][0]), rng, meta.get("extra", {}))


def save_checkpoint(path: Path | str, model: SegNet, optimiser: Adam | None = None, epoch: int = 0,
                    rng: np.random.Generator | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, optimiser, epoch, rng, extra))
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
