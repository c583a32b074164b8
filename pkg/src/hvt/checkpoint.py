"""Binary checkpoints (HVTC).

Layout, all integers little-endian::

    "HVTC"                       magic
    u16   version (= 1)
    u32   config length, then UTF-8 ``key = value`` text
    u32   tensor count, then per tensor:
            u32 name length, UTF-8 name
            u32 rank, rank x u32 extents
            f64 payload, row-major
    u8    optimizer flag; when 1:
            u64 step, 5 x f64 (lr, beta1, beta2, eps, weight_decay)
            u32 moment count, moments encoded like tensors ("m.<param>", "v.<param>")

The config text carries the model config plus ``epoch`` and ``rng_state``
(single-line JSON); any other keys round-trip through ``Checkpoint.meta``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import MODEL_KEYS, ModelConfig, ConfigError, format_config_text, parse_config_text
from .model import parameter_shapes
from .optim import OptimState

MAGIC = b"HVTC"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optim: Optional[OptimState] = None
    rng_state: Optional[dict] = None
    epoch: int = 0
    meta: dict[str, str] = field(default_factory=dict)


def _pack_tensor(out: list, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out.append(struct.pack("<I", len(raw)) + raw)
    out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    values = {k: str(v) for k, v in ckpt.config.to_dict().items()}
    values["epoch"] = str(ckpt.epoch)
    if ckpt.rng_state is not None:
        values["rng_state"] = json.dumps(ckpt.rng_state, separators=(",", ":"), sort_keys=True)
    for k, v in ckpt.meta.items():
        if k in values:
            raise CheckpointError(f"meta key {k!r} collides with a reserved key")
        values[k] = v
    text = format_config_text(values).encode("utf-8")
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(text)), text,
           struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        _pack_tensor(out, name, arr)
    opt = ckpt.optim
    if opt is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        out.append(struct.pack("<Q5d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps,
                               opt.weight_decay))
        moments = [(f"m.{k}", a) for k, a in opt.m.items()] + [(f"v.{k}", a) for k, a in opt.v.items()]
        out.append(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _pack_tensor(out, name, arr)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("I")
        name = self.take(n).decode("utf-8")
        (rank,) = self.unpack("I")
        shape = self.unpack(f"{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 and MAGIC.startswith(bytes(buf)):
        raise TruncatedFileError(f"file ends inside the magic ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not an HVTC checkpoint (magic {buf[:4]!r})")
    r.take(4)
    (version,) = r.unpack("H")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    (n,) = r.unpack("I")
    values = parse_config_text(r.take(n).decode("utf-8"))
    try:
        config = ModelConfig.from_mapping({k: v for k, v in values.items() if k in MODEL_KEYS})
    except ConfigError as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from exc
    epoch = int(values.get("epoch", 0))
    rng = json.loads(values["rng_state"]) if "rng_state" in values else None
    meta = {k: v for k, v in values.items() if k not in MODEL_KEYS and k not in ("epoch", "rng_state")}

    expected = parameter_shapes(config)
    (count,) = r.unpack("I")
    params = {}
    for _ in range(count):
        name, arr = r.tensor()
        if name not in expected:
            raise ShapeMismatchError(f"unexpected tensor {name!r} for this config")
        if arr.shape != expected[name]:
            raise ShapeMismatchError(f"{name}: stored {arr.shape}, config implies {expected[name]}")
        params[name] = arr
    if set(params) != set(expected):
        raise ShapeMismatchError(f"missing tensors {sorted(set(expected) - set(params))}")

    (flag,) = r.unpack("B")
    optim = None
    if flag:
        step, lr, b1, b2, eps, wd = r.unpack("Q5d")
        optim = OptimState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=step)
        (count,) = r.unpack("I")
        for _ in range(count):
            name, arr = r.tensor()
            kind, _, pname = name.partition(".")
            if kind not in ("m", "v") or pname not in expected:
                raise ShapeMismatchError(f"unexpected optimizer tensor {name!r}")
            if arr.shape != expected[pname]:
                raise ShapeMismatchError(f"{name}: stored {arr.shape}, expected {expected[pname]}")
            (optim.m if kind == "m" else optim.v)[pname] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, optim, rng, epoch, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
