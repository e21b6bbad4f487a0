"""Checkpoint container: named, individually checksummed binary blocks.

Layout (little endian):

    magic "PPCK" | u32 version | u32 block count
    per block: u16 name length | name utf8 | u8 kind | payload length u64
               | payload | u32 crc32(payload)

Kinds: 0 = float32 tensor (payload is a small JSON shape header + raw
values), 1 = opaque bytes (the prototype bank in its own format), 2 = JSON.
Parameters are float64 in memory and stored as float32; loading restores
float64 arrays (with the float32 rounding applied, which is the contract:
a save/load round trip is idempotent).
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .protobank import PrototypeBank, bank_from_bytes, bank_to_bytes
from .skeletons import SkeletonRegistry
from .util import canonical_json, config_hash

MAGIC = b"PPCK"
VERSION = 1

KIND_TENSOR = 0
KIND_BYTES = 1
KIND_JSON = 2


def _tensor_payload(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    head = json.dumps({"shape": list(a.shape)}).encode("utf-8")
    return struct.pack("<I", len(head)) + head + a.tobytes()


def _tensor_from_payload(payload: bytes) -> np.ndarray:
    (hlen,) = struct.unpack_from("<I", payload, 0)
    head = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
    shape = tuple(int(s) for s in head["shape"])
    count = int(np.prod(shape)) if shape else 1
    vals = np.frombuffer(payload, dtype="<f4", count=count, offset=4 + hlen)
    return vals.reshape(shape).astype(np.float64)


def _write_block(buf: io.BytesIO, name: str, kind: int, payload: bytes) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", kind))
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def _read_block(data: bytes, pos: int) -> tuple[str, int, bytes, int]:
    (nlen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    name = data[pos : pos + nlen].decode("utf-8")
    pos += nlen
    (kind,) = struct.unpack_from("<B", data, pos)
    pos += 1
    (plen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    payload = data[pos : pos + plen]
    if len(payload) != plen:
        raise CheckpointError(f"truncated block {name!r}")
    pos += plen
    (crc,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"checksum mismatch in block {name!r}")
    return name, kind, payload, pos


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    bank: PrototypeBank
    registry: SkeletonRegistry
    config_text: str
    config_hash: str
    feature_channels: int
    meta: dict

    @property
    def config(self) -> dict:
        return json.loads(self.config_text)


def checkpoint_to_bytes(
    params: dict[str, np.ndarray],
    bank: PrototypeBank,
    registry: SkeletonRegistry,
    config_text: str,
    feature_channels: int,
    extra_meta: dict | None = None,
) -> bytes:
    meta = {
        "version": VERSION,
        "config": config_text,
        "config_hash": config_hash(config_text),
        "registry": registry.to_dict(),
        "feature_channels": int(feature_channels),
        "param_names": sorted(params),
    }
    if extra_meta:
        meta.update(extra_meta)
    buf = io.BytesIO()
    blocks: list[tuple[str, int, bytes]] = [
        ("meta", KIND_JSON, canonical_json(meta).encode("utf-8")),
        ("bank", KIND_BYTES, bank_to_bytes(bank)),
    ]
    for name in sorted(params):
        blocks.append((f"param.{name}", KIND_TENSOR, _tensor_payload(params[name])))
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blocks)))
    for name, kind, payload in blocks:
        _write_block(buf, name, kind, payload)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes, allow_hash_mismatch: bool = False) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, nblocks = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    blocks: dict[str, tuple[int, bytes]] = {}
    for _ in range(nblocks):
        name, kind, payload, pos = _read_block(data, pos)
        blocks[name] = (kind, payload)
    if "meta" not in blocks or "bank" not in blocks:
        raise CheckpointError("checkpoint missing required blocks")
    meta = json.loads(blocks["meta"][1].decode("utf-8"))
    stored = meta.get("config_hash", "")
    actual = config_hash(meta.get("config", ""))
    if stored != actual and not allow_hash_mismatch:
        raise CheckpointError(
            f"config hash mismatch: stored {stored}, recomputed {actual}"
        )
    params: dict[str, np.ndarray] = {}
    for name, (kind, payload) in blocks.items():
        if name.startswith("param."):
            if kind != KIND_TENSOR:
                raise CheckpointError(f"block {name!r} has wrong kind {kind}")
            params[name[len("param.") :]] = _tensor_from_payload(payload)
    expected = set(meta.get("param_names", []))
    if expected and expected != set(params):
        raise CheckpointError("parameter blocks do not match the manifest")
    return Checkpoint(
        params=params,
        bank=bank_from_bytes(blocks["bank"][1]),
        registry=SkeletonRegistry.from_dict(meta["registry"]),
        config_text=meta.get("config", ""),
        config_hash=stored,
        feature_channels=int(meta.get("feature_channels", 0)),
        meta=meta,
    )


def save_checkpoint(path, params, bank, registry, config_text, feature_channels,
                    extra_meta: dict | None = None) -> None:
    data = checkpoint_to_bytes(params, bank, registry, config_text,
                               feature_channels, extra_meta)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, allow_hash_mismatch: bool = False) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data, allow_hash_mismatch=allow_hash_mismatch)
