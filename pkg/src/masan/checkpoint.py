"""Checkpoint container: a JSON directory followed by MVL1 tensor records.

Layout::

    b"MCK1" | u32 header length | header (UTF-8 JSON) | MVL1 record per entry

The header lists every entry's name, kind (``param``, ``adam.m``,
``adam.v``) and shape in record order, plus the Adam step count, the
experiment config text and its fingerprint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_text
from .data import VolumeFormatError, decode_volume, encode_volume
from .optim import AdamState

CHECKPOINT_MAGIC = b"MCK1"


class CheckpointError(VolumeFormatError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def entries(self) -> list[tuple[str, str, np.ndarray]]:
        out = [("param", k, v) for k, v in self.params.items()]
        out += [("adam.m", k, v) for k, v in self.adam.m.items()]
        out += [("adam.v", k, v) for k, v in self.adam.v.items()]
        return out


def encode_checkpoint(ck: Checkpoint) -> bytes:
    entries = ck.entries()
    header = {
        "fingerprint": ck.fingerprint,
        "config": ck.config.to_text(),
        "adam_t": ck.adam.t,
        "entries": [{"kind": kind, "name": name, "shape": list(arr.shape)} for kind, name, arr in entries],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(encode_volume(arr) for _, _, arr in entries)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    config = config_from_text(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError("config text does not match its recorded fingerprint")
    ck = Checkpoint(config, {}, AdamState(t=int(header["adam_t"])))
    pos = 8 + n
    slots = {"param": ck.params, "adam.m": ck.adam.m, "adam.v": ck.adam.v}
    for entry in header["entries"]:
        arr, pos = decode_volume(buf, pos)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{entry['name']}: record shape {arr.shape} != directory {entry['shape']}")
        slots[entry["kind"]][entry["name"]] = arr
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last record")
    return ck


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
