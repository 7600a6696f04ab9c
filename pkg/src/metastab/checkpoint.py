"""Single-file checkpoint container and a content-addressed checkpoint store.

File layout::

    b"MSTB" | u8 format version | u64 little-endian header length | JSON header | payload

The JSON header carries ``version``, ``arch``, ``input_norm``, ``seed``, a
free-form ``meta`` object, the tensor table (name, dtype, shape, offset,
nbytes) and the SHA-256 of the payload. Tensors are stored as raw
little-endian bytes in sorted-name order, so identical state always yields
identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MSTB"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, missing or corrupted checkpoints."""


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(state: dict, arch: str, meta: dict | None = None, seed: int | None = None,
           input_norm: str | None = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name]))
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "arch": arch,
        "input_norm": input_norm,
        "seed": seed,
        "meta": meta or {},
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = _canonical(header)
    return MAGIC + struct.pack("<BQ", FORMAT_VERSION, len(hb)) + hb + payload


def decode(blob: bytes) -> tuple[dict, dict]:
    """Return ``(header, state)``; raises :class:`CheckpointError` on any inconsistency."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack("<BQ", blob[4:13])
        header = json.loads(blob[13 : 13 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    payload = blob[13 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload hash mismatch (file corrupted)")
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, state


def atomic_write(path, data: bytes) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save(path, state: dict, arch: str, **kwargs) -> Path:
    return atomic_write(path, encode(state, arch, **kwargs))


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


class CheckpointStore:
    """Directory of checkpoints addressed by the hash of payload plus config.

    ``put`` returns a short id; storing the same snapshot and config twice
    yields the same id and a single file.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, ckpt_id: str) -> Path:
        return self.root / f"{ckpt_id}.ckpt"

    @staticmethod
    def content_id(state: dict, meta: dict | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(state):
            arr = np.ascontiguousarray(np.asarray(state[name]))
            h.update(name.encode())
            h.update(arr.dtype.str.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        h.update(_canonical(meta or {}))
        return h.hexdigest()[:16]

    def put(self, state: dict, meta: dict | None = None, arch: str = "snapshot") -> str:
        state = {k: np.asarray(getattr(v, "detach", lambda: v)()) for k, v in state.items()}
        ckpt_id = self.content_id(state, meta)
        path = self._path(ckpt_id)
        if not path.exists():
            save(path, state, arch, meta={"config": meta or {}, "id": ckpt_id})
        return ckpt_id

    def get(self, ckpt_id: str) -> dict:
        path = self._path(ckpt_id)
        if not path.exists():
            raise CheckpointError(f"no checkpoint with id {ckpt_id!r}")
        header, state = load(path)
        if self.content_id(state, header["meta"].get("config")) != ckpt_id:
            raise CheckpointError(f"checkpoint {ckpt_id} does not match its id (corrupted)")
        return state

    def __contains__(self, ckpt_id: str) -> bool:
        return self._path(ckpt_id).exists()
