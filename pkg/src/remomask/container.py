"""On-disk container: magic + length-prefixed JSON header + tensor blobs + CRC32.

All checkpoint-like files (.rmc corpus, .rmr retriever, .rmi index, .rmq
codec, .rmm/.rms transformers, .rmo motions) share this layout; only the
magic differs. The header JSON is canonical (sorted keys) so identical
state always serializes to identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib

import numpy as np

from .autodiff import read_tensor_blob, write_tensor_blob

MAGICS = {
    "corpus": b"RMCORP1",
    "retriever": b"RMRETR1",
    "index": b"RMINDX1",
    "codec": b"RMCODC1",
    "masked": b"RMMASK1",
    "residual": b"RMRESD1",
    "motion": b"RMMOTN1",
    "tokens": b"RMTOKN1",
}


class ContainerError(ValueError):
    """Raised on bad magic, version mismatch, truncation, or checksum failure."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def save_container(path, kind: str, header: dict, blobs: dict | None = None):
    """Write header + named float64 blobs; blob order follows the manifest."""
    blobs = blobs or {}
    names = sorted(blobs)
    header = dict(header)
    header["blob_names"] = names
    buf = io.BytesIO()
    buf.write(MAGICS[kind])
    hj = canonical_json(header).encode()
    buf.write(struct.pack("<Q", len(hj)))
    buf.write(hj)
    for name in names:
        write_tensor_blob(buf, np.asarray(blobs[name], dtype=np.float64))
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_container(path, kind: str):
    """Read and verify a container; returns (header, blobs)."""
    magic = MAGICS[kind]
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 12:
        raise ContainerError(f"{path}: file truncated")
    payload, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ContainerError(f"{path}: checksum mismatch (corrupt or truncated file)")
    if payload[: len(magic)] != magic:
        raise ContainerError(f"{path}: bad magic {payload[:len(magic)]!r}, expected {magic!r}")
    fh = io.BytesIO(payload[len(magic):])
    (hlen,) = struct.unpack("<Q", fh.read(8))
    try:
        header = json.loads(fh.read(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}") from None
    blobs = {}
    for name in header.get("blob_names", []):
        try:
            blobs[name] = read_tensor_blob(fh)
        except ValueError as e:
            raise ContainerError(f"{path}: blob '{name}': {e}") from None
    return header, blobs


def rng_state(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {"state": str(st["state"]["state"]), "inc": str(st["state"]["inc"])},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": {"state": int(state["state"]["state"]), "inc": int(state["state"]["inc"])},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return gen
