"""Binary checkpoint container shared by every trained model.

Layout (little-endian)::

    magic        8 bytes, e.g. b"D2G-TCH1"
    header_len   u32
    header       UTF-8 JSON: {"meta": {...}, "manifest": [{"name", "shape"}...],
                              "weights_hash": hex sha256 of payload}
    payload      float32 tensors concatenated in manifest order

Writes go to a temp file in the target directory and are renamed into place.
"""

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np
import torch

from .errors import CorruptCheckpoint

TEACHER_MAGIC = b"D2G-TCH1"
CODEC_MAGIC = b"D2G-CDC1"
PERCEPTUAL_MAGIC = b"D2G-PCP1"
DISCRIMINATOR_MAGIC = b"D2G-DSC1"
GENERATOR_MAGIC = b"D2G-GEN1"


def flatten_state(state_dict):
    """Return (manifest, payload bytes) for a float state dict."""
    manifest, chunks = [], []
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        manifest.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    return manifest, b"".join(chunks)


def weights_digest(state_dict):
    """sha256 digest (32 bytes) of the float32 payload of ``state_dict``."""
    _, payload = flatten_state(state_dict)
    return hashlib.sha256(payload).digest()


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, magic, state_dict, meta=None):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest, payload = flatten_state(state_dict)
    header = {
        "meta": meta or {},
        "manifest": manifest,
        "weights_hash": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, magic + struct.pack("<I", len(hbytes)) + hbytes + payload)
    return header["weights_hash"]


def load(path, magic):
    """Read a container; returns (meta, state_dict, weights_hash_hex)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise
    if data[:8] != magic:
        raise CorruptCheckpoint(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 12:
        raise CorruptCheckpoint(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    payload = data[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["weights_hash"]:
        raise CorruptCheckpoint(f"{path}: payload hash mismatch")
    state = OrderedDict()
    offset = 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * n
    if offset != len(payload):
        raise CorruptCheckpoint(f"{path}: payload size does not match manifest")
    return header["meta"], state, header["weights_hash"]
