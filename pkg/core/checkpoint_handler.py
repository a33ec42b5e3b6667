"""
Model checkpoint file.

Layout (little-endian):
    bytes 0..7    magic b"NAFCKPT\\0"
    bytes 8..9    uint16 format version
    bytes 10..13  uint32 header length H
    next H bytes  UTF-8 JSON header {"kind", "spec", "seed", "arrays", "digest"}
    remainder     float64 payload, arrays concatenated in header order

"digest" is the SHA-256 hex of the payload.
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from core.data_handler import Normalizer
from core.model_handler import ModelSpecError, make_classifier, spec_from_dict, spec_to_dict
from core.utils import atomic_write_bytes, digest_hex

logger = logging.getLogger(__name__)

MAGIC = b"NAFCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHI")

NORMALIZER_MEANS = "normalizer.means"
NORMALIZER_STDS = "normalizer.stds"


class CheckpointError(ValueError):
    pass


def encode(kind: str, spec: dict, seed: int, arrays) -> bytes:
    """
    :param arrays: ordered iterable of (name, ndarray)
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {"kind": kind, "spec": spec, "seed": int(seed), "arrays": entries, "digest": digest_hex(payload)}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + payload


def decode(blob: bytes):
    """
    :return: (header dict, {name: ndarray})
    """
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError(f"file too short for a checkpoint ({len(blob)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("corrupt checkpoint header") from e
    payload = blob[start + header_len:]
    if len(payload) % 8:
        raise CheckpointError(f"payload length {len(payload)} is not a multiple of 8")
    if digest_hex(payload) != header.get("digest"):
        raise CheckpointError("payload digest mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for entry in header["arrays"]:
        lo, count = entry["offset"], entry["count"]
        if lo + count > flat.size:
            raise CheckpointError(f"array '{entry['name']}' runs past the payload")
        arrays[entry["name"]] = flat[lo:lo + count].reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def save(path, model, normalizer: Normalizer = None):
    arrays = list(model.params.snapshot().items())
    if normalizer is not None:
        arrays += [(NORMALIZER_MEANS, normalizer.means), (NORMALIZER_STDS, normalizer.stds)]
    blob = encode(model.kind, spec_to_dict(model.spec), model.seed, arrays)
    atomic_write_bytes(path, blob)
    logger.info("checkpoint %s: %d arrays, %d bytes", Path(path).name, len(arrays), len(blob))


def load(path):
    """
    :return: (classifier with restored parameters, Normalizer or None)
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    header, arrays = decode(blob)
    try:
        model = make_classifier(header["kind"], spec_from_dict(header["spec"]), header["seed"])
        model.params.load(arrays)
    except (ModelSpecError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    normalizer = None
    if NORMALIZER_MEANS in arrays:
        normalizer = Normalizer(means=arrays[NORMALIZER_MEANS], stds=arrays[NORMALIZER_STDS])
    return model, normalizer
