import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives import hashes

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "NEUROAFFECT_DATA_DIR"


def digest_hex(data: bytes) -> str:
    """SHA-256 of raw bytes as a lowercase hex string."""
    h = hashes.Hash(hashes.SHA256())
    h.update(data)
    return h.finalize().hex()


def digest_arrays(*arrays) -> str:
    """
    Fingerprint a sequence of integer/float arrays.

    Shape and dtype are folded in so [1, 2] + [3] and [1] + [2, 3] differ.
    """
    h = hashes.Hash(hashes.SHA256())
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(f"{arr.dtype.str}{arr.shape}".encode("utf-8"))
        h.update(arr.tobytes())
    return h.finalize().hex()


def derive_seeds(seed: int, n: int) -> list:
    """Independent child seeds for n jobs, stable for a given parent seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            try:
                os.remove(tmp)
            except OSError as e:
                logger.warning("could not remove temp file %s: %s", tmp, e)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


@contextmanager
def staged_output_dir(out_dir):
    """
    Build a run directory next to its final location and move it in place
    only when the block finishes without error.

    :param out_dir: final directory; replaced if it already exists
    :return: the staging path to write into
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield staging
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(staging, out_dir)
        logger.info("wrote %s", out_dir)
    finally:
        # staging is gone after a successful move; this only fires on failure
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)


def resolve_data_path(path) -> Path:
    """
    Locate a dataset file. Paths that do not exist as given are looked up
    under $NEUROAFFECT_DATA_DIR.
    """
    candidate = Path(path)
    if candidate.exists() or candidate.is_absolute():
        return candidate
    root = os.environ.get(DATA_DIR_ENV)
    if root:
        rooted = Path(root) / candidate
        if rooted.exists():
            return rooted
    return candidate
