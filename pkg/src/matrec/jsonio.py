"""Canonical JSON serialization and content digests.

All manifests, configs and reports go through these helpers so that the
same logical content always produces the same bytes (sorted keys, LF line
endings, trailing newline) and therefore the same digest.
"""

import hashlib
import json
from pathlib import Path


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_canonical_json(path, obj) -> str:
    """Write canonical JSON, return the sha256 hex digest of the bytes."""
    data = canonical_dumps(obj).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def digest_of(obj) -> str:
    """sha256 of the canonical serialization of a JSON-able object."""
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()


def file_sha256(path, chunk=1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def short_hash64(hex_digest: str) -> str:
    """64-bit truncation of a hex digest, used as a compact drift check."""
    return hex_digest[:16]
