"""Shared binary/JSON file format helpers and error types.

All on-disk payloads are little-endian float32 blobs with a JSON or fixed
binary header; readers fail with a distinct error per failure mode so
callers can tell corruption kinds apart.
"""

from __future__ import annotations

import json
from pathlib import Path

# Refuse headers that would allocate more than this many f32 elements.
MAX_ELEMENTS = 1 << 28


class FormatError(ValueError):
    """Base class for on-disk format violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic / format tag."""


class TruncatedPayloadError(FormatError):
    """Payload ends before the header-declared size."""


class DimensionOverflowError(FormatError):
    """Header declares dimensions beyond the supported size."""


def read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"truncated payload: expected {n} bytes of {what}, got {len(data)}")
    return data


def check_element_count(n: int, what: str) -> None:
    if n > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dimension overflow: {what} declares {n} elements (limit {MAX_ELEMENTS})")


def load_json(path: Path, expected_format: str) -> dict:
    """Load a JSON sidecar/manifest and verify its format tag."""
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise BadMagicError(f"bad magic: {path} is not valid JSON ({e})") from e
    if not isinstance(manifest, dict) or manifest.get("format") != expected_format:
        raise BadMagicError(f"bad magic: {path} format tag {manifest.get('format')!r} != {expected_format!r}")
    return manifest


def dump_json(path: Path, manifest: dict) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
