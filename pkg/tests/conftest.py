from __future__ import annotations

import json
import struct

import pytest


def encode_archive(header: dict, payload: bytes) -> bytes:
    """Hand-assemble archive bytes for format-level tests."""
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + payload


@pytest.fixture
def archive_file(tmp_path):
    """Write raw header+payload to a temp file and return its path."""

    def _write(header: dict, payload: bytes, name: str = "a.safetensors"):
        path = tmp_path / name
        path.write_bytes(encode_archive(header, payload))
        return path

    return _write
