"""Checkpoint files: a JSON metadata header followed by a binary blob.

Layout: 4-byte magic, 4-byte big-endian header length, UTF-8 JSON
header, then the torch-serialized parameter payload. The header always
carries a format-version integer plus whatever metadata the producing
stage records (config, training-step count, signature).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Any, Iterable

import torch
import torch.nn as nn

from .errors import CheckpointError

MAGIC = b"FPCK"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, header: dict[str, Any], state_dict: dict) -> None:
    """Write a header + payload checkpoint; overwrites an existing file."""
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict]:
    """Read back (header, state_dict); validates magic and version."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack(">I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        state_dict = torch.load(io.BytesIO(fh.read()), weights_only=True)
    return header, state_dict


def read_header(path: str | Path) -> dict[str, Any]:
    """Read only the metadata header (cheap existence/signature checks)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (hlen,) = struct.unpack(">I", fh.read(4))
        return json.loads(fh.read(hlen).decode("utf-8"))


def file_digest(path: str | Path) -> str:
    """sha256 of the whole checkpoint file; the provenance hash."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parameter_digest(modules: Iterable[object]) -> str:
    """sha256 over the parameters of every torch module in `modules`.

    Non-module entries are skipped; used to assert that frozen
    components are bit-identical across training.
    """
    h = hashlib.sha256()
    for module in modules:
        if isinstance(module, nn.Module):
            for name, tensor in sorted(module.state_dict().items()):
                h.update(name.encode())
                h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def config_signature(payload: dict[str, Any]) -> str:
    """Stable hash of a config dict, for resumability checks."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
