"""Shared file-format helpers: atomic writes, canonical JSON, config hashing.

Every artifact the pipeline emits goes through these helpers so that two
runs with the same seed produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from .errors import ParseError


def canonical_json(obj) -> str:
    """Serialize ``obj`` deterministically (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, indent=2)


def config_digest(config: dict) -> str:
    """SHA-256 hex digest of a config dict, independent of key order.

    Paths and other run-local values must be stripped by the caller before
    hashing; only semantically meaningful settings belong in the hash.
    """
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file + rename in the same dir."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, canonical_json(obj) + "\n")


def read_json(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"missing file: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in {path}: {exc}") from exc


def fmt_float(x: float) -> str:
    """Shortest decimal representation that round-trips to the same float."""
    return repr(float(x))


def provenance_comment(provenance: dict) -> str:
    """One-line ``#`` comment embedding seed/config-hash into a CSV artifact."""
    parts = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
    return f"# {parts}\n"


def read_csv_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV artifact, skipping leading ``#`` provenance comments."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"missing file: {path}")
    header: list[str] | None = None
    rows: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    if header is None:
        raise ParseError(f"empty CSV: {path}")
    return header, rows
