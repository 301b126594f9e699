"""Provenance headers and content digests for pipeline artifacts.

Every file a pipeline stage writes begins with a comment header recording
the tool version, the stage, the effective configuration, the master seed
and the SHA-256 digests of the stage's inputs. Reruns with identical
inputs, configuration and seed (single-threaded) produce byte-identical
files, so the header is sufficient to reproduce the artifact exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__

COMMENT = "#"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def build_header(stage: str, config: dict | None = None, inputs: dict | None = None,
                 seed: int | None = None) -> list[str]:
    """Build provenance header lines (without trailing newlines).

    Keys are emitted in sorted order so the header is deterministic.
    """
    lines = [f"{COMMENT} fieldflow={__version__}", f"{COMMENT} stage={stage}"]
    if seed is not None:
        lines.append(f"{COMMENT} seed={seed}")
    for key in sorted(config or {}):
        lines.append(f"{COMMENT} config.{key}={(config or {})[key]}")
    for name in sorted(inputs or {}):
        lines.append(f"{COMMENT} input.{name}={(inputs or {})[name]}")
    return lines


def parse_header(path: str | Path) -> dict[str, str]:
    """Read the leading comment header of a file into a flat dict."""
    fields: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith(COMMENT):
                break
            body = line[len(COMMENT):].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                fields[key] = value
    return fields


def header_json(stage: str, config: dict | None = None, inputs: dict | None = None,
                seed: int | None = None) -> dict:
    """Provenance as a JSON-ready dict (for NDJSON and binary artifacts)."""
    return {
        "fieldflow": __version__,
        "stage": stage,
        "seed": seed,
        "config": dict(sorted((config or {}).items())),
        "inputs": dict(sorted((inputs or {}).items())),
    }


def dumps_canonical(obj) -> str:
    """Deterministic JSON encoding (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
