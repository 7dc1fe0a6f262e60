"""Small shared helpers: seed derivation, canonical JSON, PGM output."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def derive_seed(base: int, label: str) -> int:
    """Derive a sub-seed from a base seed and a purpose label.

    Stable across runs and platforms (sha256-based), so distinct consumers
    (data generation, weight init, shuffling, ...) never share an RNG stream
    even when the user supplies a single experiment seed.
    """
    digest = hashlib.sha256(f"{base}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def canonical_json(obj) -> str:
    """Serialize to JSON with a byte-stable encoding (sorted keys, no spaces)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_canonical_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="ascii")


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D uint image as plain-text PGM (P2), bytes stable across runs."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {img.shape}")
    img = np.clip(np.rint(img), 0, maxval).astype(np.int64)
    rows, cols = img.shape
    lines = [f"P2", f"{cols} {rows}", f"{maxval}"]
    for r in range(rows):
        lines.append(" ".join(str(v) for v in img[r]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
