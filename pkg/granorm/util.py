"""Utility helpers for the granorm project."""

from __future__ import annotations

import hashlib
import json
import os
import pathlib
from typing import Any

SEED_BITS = 32


def safe_json_dump(data: object, path: os.PathLike[str] | str, *, indent: int = 2) -> None:
    """Write *data* to *path* in JSON format creating parents as required.

    Keys are sorted so that writing the same document twice produces the same
    bytes.
    """

    target = pathlib.Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        json.dump(data, fh, ensure_ascii=False, indent=indent, sort_keys=True)
        fh.write("\n")


def load_json(path: os.PathLike[str] | str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def canonical_json(data: object) -> str:
    """Return a compact, key-sorted JSON rendering of *data*."""

    return json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    """Return the hexadecimal SHA-256 digest of *text*."""

    digest = hashlib.sha256()
    digest.update(text.encode("utf-8"))
    return digest.hexdigest()


def derive_seed(root_seed: int, stage: str) -> int:
    """Expand *root_seed* into an independent 32-bit seed for *stage*."""

    digest = sha256_text(f"{int(root_seed)}/{stage}")
    return int(digest[:16], 16) % (1 << SEED_BITS)
