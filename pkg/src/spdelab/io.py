"""Small persistence helpers shared by the solvers and the runner."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """JSON with sorted keys and fixed separators; identical input gives identical bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default, allow_nan=True)


def stable_hash(obj) -> str:
    """sha256 of :func:`canonical_json`, so it is stable under key reordering."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n", encoding="utf-8")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
