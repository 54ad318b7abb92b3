"""Small shared helpers: keyed RNG streams, JSONL files, atomic appends."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def stable_hash(*parts: Any) -> int:
    """64-bit hash of ``parts`` that is stable across processes and platforms."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def keyed_rng(seed: int, *keys: Any) -> np.random.Generator:
    """RNG whose stream depends only on ``seed`` and ``keys``, never on call order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, stable_hash(*keys)])


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps(obj: Any) -> str:
    """Canonical one-line JSON (sorted keys, no spaces) used by every artifact."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: str | os.PathLike, rows: Iterable[Any]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, Any]]:
    """Yield ``(line_number, obj)``; a torn final line (no newline) is skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                break
            if not line.strip():
                continue
            yield lineno, json.loads(line)


def append_line(path: str | os.PathLike, obj: Any) -> None:
    """Append one record with a single ``write`` on an O_APPEND descriptor.

    Readers therefore see either the whole line or none of it.
    """
    data = (dumps(obj) + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, data)
    finally:
        os.close(fd)


def truncate_torn_tail(path: str | os.PathLike) -> bool:
    """Drop a trailing partial line so later appends start on a fresh line."""
    with open(path, "rb+") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        if size == 0:
            return False
        fh.seek(size - 1)
        if fh.read(1) == b"\n":
            return False
        fh.seek(0)
        keep = fh.read().rfind(b"\n") + 1
        fh.truncate(keep)
        return True


def num_threads() -> int:
    try:
        n = int(os.environ.get("SPURANK_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)
