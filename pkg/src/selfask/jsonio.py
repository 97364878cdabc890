"""Small JSON helpers shared across the package: canonical dumps, digests,
line-delimited files, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Any, Iterable, Iterator


def canonical_json(obj: Any) -> str:
    """Deterministic compact JSON: sorted keys, no whitespace, raw UTF-8."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def pretty_json(obj: Any) -> str:
    """Deterministic human-readable JSON for summary/manifest files."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def iter_jsonl(path: str | os.PathLike) -> Iterator[Any]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_jsonl(path: str | os.PathLike) -> list[Any]:
    return list(iter_jsonl(path))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = str(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl_atomic(path: str | os.PathLike, objs: Iterable[Any]) -> int:
    """Write one canonical JSON object per line. Returns the record count."""
    lines = [canonical_json(obj) for obj in objs]
    text = "".join(line + "\n" for line in lines)
    atomic_write_text(path, text)
    return len(lines)
