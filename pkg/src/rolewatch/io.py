"""Atomic file output."""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path
from typing import Callable, TextIO


def atomic_write(path: str | Path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temp file in the same directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def write_via(path: str | Path, writer: Callable[[TextIO], None]) -> Path:
    buf = io.StringIO()
    writer(buf)
    return atomic_write(path, buf.getvalue())
