from __future__ import annotations

import os
import tempfile
from fractions import Fraction
from pathlib import Path

from .errors import DomainError


def parse_rational(text: str | int | Fraction) -> Fraction:
    """Parse "p/q", an integer, or a finite decimal string into an exact Fraction."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, int):
        return Fraction(text)
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise DomainError(f"not a rational number: {text!r}") from exc


def fmt_rational(q: Fraction) -> str:
    return f"{q.numerator}/{q.denominator}"


def worker_count(default: int | None = None) -> int:
    """Worker cap from FLOWFORGE_THREADS, falling back to the CPU count."""
    raw = os.environ.get("FLOWFORGE_THREADS")
    cpus = os.cpu_count() or 1
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, default if default is not None else cpus)


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
