"""Shared plumbing: errors, size parsing, key ordering, record-chunk I/O."""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence


class SortError(Exception):
    """Base class for failures raised by this package."""


class ValidationError(SortError):
    """An argument or configuration violated a precondition."""


class VerificationFailure(SortError):
    """An output failed a sortedness or record-conservation check."""


_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kKmMgG]?)\s*$")
_SIZE_FACTOR = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str | int) -> int:
    """Parse a byte count such as '64', '4K', '20M' or '1G' (powers of 1024)."""
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(text)
    if not m:
        raise ValidationError(f"unparseable size {text!r} (expected digits with optional K/M/G suffix)")
    return int(m.group(1)) * _SIZE_FACTOR[m.group(2).lower()]


def format_size(n: int) -> str:
    for suffix, factor in (("G", 1 << 30), ("M", 1 << 20), ("K", 1 << 10)):
        if n >= factor and n % factor == 0:
            return f"{n // factor}{suffix}"
    return str(n)


class KeyMode(str, Enum):
    """How record bytes are ordered."""

    LEXICOGRAPHIC = "lex"
    NUMERIC = "numeric"


def make_key_fn(mode: KeyMode) -> Callable[[bytes], object] | None:
    """Return a sort/compare token function, or None for native bytes order."""
    if mode == KeyMode.LEXICOGRAPHIC:
        return None
    if mode == KeyMode.NUMERIC:
        return _numeric_token
    raise ValidationError(f"unknown key mode {mode!r}")


def _numeric_token(record: bytes) -> int:
    try:
        return int(record)
    except ValueError:
        raise ValidationError(f"record {record[:40]!r} is not a decimal integer (numeric key mode)") from None


def key_token(record: bytes, mode: KeyMode):
    fn = make_key_fn(mode)
    return record if fn is None else fn(record)


def scratch_root(explicit: Path | str | None = None) -> Path:
    """Resolve the scratch directory: explicit arg, then SORT_SCRATCH_DIR, then the system tmpdir."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get("SORT_SCRATCH_DIR")
    if env:
        return Path(env)
    return Path(tempfile.gettempdir())


@dataclass(frozen=True)
class InputSplit:
    """A byte range of one input file, processed by a single map task."""

    path: Path
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


def make_splits(paths: Sequence[Path | str], split_size: int) -> list[InputSplit]:
    """Cut input files into byte-range splits of at most split_size bytes."""
    if split_size < 1:
        raise ValidationError("split size must be at least 1 byte")
    splits: list[InputSplit] = []
    for raw in paths:
        path = Path(raw)
        size = os.path.getsize(path)
        pos = 0
        while pos < size:
            length = min(split_size, size - pos)
            splits.append(InputSplit(path, pos, length))
            pos += length
    return splits


_READ_CHUNK = 4 << 20


def read_split_records(split: InputSplit, chunk_bytes: int = _READ_CHUNK) -> Iterator[tuple[int, list[bytes]]]:
    """Yield (offset of first record, records) chunks for one split.

    Records are newline-delimited with the trailing newline stripped. A record
    belongs to the split containing its first byte, so a record straddling the
    split end is completed here and skipped by the next split's reader.
    """
    with open(split.path, "rb") as f:
        end = split.end
        if split.start > 0:
            # If the byte before the split is not a newline, the first partial
            # line belongs to the previous split.
            f.seek(split.start - 1)
            if f.read(1) != b"\n":
                f.readline()
        pos = f.tell()
        carry = b""
        base = pos
        while pos < end:
            block = f.read(min(chunk_bytes, end - pos))
            if not block:
                break
            pos += len(block)
            data = carry + block
            pieces = data.split(b"\n")
            carry = pieces.pop()
            if pieces:
                yield base, pieces
                base += len(data) - len(carry)
        if carry:
            # Record starts inside the split but ends past it (or at EOF).
            rest = f.readline()
            if rest.endswith(b"\n"):
                rest = rest[:-1]
            yield base, [carry + rest]


def iter_record_chunks(path: Path | str, chunk_bytes: int = _READ_CHUNK) -> Iterator[list[bytes]]:
    """Yield lists of newline-stripped records from a whole file."""
    size = os.path.getsize(path)
    if size == 0:
        return
    for _, records in read_split_records(InputSplit(Path(path), 0, size), chunk_bytes):
        yield records


def read_records(path: Path | str) -> list[bytes]:
    out: list[bytes] = []
    for chunk in iter_record_chunks(path):
        out.extend(chunk)
    return out


def write_records(path: Path | str, records: Iterable[bytes], append: bool = False) -> None:
    if not isinstance(records, (list, tuple)):
        records = list(records)
    with open(path, "ab" if append else "wb") as f:
        if records:
            f.write(b"\n".join(records) + b"\n")
