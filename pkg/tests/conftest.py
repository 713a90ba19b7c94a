"""Shared fixtures and independent reference implementations.

The reference functions here deliberately use different algorithms from the
package (explicit scans instead of split/bisect) so the tests do not just
mirror the implementation back at itself.
"""
from __future__ import annotations

import random
from pathlib import Path

import pytest


def write_lines(path: Path, records, width: int | None = None) -> Path:
    """Write records (bytes, str or int) newline-terminated. Ints are
    zero-padded to width digits when width is given."""
    out = []
    for r in records:
        if isinstance(r, int):
            out.append(b"%0*d" % (width or 1, r) if width else str(r).encode())
        elif isinstance(r, str):
            out.append(r.encode())
        else:
            out.append(r)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = b"\n".join(out)
    path.write_bytes(data + b"\n" if out else b"")
    return path


def read_lines(path: Path) -> list[bytes]:
    data = Path(path).read_bytes()
    if not data:
        return []
    if data.endswith(b"\n"):
        data = data[:-1]
    return data.split(b"\n")


def reference_chunk_records(data: bytes, at_start: bool, at_end: bool) -> list[bytes]:
    """Complete records inside a chunk, by explicit newline scanning."""
    records = []
    pos = 0
    n = len(data)
    if not at_start:
        nl = data.find(b"\n")
        pos = n if nl < 0 else nl + 1
    while pos < n:
        nl = data.find(b"\n", pos)
        if nl < 0:
            if at_end:
                records.append(data[pos:])
            break
        records.append(data[pos:nl])
        pos = nl + 1
    return records


def reference_sites(counts: dict[bytes, int], stride: int, rule: str, token=None) -> list[bytes]:
    """Division sites via the full sorted-sample expansion."""
    tok = token or (lambda x: x)
    expansion: list[bytes] = []
    for key in sorted(counts, key=tok):
        expansion.extend([key] * counts[key])
    n = len(expansion)
    if stride >= n:
        return []
    indices = range(stride, n, stride) if rule == "strict" else range(stride - 1, n, stride)
    out: list[bytes] = []
    for i in indices:
        candidate = expansion[i]
        if not out or tok(candidate) > tok(out[-1]):
            out.append(candidate)
    return out


def reference_segment(key: bytes, sites, token=None) -> int:
    """Linear-scan segment lookup: first site at or above the key."""
    tok = token or (lambda x: x)
    for i, site in enumerate(sites):
        if tok(key) <= tok(site):
            return i
    return len(sites)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Criterion results are also printed live, but capture hides those for
    # passing tests; this summary keeps them visible in every run.
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
