"""Output checking: sortedness scans, record-conservation digests, oracle sort.

The conservation check is an order-independent multiset digest: each record
hashes to a 128-bit integer and the digest is their sum modulo 2**128. Any
permutation of the same records gives the same digest; a dropped, duplicated
or altered record changes it.
"""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass
from hashlib import blake2b
from pathlib import Path
from typing import Iterable, Sequence

from .util import KeyMode, ValidationError, iter_record_chunks, make_key_fn, read_records

_DIGEST_MOD = 1 << 128
DEFAULT_ORACLE_LIMIT = 512 << 20


def record_hash(record: bytes) -> int:
    return int.from_bytes(blake2b(record, digest_size=16).digest(), "big")


def multiset_digest(records: Iterable[bytes]) -> int:
    """Order-independent digest of a record multiset."""
    total = 0
    for record, count in Counter(records).items():
        total += record_hash(record) * count
    return total % _DIGEST_MOD


def combine_digests(*digests: int) -> int:
    return sum(digests) % _DIGEST_MOD


def format_digest(digest: int) -> str:
    return f"{digest:032x}"


@dataclass(frozen=True)
class VerificationResult:
    is_sorted: bool
    first_violation_offset: int | None
    multiset_hash: str
    record_count: int


def verify_sorted(
    targets: Path | str | Sequence[Path | str],
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC,
) -> VerificationResult:
    """Scan files as one concatenated stream; report order and the digest.

    first_violation_offset is the byte offset (in the concatenated stream) of
    the first record that is smaller than its predecessor. The digest covers
    every record whether or not the stream is sorted.
    """
    if isinstance(targets, (str, Path)):
        targets = [targets]
    token = make_key_fn(key_mode)
    digest = 0
    count = 0
    offset = 0
    prev_token = None
    violation: int | None = None
    for target in targets:
        for chunk in iter_record_chunks(target):
            count += len(chunk)
            digest = (digest + multiset_digest(chunk)) % _DIGEST_MOD
            if violation is None:
                tokens = chunk if token is None else [token(r) for r in chunk]
                head = tokens[0]
                in_order = (prev_token is None or prev_token <= head) and tokens == sorted(tokens)
                if not in_order:
                    at = offset
                    last = prev_token
                    for record, t in zip(chunk, tokens):
                        if last is not None and t < last:
                            violation = at
                            break
                        last = t
                        at += len(record) + 1
                else:
                    prev_token = tokens[-1]
            offset += sum(map(len, chunk)) + len(chunk)
    return VerificationResult(
        is_sorted=violation is None,
        first_violation_offset=violation,
        multiset_hash=format_digest(digest),
        record_count=count,
    )


def oracle_sort(
    input_path: Path | str,
    output_path: Path | str,
    *,
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC,
    max_bytes: int = DEFAULT_ORACLE_LIMIT,
) -> Path:
    """Reference sort: read everything, one sort call, write.

    Refuses inputs over max_bytes; the oracle is deliberately memory-bound.
    """
    size = os.path.getsize(input_path)
    if size > max_bytes:
        raise ValidationError(
            f"oracle refuses {size} bytes (limit {max_bytes}); it sorts entirely in memory"
        )
    records = read_records(input_path)
    records.sort(key=make_key_fn(key_mode))
    output_path = Path(output_path)
    with open(output_path, "wb") as f:
        if records:
            f.write(b"\n".join(records) + b"\n")
    return output_path
