"""Key-distribution estimation and range planning from positional samples.

A small number of fixed-size chunks is read from evenly spaced positions in
each input file. The complete records inside those chunks form a key-frequency
summary, and division sites drawn from the sorted sample split the key space
into segments of roughly blockSize bytes each.
"""
from __future__ import annotations

import os
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .util import KeyMode, ValidationError, make_key_fn


@dataclass(frozen=True)
class SamplingPlan:
    """Where samples come from: sites_per_file chunks of chunk_bytes each."""

    sites_per_file: int = 3
    chunk_bytes: int = 4096

    def __post_init__(self) -> None:
        if self.sites_per_file < 1:
            raise ValidationError("sites_per_file must be at least 1")
        if self.chunk_bytes < 1:
            raise ValidationError("chunk_bytes must be at least 1")


@dataclass
class SampleSummary:
    """Multiset of sampled record keys."""

    counts: dict[bytes, int] = field(default_factory=dict)
    sample_count: int = 0

    def add(self, key: bytes, times: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + times
        self.sample_count += times

    def merge(self, other: "SampleSummary") -> None:
        for key, times in other.counts.items():
            self.add(key, times)

    @classmethod
    def from_keys(cls, keys: Iterable[bytes]) -> "SampleSummary":
        s = cls()
        for k in keys:
            s.add(k)
        return s


@dataclass(frozen=True)
class DivisionSites:
    """Strictly increasing keys bounding the range segments.

    n sites produce n+1 segments. Segment 0 holds keys <= sites[0]; segment i
    holds keys in (sites[i-1], sites[i]]; the last segment holds everything
    above the final site.
    """

    sites: tuple[bytes, ...] = ()

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def segment_count(self) -> int:
        return len(self.sites) + 1


class SiteIndexRule(Enum):
    """Which sorted-sample indices become division sites for stride d.

    STRICT_MULTIPLES takes indices d, 2d, 3d, ... below the sample count.
    BLOCK_ENDS takes the last index of each d-sized block: d-1, 2d-1, ...
    BLOCK_ENDS yields one more site when the stride divides the sample count
    exactly, at the cost of a possibly tiny top segment.
    """

    STRICT_MULTIPLES = "strict-multiples"
    BLOCK_ENDS = "block-ends"


@dataclass(frozen=True)
class PartitionPlan:
    sites: DivisionSites
    divide_nums: int
    reducer_count: int
    block_size: int
    total_length: int


def _complete_records(data: bytes, at_start: bool, at_end: bool) -> list[bytes]:
    """Extract the complete records from a chunk read at an arbitrary offset.

    The trailing piece after the last newline is kept only when the chunk
    reaches the end of the file; the leading piece is dropped unless the chunk
    begins at offset 0, because its first bytes may be a torn record.
    """
    pieces = data.split(b"\n")
    tail = pieces.pop()
    if tail and at_end:
        pieces.append(tail)
    if pieces and not at_start:
        pieces.pop(0)
    return pieces


def take_samples(files: Sequence[Path | str], plan: SamplingPlan) -> SampleSummary:
    """Read plan.sites_per_file chunks per file and tally the records inside.

    Empty files (or files shorter than one record) contribute nothing.
    An empty file list yields an empty summary.
    """
    summary = SampleSummary()
    for raw in files:
        path = Path(raw)
        file_len = os.path.getsize(path)
        if file_len == 0:
            continue
        with open(path, "rb") as f:
            for k in range(plan.sites_per_file):
                offset = k * file_len // plan.sites_per_file
                f.seek(offset)
                data = f.read(plan.chunk_bytes)
                records = _complete_records(
                    data,
                    at_start=(offset == 0),
                    at_end=(offset + len(data) >= file_len),
                )
                for record in records:
                    summary.add(record)
    return summary


def compute_divide_nums(sample_count: int, block_size: int, total_length: int) -> int:
    """Stride between division sites in sorted-sample index space.

    floor(sample_count * block_size / total_length), floored at 1 so a site
    can be drawn even when the sample badly under-covers the input.
    """
    if sample_count < 0:
        raise ValidationError("sample_count must be non-negative")
    if block_size < 1:
        raise ValidationError("block_size must be positive")
    if total_length < 1:
        raise ValidationError("total_length must be positive")
    return max(1, sample_count * block_size // total_length)


def compute_division_sites(
    summary: SampleSummary,
    divide_nums: int,
    *,
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC,
    index_rule: SiteIndexRule = SiteIndexRule.STRICT_MULTIPLES,
) -> DivisionSites:
    """Pick every divide_nums-th key from the sorted sample expansion.

    Duplicate candidates collapse to keep the site list strictly increasing.
    A stride of at least the sample count yields no sites (one segment).
    """
    if divide_nums < 1:
        raise ValidationError("divide_nums must be at least 1")
    n = summary.sample_count
    if n == 0 or divide_nums >= n:
        return DivisionSites(())
    token = make_key_fn(key_mode)
    ordered = sorted(summary.counts, key=token) if token else sorted(summary.counts)
    if index_rule == SiteIndexRule.STRICT_MULTIPLES:
        wanted = range(divide_nums, n, divide_nums)
    else:
        wanted = range(divide_nums - 1, n, divide_nums)

    sites: list[bytes] = []
    prev_token = None
    pos = 0
    it = iter(wanted)
    target = next(it, None)
    for key in ordered:
        count = summary.counts[key]
        pos += count
        while target is not None and target < pos:
            t = token(key) if token else key
            if prev_token is None or t > prev_token:
                sites.append(key)
                prev_token = t
            target = next(it, None)
    return DivisionSites(tuple(sites))


def reducer_count(num_sites: int, max_reducers: int) -> int:
    """Segments cap at num_sites + 1; max_reducers wins when lower."""
    if num_sites < 0:
        raise ValidationError("num_sites must be non-negative")
    if max_reducers < 1:
        raise ValidationError("max_reducers must be at least 1")
    return min(num_sites + 1, max_reducers)


class SegmentRouter:
    """Precomputed token table for routing many records to segments."""

    def __init__(self, sites: DivisionSites | Sequence[bytes], key_mode: KeyMode = KeyMode.LEXICOGRAPHIC):
        raw = sites.sites if isinstance(sites, DivisionSites) else tuple(sites)
        fn = make_key_fn(key_mode)
        self._token = fn
        self._tokens = [fn(s) for s in raw] if fn else list(raw)

    @property
    def segment_count(self) -> int:
        return len(self._tokens) + 1

    def route(self, key: bytes) -> int:
        t = self._token(key) if self._token else key
        return bisect_left(self._tokens, t)

    def route_many(self, records: Sequence[bytes]) -> list[int]:
        tokens = self._tokens
        if self._token is None:
            return [bisect_left(tokens, r) for r in records]
        fn = self._token
        return [bisect_left(tokens, fn(r)) for r in records]


def segment_of(key: bytes, sites: DivisionSites | Sequence[bytes], key_mode: KeyMode = KeyMode.LEXICOGRAPHIC) -> int:
    """Index of the segment owning key: first site >= key, else the top segment."""
    return SegmentRouter(sites, key_mode).route(key)


def make_partition_plan(
    summary: SampleSummary,
    block_size: int,
    total_length: int,
    max_reducers: int,
    *,
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC,
    index_rule: SiteIndexRule = SiteIndexRule.STRICT_MULTIPLES,
) -> PartitionPlan:
    """Derive stride, sites and reducer count for one partitioning pass."""
    if total_length <= 0 or summary.sample_count == 0:
        sites = DivisionSites(())
        return PartitionPlan(sites, 1, reducer_count(0, max_reducers), block_size, max(total_length, 0))
    divide = compute_divide_nums(summary.sample_count, block_size, total_length)
    sites = compute_division_sites(summary, divide, key_mode=key_mode, index_rule=index_rule)
    return PartitionPlan(sites, divide, reducer_count(len(sites), max_reducers), block_size, total_length)
