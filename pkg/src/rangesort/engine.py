"""Single-machine map/shuffle/reduce executor with an external-merge shuffle.

Map tasks stream byte-range splits and write length-prefixed key/value frames
into one spill file per partition. Each partition is then shuffled: pairs are
buffered up to a byte budget, sorted, spilled as runs, and k-way merged before
grouping and reduction. Output is one newline-delimited part file per
partition, named part-r-NNNNN.
"""
from __future__ import annotations

import heapq
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import groupby
from operator import itemgetter
from pathlib import Path
from struct import Struct
from typing import Callable, Iterable, Iterator, Sequence

from .util import (
    InputSplit,
    SortError,
    ValidationError,
    make_splits,
    read_split_records,
    scratch_root,
)

_FRAME_HEADER = Struct(">II")
MERGE_FAN_IN = 64
DEFAULT_SPLIT_BYTES = 32 << 20
_FLUSH_BYTES = 4 << 20


class JobError(SortError):
    """A map or reduce task failed; the message names the task and position."""


@dataclass(frozen=True)
class KeyValue:
    key: bytes
    value: bytes = b""


@dataclass
class SortedRun:
    """One spilled, internally sorted frame file."""

    path: Path
    record_count: int
    byte_length: int


@dataclass
class JobSpec:
    """Everything run_job needs: transforms, partitioning and resources."""

    mapper: Callable[[bytes], Iterable[tuple[bytes, bytes]]]
    reducer: Callable[[bytes, Iterator[bytes]], Iterable[bytes]]
    partitioner: Callable[[bytes, int], int]
    reducer_count: int
    memory_budget: int
    output_dir: Path
    workers: int = 1
    split_bytes: int = DEFAULT_SPLIT_BYTES
    max_record_bytes: int | None = None
    scratch_dir: Path | None = None
    keep_temp: bool = False

    def __post_init__(self) -> None:
        if self.reducer_count < 1:
            raise ValidationError("reducer_count must be at least 1")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")


def write_frames(fh, pairs: Iterable[tuple[bytes, bytes]]) -> int:
    """Append length-prefixed frames; returns the number of frames written."""
    pack = _FRAME_HEADER.pack
    out: list[bytes] = []
    n = 0
    for key, value in pairs:
        out.append(pack(len(key), len(value)))
        out.append(key)
        out.append(value)
        n += 1
    fh.write(b"".join(out))
    return n


def iter_frames(path: Path | str, buffer_bytes: int = 1 << 20) -> Iterator[tuple[bytes, bytes]]:
    """Stream (key, value) pairs back out of a frame file."""
    unpack = _FRAME_HEADER.unpack_from
    with open(path, "rb") as f:
        buf = b""
        pos = 0
        while True:
            if len(buf) - pos < 8:
                buf = buf[pos:] + f.read(buffer_bytes)
                pos = 0
                if not buf:
                    return
                if len(buf) < 8:
                    raise SortError(f"truncated frame header in {path}")
            klen, vlen = unpack(buf, pos)
            end = pos + 8 + klen + vlen
            while len(buf) < end:
                more = f.read(max(buffer_bytes, end - len(buf)))
                if not more:
                    raise SortError(f"truncated frame body in {path}")
                buf = buf[pos:] + more
                end -= pos
                pos = 0
            yield buf[pos + 8 : pos + 8 + klen], buf[pos + 8 + klen : end]
            pos = end


class ExternalMerger:
    """Buffer, sort, spill and k-way merge key/value pairs under a byte budget.

    Accounting counts key+value payload bytes. A record larger than
    max_record_bytes (default budget/2) is rejected so two records always fit.
    """

    def __init__(
        self,
        memory_budget: int,
        *,
        scratch_dir: Path | str | None = None,
        max_record_bytes: int | None = None,
        keep_temp: bool = False,
    ):
        if memory_budget < 2:
            raise ValidationError("memory budget must be at least 2 bytes")
        if max_record_bytes is None:
            max_record_bytes = max(1, memory_budget // 2)
        elif max_record_bytes * 2 > memory_budget:
            raise ValidationError("memory budget must cover two max-size records")
        self.memory_budget = memory_budget
        self.max_record_bytes = max_record_bytes
        self.keep_temp = keep_temp
        self._scratch_parent = scratch_dir
        self._dir: Path | None = None
        self._buffer: list[tuple[bytes, bytes]] = []
        self._buffered = 0
        self.peak_buffered = 0
        self.spill_count = 0
        self.runs: list[SortedRun] = []

    def _scratch(self) -> Path:
        if self._dir is None:
            root = scratch_root(self._scratch_parent)
            root.mkdir(parents=True, exist_ok=True)
            self._dir = Path(tempfile.mkdtemp(prefix="shuffle-", dir=root))
        return self._dir

    def add(self, key: bytes, value: bytes = b"") -> None:
        size = len(key) + len(value)
        if size > self.max_record_bytes:
            raise ValidationError(
                f"record of {size} bytes exceeds the {self.max_record_bytes}-byte record limit"
            )
        self._buffer.append((key, value))
        self._buffered += size
        if self._buffered > self.peak_buffered:
            self.peak_buffered = self._buffered
        if self._buffered >= self.memory_budget:
            self._spill()

    def extend(self, pairs: Iterable[tuple[bytes, bytes]]) -> None:
        for key, value in pairs:
            self.add(key, value)

    def _spill(self) -> None:
        if not self._buffer:
            return
        self._buffer.sort(key=itemgetter(0))
        path = self._scratch() / f"run-{self.spill_count:06d}.frames"
        with open(path, "wb") as f:
            n = write_frames(f, self._buffer)
        self.runs.append(SortedRun(path, n, os.path.getsize(path)))
        self.spill_count += 1
        self._buffer = []
        self._buffered = 0

    def _merge_runs(self, runs: Sequence[SortedRun]) -> Iterator[tuple[bytes, bytes]]:
        return heapq.merge(*(iter_frames(r.path) for r in runs), key=itemgetter(0))

    def _collapse(self) -> None:
        # Cap merge fan-in; oversized run sets merge in multiple passes.
        while len(self.runs) > MERGE_FAN_IN:
            batch, self.runs = self.runs[:MERGE_FAN_IN], self.runs[MERGE_FAN_IN:]
            path = self._scratch() / f"run-{self.spill_count:06d}.frames"
            with open(path, "wb") as f:
                n = write_frames(f, self._merge_runs(batch))
            self.runs.append(SortedRun(path, n, os.path.getsize(path)))
            self.spill_count += 1
            if not self.keep_temp:
                for r in batch:
                    r.path.unlink(missing_ok=True)

    def merge(self) -> Iterator[tuple[bytes, bytes]]:
        """Yield all added pairs in key order. Call once, after the last add."""
        if not self.runs:
            self._buffer.sort(key=itemgetter(0))
            yield from self._buffer
            self._cleanup()
            return
        self._spill()
        self._collapse()
        try:
            yield from self._merge_runs(self.runs)
        finally:
            self._cleanup()

    def _cleanup(self) -> None:
        if self._dir is not None and not self.keep_temp:
            shutil.rmtree(self._dir, ignore_errors=True)


def shuffle(
    pairs: Iterable[tuple[bytes, bytes]],
    memory_budget: int,
    *,
    scratch_dir: Path | str | None = None,
    max_record_bytes: int | None = None,
    keep_temp: bool = False,
) -> Iterator[tuple[bytes, bytes]]:
    """Sort an arbitrary pair stream by key under a fixed memory budget."""
    merger = ExternalMerger(
        memory_budget,
        scratch_dir=scratch_dir,
        max_record_bytes=max_record_bytes,
        keep_temp=keep_temp,
    )
    merger.extend(pairs)
    return merger.merge()


class _PartitionSpills:
    """Per-partition frame buffers for one map task, flushed in bounded slabs."""

    def __init__(self, directory: Path, task_index: int, partitions: int):
        self.paths = [directory / f"map-{task_index:05d}-p{p:05d}.frames" for p in range(partitions)]
        self._chunks: list[list[bytes]] = [[] for _ in range(partitions)]
        self._pending = 0
        self.bytes_out = [0] * partitions

    def put(self, partition: int, frame: bytes) -> None:
        self._chunks[partition].append(frame)
        self._pending += len(frame)
        if self._pending >= _FLUSH_BYTES:
            self.flush()

    def flush(self) -> None:
        for p, chunk in enumerate(self._chunks):
            if not chunk:
                continue
            data = b"".join(chunk)
            with open(self.paths[p], "ab") as f:
                f.write(data)
            self.bytes_out[p] += len(data)
            self._chunks[p] = []
        self._pending = 0


def _run_map_task(spec: JobSpec, task_index: int, split: InputSplit, spill_dir: Path) -> list[int]:
    """Map one split; returns bytes emitted per partition."""
    spills = _PartitionSpills(spill_dir, task_index, spec.reducer_count)
    pack = _FRAME_HEADER.pack
    mapper = spec.mapper
    partitioner = spec.partitioner
    n = spec.reducer_count
    offset = None
    try:
        for base, records in read_split_records(split):
            offset = base
            for record in records:
                for key, value in mapper(record):
                    p = partitioner(key, n)
                    if not 0 <= p < n:
                        raise JobError(f"partitioner returned {p} for {n} partitions")
                    spills.put(p, pack(len(key), len(value)) + key + value)
                offset += len(record) + 1
        spills.flush()
    except JobError:
        raise
    except Exception as exc:
        raise JobError(
            f"map task {task_index} failed at {split.path} offset {offset}: {exc}"
        ) from exc
    return spills.bytes_out


def _run_reduce_task(spec: JobSpec, partition: int, inputs: Sequence[Path], scratch: Path) -> Path:
    out_path = spec.output_dir / f"part-r-{partition:05d}"
    merger = ExternalMerger(
        spec.memory_budget,
        scratch_dir=scratch,
        max_record_bytes=spec.max_record_bytes,
        keep_temp=spec.keep_temp,
    )
    key = None
    try:
        for path in inputs:
            merger.extend(iter_frames(path))
        with open(out_path, "wb") as out:
            pending: list[bytes] = []
            pending_bytes = 0
            for key, group in groupby(merger.merge(), key=itemgetter(0)):
                for line in spec.reducer(key, (v for _, v in group)):
                    pending.append(line)
                    pending_bytes += len(line) + 1
                    if pending_bytes >= _FLUSH_BYTES:
                        out.write(b"\n".join(pending) + b"\n")
                        pending = []
                        pending_bytes = 0
            if pending:
                out.write(b"\n".join(pending) + b"\n")
    except (JobError, ValidationError):
        raise
    except Exception as exc:
        raise JobError(f"reduce task {partition} failed on key {key!r}: {exc}") from exc
    return out_path


def run_job(spec: JobSpec, inputs: Sequence[Path | str]) -> list[Path]:
    """Run a full map/shuffle/reduce job; returns the part file paths in order.

    All map tasks finish before any reduce task starts. With workers=1 tasks
    run inline in task order, making output bytes reproducible.
    """
    for raw in inputs:
        if not os.path.exists(raw):
            raise ValidationError(f"input not found: {raw}")
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    root = scratch_root(spec.scratch_dir)
    root.mkdir(parents=True, exist_ok=True)
    job_dir = Path(tempfile.mkdtemp(prefix="mrjob-", dir=root))
    spill_dir = job_dir / "map-out"
    spill_dir.mkdir()
    splits = make_splits(inputs, spec.split_bytes)
    failed = False
    try:
        if spec.workers > 1 and len(splits) > 1:
            with ThreadPoolExecutor(max_workers=spec.workers) as pool:
                list(pool.map(lambda iv: _run_map_task(spec, iv[0], iv[1], spill_dir), enumerate(splits)))
        else:
            for i, split in enumerate(splits):
                _run_map_task(spec, i, split, spill_dir)

        def reduce_one(partition: int) -> Path:
            files = sorted(spill_dir.glob(f"map-*-p{partition:05d}.frames"))
            return _run_reduce_task(spec, partition, files, job_dir / "runs")

        partitions = range(spec.reducer_count)
        if spec.workers > 1 and spec.reducer_count > 1:
            with ThreadPoolExecutor(max_workers=spec.workers) as pool:
                parts = list(pool.map(reduce_one, partitions))
        else:
            parts = [reduce_one(p) for p in partitions]
        return parts
    except BaseException:
        failed = True
        raise
    finally:
        # Scratch survives a failure or an explicit keep_temp for inspection.
        if not failed and not spec.keep_temp:
            shutil.rmtree(job_dir, ignore_errors=True)


def identity_mapper(record: bytes) -> Iterable[tuple[bytes, bytes]]:
    return ((record, b""),)


def identity_reducer(key: bytes, values: Iterator[bytes]) -> Iterable[bytes]:
    return (key for _ in values)
