"""Multi-round range-partitioned external sort.

Round outline: sample the inputs, derive division sites, route every record
into one middle file per segment per map task, then handle each segment by
size. Segments at or under the memory threshold are sorted in memory and
written straight to the result directory; oversized segments are deferred and
re-partitioned with fresh samples in the next round. After max_file_rounds
file rounds, anything still oversized is finished by the shuffle engine, which
needs no threshold. Oversized segments whose records are all equal are copied
through unsorted-order-free, which also breaks recursion on duplicate-heavy
keys. Result files are named by their segment path (top-level "2", nested
"1_2"); concatenating them in segment order yields one sorted stream.
"""
from __future__ import annotations

import logging
import os
import random
import re
import shutil
import threading
import time
import zlib
from bisect import bisect_left
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from . import engine, sampling
from .util import (
    InputSplit,
    KeyMode,
    SortError,
    ValidationError,
    iter_record_chunks,
    make_key_fn,
    make_splits,
    read_split_records,
    scratch_root,
)

log = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^_0\.\d{5,}$")
_NAME_ATTEMPTS = 64
_SEGMENT_NAME = re.compile(r"^\d+(?:_\d+)*$")
_FLUSH_BYTES = 32 << 20
_SPLIT_BYTES = 32 << 20
_MAX_RECORD_BYTES = 1 << 20
FALLBACK_MIN_BUDGET = 16 << 20

SegmentPath = tuple[int, ...]


def render_segment_path(path: SegmentPath) -> str:
    """() -> '', (1,) -> '1', (1,2) -> '1_2'."""
    return "_".join(str(i) for i in path)


def parse_segment_path(name: str) -> SegmentPath:
    if not _SEGMENT_NAME.match(name):
        raise SortError(f"unparseable segment name {name!r}")
    return tuple(int(part) for part in name.split("_"))


@dataclass
class JobConfig:
    """Resource and layout settings shared by both sort modes."""

    middle_dir: Path
    result_dir: Path
    block_size: int = 20 << 20
    memory_threshold: int | None = None
    max_reducers: int = 64
    max_file_rounds: int = 2
    sampling_plan: sampling.SamplingPlan = field(default_factory=sampling.SamplingPlan)
    seed: int = 1
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC
    site_rule: sampling.SiteIndexRule = sampling.SiteIndexRule.STRICT_MULTIPLES
    workers: int = 1
    keep_temp: bool = False
    scratch_dir: Path | None = None

    def __post_init__(self) -> None:
        self.middle_dir = Path(self.middle_dir)
        self.result_dir = Path(self.result_dir)
        if self.block_size < 1:
            raise ValidationError("block_size must be positive")
        if self.memory_threshold is None:
            self.memory_threshold = self.block_size
        if self.memory_threshold < self.block_size:
            raise ValidationError("memory_threshold must be at least block_size")
        if self.max_reducers < 1:
            raise ValidationError("max_reducers must be at least 1")
        if self.max_file_rounds < 1:
            raise ValidationError("max_file_rounds must be at least 1")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")


@dataclass(frozen=True)
class IntermediateFile:
    segment: int
    path: Path
    byte_length: int


@dataclass(frozen=True)
class SegmentOutcome:
    """Either sorted to result_path, or deferred (result_path is None)."""

    segment: SegmentPath
    result_path: Path | None = None

    @property
    def deferred(self) -> bool:
        return self.result_path is None


@dataclass
class SortReport:
    rounds_executed: int
    segments_per_round: list[int]
    deferred_per_round: list[int]
    bytes_sorted: int
    elapsed_s: float
    result_dir: Path
    guard_segments: int = 0
    max_loaded_bytes: int = 0

    def lines(self) -> list[str]:
        return [
            f"rounds_executed={self.rounds_executed}",
            f"segments_per_round={','.join(map(str, self.segments_per_round)) or '0'}",
            f"deferred_per_round={','.join(map(str, self.deferred_per_round)) or '0'}",
            f"guard_segments={self.guard_segments}",
            f"bytes_sorted={self.bytes_sorted}",
            f"elapsed_s={self.elapsed_s:.3f}",
            f"result_dir={self.result_dir}",
        ]


@dataclass
class _RunStats:
    """Thread-safe counters shared by one sort run."""

    guard_segments: int = 0
    max_loaded_bytes: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def count_guard(self) -> None:
        with self.lock:
            self.guard_segments += 1

    def record_load(self, n: int) -> None:
        with self.lock:
            if n > self.max_loaded_bytes:
                self.max_loaded_bytes = n


def gen_intermediate_name(rng: random.Random, existing: set[str] | frozenset[str]) -> str:
    """Draw a middle-file name '_0.DDDDD' unused in this directory.

    Gives up after 64 attempts so a pathological name set fails loudly
    instead of spinning.
    """
    for _ in range(_NAME_ATTEMPTS):
        name = "_%.5f" % rng.random()
        if name not in existing:
            return name
    raise SortError(f"no unused intermediate name after {_NAME_ATTEMPTS} attempts")


class _NameRegistry:
    """Per-directory claimed-name sets, safe for concurrent map tasks."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._names: dict[Path, set[str]] = {}

    def create_file(self, directory: Path, rng: random.Random) -> Path:
        while True:
            with self._lock:
                names = self._names.setdefault(directory, set())
                name = gen_intermediate_name(rng, names)
                names.add(name)
            path = directory / name
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                continue  # foreign file on disk; the claimed name stays burnt
            os.close(fd)
            return path


class _TaskRunner:
    """Ordered task map over a thread pool; workers=1 runs inline."""

    def __init__(self, workers: int):
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn: Callable, items: Sequence) -> list:
        if self._pool is None or len(items) <= 1:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)


def partition_fn(segment_index: int, reducer_count: int) -> int:
    """Deferred-list file index for a segment: plain modulo placement."""
    if reducer_count < 1:
        raise ValidationError("reducer_count must be at least 1")
    if segment_index < 0:
        raise ValidationError("segment_index must be non-negative")
    return segment_index % reducer_count


def _raise_oversized(split: InputSplit, base: int, records: Sequence[bytes], limit: int) -> None:
    offset = base
    for record in records:
        if len(record) > limit:
            raise SortError(
                f"record at {split.path} offset {offset} is {len(record)} bytes, over the {limit}-byte limit"
            )
        offset += len(record) + 1


def map_partition_task(
    split: InputSplit,
    sites: sampling.DivisionSites | Sequence[bytes],
    middle_dir: Path,
    rng: random.Random,
    *,
    key_mode: KeyMode = KeyMode.LEXICOGRAPHIC,
    registry: _NameRegistry | None = None,
    max_record_bytes: int = _MAX_RECORD_BYTES,
) -> list[tuple[int, Path]]:
    """Route one split into per-segment middle files.

    Creates <middle_dir>/<segment>/<random name> for each segment up front,
    appends records as they route, and unlinks files that stayed empty.
    Returns (segment index, path) pairs for the files that received data.
    """
    if registry is None:
        registry = _NameRegistry()
    router = sampling.SegmentRouter(sites, key_mode)
    nseg = router.segment_count
    paths: list[Path] = []
    for seg in range(nseg):
        seg_dir = middle_dir / str(seg)
        seg_dir.mkdir(parents=True, exist_ok=True)
        paths.append(registry.create_file(seg_dir, rng))

    buffers: list[list[bytes]] = [[] for _ in range(nseg)]
    wrote = [False] * nseg
    pending = 0

    def flush() -> None:
        nonlocal pending
        for seg, buf in enumerate(buffers):
            if not buf:
                continue
            with open(paths[seg], "ab") as f:
                f.write(b"\n".join(buf) + b"\n")
            wrote[seg] = True
            buffers[seg] = []
        pending = 0

    for base, records in read_split_records(split):
        if max(map(len, records)) > max_record_bytes:
            _raise_oversized(split, base, records, max_record_bytes)
        for record, seg in zip(records, router.route_many(records)):
            buffers[seg].append(record)
        pending += sum(map(len, records)) + len(records)
        if pending >= _FLUSH_BYTES:
            flush()
    flush()

    out: list[tuple[int, Path]] = []
    for seg, path in enumerate(paths):
        if wrote[seg]:
            out.append((seg, path))
        else:
            path.unlink()
    return out


def _all_records_equal(files: Sequence[IntermediateFile]) -> bool:
    first: bytes | None = None
    for f in files:
        for chunk in iter_record_chunks(f.path):
            distinct = set(chunk)
            if first is None:
                first = distinct.pop()
            else:
                distinct.discard(first)
            if distinct:
                return False
    return True


def _concat_into(sources: Iterable[Path], dest: Path) -> None:
    with open(dest, "wb") as out:
        for src in sources:
            with open(src, "rb") as f:
                shutil.copyfileobj(f, out, 4 << 20)


def reduce_segment_task(
    segment_index: int,
    files: Sequence[IntermediateFile],
    cfg: JobConfig,
    parent_path: SegmentPath,
    deferred_out: Path,
    *,
    stats: _RunStats | None = None,
) -> SegmentOutcome:
    """Sort one segment in memory, or defer it when over the threshold.

    An oversized segment whose records are all equal is streamed to the result
    unchanged: it is already sorted and re-partitioning it could never shrink.
    Deferred segments append their rendered path to deferred_out.
    """
    seg_path = parent_path + (segment_index,)
    total = sum(f.byte_length for f in files)
    if total > cfg.memory_threshold:
        if _all_records_equal(files):
            result = cfg.result_dir / render_segment_path(seg_path)
            _concat_into((f.path for f in files), result)
            if stats is not None:
                stats.count_guard()
            return SegmentOutcome(seg_path, result)
        with open(deferred_out, "ab") as f:
            f.write(render_segment_path(seg_path).encode() + b"\n")
        return SegmentOutcome(seg_path, None)

    records: list[bytes] = []
    for f in files:
        for chunk in iter_record_chunks(f.path):
            records.extend(chunk)
    if stats is not None:
        stats.record_load(total)
    records.sort(key=make_key_fn(cfg.key_mode))
    result = cfg.result_dir / render_segment_path(seg_path)
    with open(result, "wb") as f:
        if records:
            f.write(b"\n".join(records) + b"\n")
    return SegmentOutcome(seg_path, result)


def _segment_middle_dir(middle_dir: Path, parent: SegmentPath) -> Path:
    rendered = render_segment_path(parent)
    return middle_dir / rendered if rendered else middle_dir


def run_round(
    targets: Sequence[tuple[SegmentPath, Sequence[Path]]],
    cfg: JobConfig,
    round_no: int,
    *,
    registry: _NameRegistry,
    stats: _RunStats,
    runner: _TaskRunner,
) -> tuple[list[SegmentOutcome], list[tuple[SegmentPath, list[Path]]]]:
    """Partition and reduce every target; returns (outcomes, next targets).

    All of a target's map tasks finish before its reduce tasks start, and the
    whole round finishes before deferred lists are read back. Deferred segment
    paths land in <middle>/output/round-N/part-r-NNNNN by modulo placement.
    """
    if not targets:
        raise ValidationError("run_round needs at least one target")
    out_dir = cfg.middle_dir / "output" / f"round-{round_no}"
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes: list[SegmentOutcome] = []

    for parent, files in targets:
        total = sum(os.path.getsize(p) for p in files)
        summary = sampling.take_samples(files, cfg.sampling_plan)
        plan = sampling.make_partition_plan(
            summary,
            cfg.block_size,
            max(total, 1),
            cfg.max_reducers,
            key_mode=cfg.key_mode,
            index_rule=cfg.site_rule,
        )
        target_mid = _segment_middle_dir(cfg.middle_dir, parent)
        splits = make_splits(files, _SPLIT_BYTES)
        rendered = render_segment_path(parent)

        def run_map(task: tuple[int, InputSplit]) -> list[tuple[int, Path]]:
            index, split = task
            rng = random.Random(f"{cfg.seed}:{round_no}:{rendered}:{index}")
            return map_partition_task(
                split, plan.sites, target_mid, rng, key_mode=cfg.key_mode, registry=registry
            )

        emitted = runner.map(run_map, list(enumerate(splits)))

        seg_files: dict[int, list[IntermediateFile]] = {}
        for task_out in emitted:
            for seg, path in task_out:
                seg_files.setdefault(seg, []).append(
                    IntermediateFile(seg, path, os.path.getsize(path))
                )

        reducers = plan.reducer_count
        part_paths = []
        for r in range(reducers):
            p = out_dir / f"part-r-{r:05d}"
            p.touch()
            part_paths.append(p)

        by_reducer: dict[int, list[int]] = {}
        for seg in sorted(seg_files):
            by_reducer.setdefault(partition_fn(seg, reducers), []).append(seg)

        def run_reduce(item: tuple[int, list[int]]) -> list[SegmentOutcome]:
            reducer_index, segs = item
            return [
                reduce_segment_task(
                    seg, seg_files[seg], cfg, parent, part_paths[reducer_index], stats=stats
                )
                for seg in segs
            ]

        reduce_out = runner.map(run_reduce, sorted(by_reducer.items()))
        target_outcomes = sorted(
            (o for group in reduce_out for o in group), key=lambda o: o.segment
        )
        outcomes.extend(target_outcomes)

        if not cfg.keep_temp:
            for outcome in target_outcomes:
                if not outcome.deferred:
                    shutil.rmtree(target_mid / str(outcome.segment[-1]), ignore_errors=True)
            if parent:
                # Inputs consumed; subdirectories may hold deferred children.
                for f in files:
                    Path(f).unlink(missing_ok=True)

    next_targets: list[tuple[SegmentPath, list[Path]]] = []
    for part in sorted(out_dir.glob("part-r-*")):
        for line in part.read_bytes().splitlines():
            if not line:
                continue
            seg_path = parse_segment_path(line.decode())
            seg_dir = _segment_middle_dir(cfg.middle_dir, seg_path[:-1]) / str(seg_path[-1])
            seg_inputs = sorted(p for p in seg_dir.iterdir() if p.is_file())
            next_targets.append((seg_path, seg_inputs))
    next_targets.sort(key=lambda t: t[0])
    return outcomes, next_targets


_NUMERIC_BIAS = 10**30


def _numeric_sort_key(record: bytes) -> bytes:
    value = int(record) + _NUMERIC_BIAS
    if not 0 <= value < 10**31:
        raise ValidationError(f"numeric key out of range: {record[:40]!r}")
    return b"%031d" % value


def _engine_partitioner(
    plan: sampling.PartitionPlan, key_mode: KeyMode
) -> tuple[Callable[[bytes, int], int], int]:
    """Range partitioner over engine sort keys, collapsed to the reducer count."""
    nseg = plan.sites.segment_count
    reducers = plan.reducer_count
    if key_mode == KeyMode.NUMERIC:
        tokens = [_numeric_sort_key(s) for s in plan.sites.sites]
    else:
        tokens = list(plan.sites.sites)
    if nseg <= reducers:
        def part(key: bytes, n: int) -> int:
            return bisect_left(tokens, key)
    else:
        def part(key: bytes, n: int) -> int:
            return bisect_left(tokens, key) * n // nseg
    return part, reducers


def _engine_transforms(key_mode: KeyMode):
    if key_mode == KeyMode.NUMERIC:
        def mapper(record: bytes):
            return ((_numeric_sort_key(record), record),)

        def reducer(key: bytes, values):
            return values
    else:
        mapper = engine.identity_mapper
        reducer = engine.identity_reducer
    return mapper, reducer


def run_shuffle_fallback(
    files: Sequence[Path], cfg: JobConfig, parent_path: SegmentPath
) -> list[SegmentOutcome]:
    """Finish one oversized target with an engine job instead of recursion.

    The shuffle has no in-memory threshold; its budget is the configured
    threshold floored at 16MiB so degenerate thresholds cannot starve it.
    Part file k becomes result file <parent>_k.
    """
    total = sum(os.path.getsize(p) for p in files)
    summary = sampling.take_samples(files, cfg.sampling_plan)
    plan = sampling.make_partition_plan(
        summary,
        cfg.block_size,
        max(total, 1),
        cfg.max_reducers,
        key_mode=cfg.key_mode,
        index_rule=cfg.site_rule,
    )
    partitioner, reducers = _engine_partitioner(plan, cfg.key_mode)
    mapper, reducer = _engine_transforms(cfg.key_mode)
    out_dir = _segment_middle_dir(cfg.middle_dir, parent_path) / "fallback-out"
    spec = engine.JobSpec(
        mapper=mapper,
        reducer=reducer,
        partitioner=partitioner,
        reducer_count=reducers,
        memory_budget=max(cfg.memory_threshold, FALLBACK_MIN_BUDGET),
        output_dir=out_dir,
        workers=cfg.workers,
        scratch_dir=cfg.scratch_dir,
        keep_temp=cfg.keep_temp,
    )
    parts = engine.run_job(spec, files)
    outcomes = []
    for k, part in enumerate(parts):
        dest = cfg.result_dir / render_segment_path(parent_path + (k,))
        shutil.move(str(part), dest)
        outcomes.append(SegmentOutcome(parent_path + (k,), dest))
    if not cfg.keep_temp:
        shutil.rmtree(out_dir, ignore_errors=True)
    return outcomes


def run_partition_sort(inputs: Sequence[Path | str], cfg: JobConfig) -> SortReport:
    """Sort newline-delimited records from inputs into cfg.result_dir.

    Runs up to cfg.max_file_rounds partition rounds, then at most one engine
    fallback round, so at most max_file_rounds + 1 rounds execute. The result
    directory must be empty or absent. Middle files are removed as segments
    complete and the whole middle tree is removed on success unless keep_temp.
    """
    t0 = time.perf_counter()
    paths = [Path(p) for p in inputs]
    for p in paths:
        if not p.is_file():
            raise ValidationError(f"input not found: {p}")
    if cfg.result_dir.exists() and any(cfg.result_dir.iterdir()):
        raise ValidationError(f"result directory {cfg.result_dir} must be empty or absent")
    cfg.result_dir.mkdir(parents=True, exist_ok=True)
    cfg.middle_dir.mkdir(parents=True, exist_ok=True)

    stats = _RunStats()
    registry = _NameRegistry()
    runner = _TaskRunner(cfg.workers)
    segments_per_round: list[int] = []
    deferred_per_round: list[int] = []
    sorted_outcomes: list[SegmentOutcome] = []
    rounds = 0
    targets: list[tuple[SegmentPath, Sequence[Path]]] = [((), paths)]
    try:
        while targets and rounds < cfg.max_file_rounds:
            rounds += 1
            outcomes, targets = run_round(
                targets, cfg, rounds, registry=registry, stats=stats, runner=runner
            )
            segments_per_round.append(len(outcomes))
            deferred_per_round.append(sum(1 for o in outcomes if o.deferred))
            sorted_outcomes.extend(o for o in outcomes if not o.deferred)
            log.info(
                "round %d: %d segments, %d deferred",
                rounds,
                segments_per_round[-1],
                deferred_per_round[-1],
            )
        if targets:
            rounds += 1
            fallback_count = 0
            for parent, files in targets:
                outcomes = run_shuffle_fallback(list(files), cfg, parent)
                fallback_count += len(outcomes)
                sorted_outcomes.extend(outcomes)
            segments_per_round.append(fallback_count)
            deferred_per_round.append(0)
            log.info("fallback round %d: %d segments", rounds, fallback_count)
    finally:
        runner.close()

    bytes_sorted = sum(
        os.path.getsize(o.result_path) for o in sorted_outcomes if o.result_path is not None
    )
    if not cfg.keep_temp:
        shutil.rmtree(cfg.middle_dir, ignore_errors=True)
    return SortReport(
        rounds_executed=rounds,
        segments_per_round=segments_per_round or [0],
        deferred_per_round=deferred_per_round or [0],
        bytes_sorted=bytes_sorted,
        elapsed_s=time.perf_counter() - t0,
        result_dir=cfg.result_dir,
        guard_segments=stats.guard_segments,
        max_loaded_bytes=stats.max_loaded_bytes,
    )


def baseline_shuffle_sort(
    inputs: Sequence[Path | str], cfg: JobConfig, *, hash_partition: bool = False
) -> Path:
    """Sort with a single engine job: identity map, range partition, identity
    reduce. Part files concatenated in index order are globally sorted because
    the partitioner is monotone in the key. The shuffle buffers at most
    cfg.memory_threshold bytes, so a threshold below one record fails here
    while the multi-round sorter can still defer its way through.

    hash_partition swaps in a modulo-of-checksum partitioner to demonstrate
    load imbalance; its part files are not globally ordered.
    """
    paths = [Path(p) for p in inputs]
    for p in paths:
        if not p.is_file():
            raise ValidationError(f"input not found: {p}")
    if cfg.result_dir.exists() and any(cfg.result_dir.iterdir()):
        raise ValidationError(f"result directory {cfg.result_dir} must be empty or absent")
    total = sum(os.path.getsize(p) for p in paths)
    summary = sampling.take_samples(paths, cfg.sampling_plan)
    plan = sampling.make_partition_plan(
        summary,
        cfg.block_size,
        max(total, 1),
        cfg.max_reducers,
        key_mode=cfg.key_mode,
        index_rule=cfg.site_rule,
    )
    if hash_partition:
        partitioner = _checksum_partitioner
        reducers = plan.reducer_count
    else:
        partitioner, reducers = _engine_partitioner(plan, cfg.key_mode)
    mapper, reducer = _engine_transforms(cfg.key_mode)
    spec = engine.JobSpec(
        mapper=mapper,
        reducer=reducer,
        partitioner=partitioner,
        reducer_count=reducers,
        memory_budget=cfg.memory_threshold,
        output_dir=cfg.result_dir,
        workers=cfg.workers,
        scratch_dir=cfg.scratch_dir,
        keep_temp=cfg.keep_temp,
    )
    engine.run_job(spec, paths)
    return cfg.result_dir


def _checksum_partitioner(key: bytes, n: int) -> int:
    return zlib.crc32(key) % n


def ordered_result_files(result_dir: Path | str) -> list[Path]:
    """Result files in global key order; rejects overlap and foreign names."""
    result_dir = Path(result_dir)
    entries = [p for p in result_dir.iterdir() if p.is_file()]
    parsed = sorted((parse_segment_path(p.name), p) for p in entries)
    for (a, _), (b, _) in zip(parsed, parsed[1:]):
        if b[: len(a)] == a:
            raise SortError(
                f"result files overlap: {render_segment_path(a)} is a parent of {render_segment_path(b)}"
            )
    return [p for _, p in parsed]


def assemble_result(result_dir: Path | str, output_path: Path | str) -> Path:
    """Concatenate result files in segment order into one sorted file."""
    output_path = Path(output_path)
    _concat_into(ordered_result_files(result_dir), output_path)
    return output_path
