"""Multi-round partition sort: naming, routing, deferral, recursion, assembly."""
from __future__ import annotations

import os
import random
from collections import Counter
from pathlib import Path

import pytest

from rangesort.partition_sort import (
    NAME_PATTERN,
    IntermediateFile,
    JobConfig,
    SegmentOutcome,
    assemble_result,
    baseline_shuffle_sort,
    gen_intermediate_name,
    map_partition_task,
    ordered_result_files,
    parse_segment_path,
    partition_fn,
    reduce_segment_task,
    render_segment_path,
    run_partition_sort,
    run_shuffle_fallback,
)
from rangesort.sampling import DivisionSites, SamplingPlan
from rangesort.util import InputSplit, KeyMode, SortError, ValidationError
from rangesort.verify import verify_sorted

from conftest import read_lines, reference_segment, write_lines


def small_config(tmp_path, **kw) -> JobConfig:
    defaults = dict(
        middle_dir=tmp_path / "middle",
        result_dir=tmp_path / "result",
        block_size=2048,
        memory_threshold=4096,
        sampling_plan=SamplingPlan(sites_per_file=3, chunk_bytes=256),
        scratch_dir=tmp_path / "scratch",
        seed=7,
    )
    defaults.update(kw)
    return JobConfig(**defaults)


def split_for(path: Path) -> InputSplit:
    return InputSplit(Path(path), 0, os.path.getsize(path))


class TestSegmentPaths:
    def test_render(self):
        assert render_segment_path(()) == ""
        assert render_segment_path((3,)) == "3"
        assert render_segment_path((1, 2, 3)) == "1_2_3"

    def test_parse(self):
        assert parse_segment_path("0") == (0,)
        assert parse_segment_path("1_2") == (1, 2)
        assert parse_segment_path("10_0_7") == (10, 0, 7)

    def test_roundtrip(self, rng):
        for _ in range(50):
            path = tuple(rng.randrange(100) for _ in range(rng.randint(1, 5)))
            assert parse_segment_path(render_segment_path(path)) == path

    def test_parse_rejects_garbage(self):
        for bad in ("", "x", "1__2", "_1", "1_", "1-2", "part-r-00000"):
            with pytest.raises(SortError):
                parse_segment_path(bad)


class TestIntermediateNames:
    def test_fixed_seed_value(self):
        assert gen_intermediate_name(random.Random(123), set()) == "_0.05236"

    def test_pattern_and_uniqueness(self, rng):
        seen: set[str] = set()
        r = random.Random(42)
        for _ in range(5000):
            name = gen_intermediate_name(r, seen)
            assert NAME_PATTERN.match(name), name
            assert name not in seen
            seen.add(name)

    def test_conflict_forces_redraw(self):
        class TwoDraws:
            def __init__(self):
                self.values = iter([0.11111, 0.11111, 0.22222])

            def random(self):
                return next(self.values)

        assert gen_intermediate_name(TwoDraws(), {"_0.11111"}) == "_0.22222"

    def test_gives_up_after_bounded_attempts(self):
        class Stuck:
            def random(self):
                return 0.5

        with pytest.raises(SortError, match="64"):
            gen_intermediate_name(Stuck(), {"_0.50000"})


class TestPartitionFn:
    def test_modulo_placement(self):
        assert partition_fn(2, 6) == 2
        assert partition_fn(8, 6) == 2
        assert partition_fn(5, 1) == 0

    def test_validation(self):
        with pytest.raises(ValidationError):
            partition_fn(0, 0)
        with pytest.raises(ValidationError):
            partition_fn(-1, 3)


class TestMapPartitionTask:
    def test_routes_boundary_keys_down(self, tmp_path):
        src = write_lines(tmp_path / "in", [b"10", b"23", b"30", b"42", b"50"])
        middle = tmp_path / "middle"
        out = map_partition_task(
            split_for(src), DivisionSites((b"23", b"42")), middle, random.Random(1)
        )
        assert [seg for seg, _ in out] == [0, 1, 2]
        by_seg = {seg: read_lines(path) for seg, path in out}
        assert by_seg[0] == [b"10", b"23"]
        assert by_seg[1] == [b"30", b"42"]
        assert by_seg[2] == [b"50"]
        for seg, path in out:
            assert path.parent == middle / str(seg)
            assert NAME_PATTERN.match(path.name)

    def test_empty_segments_leave_no_files(self, tmp_path):
        src = write_lines(tmp_path / "in", [b"zz", b"zx"])
        middle = tmp_path / "middle"
        out = map_partition_task(
            split_for(src), DivisionSites((b"a", b"b")), middle, random.Random(1)
        )
        assert [seg for seg, _ in out] == [2]
        assert list((middle / "0").iterdir()) == []
        assert list((middle / "1").iterdir()) == []

    def test_random_routing_matches_reference(self, tmp_path, rng):
        records = [("%06d" % rng.randrange(10**6)).encode() for _ in range(3000)]
        src = write_lines(tmp_path / "in", records)
        sites = tuple(sorted({("%06d" % rng.randrange(10**6)).encode() for _ in range(9)}))
        out = map_partition_task(
            split_for(src), DivisionSites(sites), tmp_path / "mid", random.Random(3)
        )
        seen: Counter = Counter()
        for seg, path in out:
            contents = read_lines(path)
            seen.update(contents)
            for record in contents:
                assert reference_segment(record, sites) == seg
        assert seen == Counter(records)

    def test_numeric_mode(self, tmp_path):
        src = write_lines(tmp_path / "in", [b"7", b"9", b"10", b"100"])
        out = map_partition_task(
            split_for(src),
            DivisionSites((b"9", b"99")),
            tmp_path / "mid",
            random.Random(1),
            key_mode=KeyMode.NUMERIC,
        )
        by_seg = {seg: read_lines(path) for seg, path in out}
        assert by_seg[0] == [b"7", b"9"]
        assert by_seg[1] == [b"10"]
        assert by_seg[2] == [b"100"]

    def test_oversized_record_names_offset(self, tmp_path):
        src = write_lines(tmp_path / "in", [b"ok", b"y" * 64, b"ok"])
        with pytest.raises(SortError, match="offset 3"):
            map_partition_task(
                split_for(src),
                DivisionSites(()),
                tmp_path / "mid",
                random.Random(1),
                max_record_bytes=32,
            )


def intermediate(path: Path, segment: int = 0) -> IntermediateFile:
    return IntermediateFile(segment, path, os.path.getsize(path))


class TestReduceSegmentTask:
    def test_small_segment_sorted_in_memory(self, tmp_path):
        cfg = small_config(tmp_path)
        cfg.result_dir.mkdir(parents=True)
        f1 = write_lines(tmp_path / "m1", [b"c", b"a"])
        f2 = write_lines(tmp_path / "m2", [b"b"])
        deferred = tmp_path / "deferred"
        outcome = reduce_segment_task(
            2, [intermediate(f1, 2), intermediate(f2, 2)], cfg, (1,), deferred
        )
        assert not outcome.deferred
        assert outcome.segment == (1, 2)
        assert outcome.result_path == cfg.result_dir / "1_2"
        assert read_lines(outcome.result_path) == [b"a", b"b", b"c"]
        assert not deferred.exists()

    def test_oversized_multi_key_segment_defers(self, tmp_path):
        cfg = small_config(tmp_path, block_size=8, memory_threshold=8)
        cfg.result_dir.mkdir(parents=True)
        f = write_lines(tmp_path / "m", [b"aaaa", b"bbbb", b"cccc"])
        deferred = tmp_path / "deferred"
        deferred.touch()
        outcome = reduce_segment_task(4, [intermediate(f, 4)], cfg, (), deferred)
        assert outcome.deferred
        assert outcome.result_path is None
        assert deferred.read_bytes() == b"4\n"
        assert not (cfg.result_dir / "4").exists()

    def test_deferred_identifiers_append_in_order(self, tmp_path):
        cfg = small_config(tmp_path, block_size=8, memory_threshold=8)
        cfg.result_dir.mkdir(parents=True)
        f = write_lines(tmp_path / "m", [b"aaaa", b"bbbb", b"cccc"])
        deferred = tmp_path / "part-r-00002"
        deferred.touch()
        reduce_segment_task(2, [intermediate(f, 2)], cfg, (), deferred)
        reduce_segment_task(8, [intermediate(f, 8)], cfg, (), deferred)
        assert deferred.read_bytes() == b"2\n8\n"

    def test_oversized_single_key_segment_copied_by_guard(self, tmp_path):
        from rangesort.partition_sort import _RunStats

        cfg = small_config(tmp_path, block_size=8, memory_threshold=8)
        cfg.result_dir.mkdir(parents=True)
        f1 = write_lines(tmp_path / "m1", [b"same"] * 4)
        f2 = write_lines(tmp_path / "m2", [b"same"] * 3)
        stats = _RunStats()
        deferred = tmp_path / "deferred"
        outcome = reduce_segment_task(
            0, [intermediate(f1), intermediate(f2)], cfg, (), deferred, stats=stats
        )
        assert not outcome.deferred
        assert read_lines(outcome.result_path) == [b"same"] * 7
        assert stats.guard_segments == 1
        assert not deferred.exists()


class TestShuffleFallback:
    def test_nested_parent_names_and_order(self, tmp_path, rng):
        cfg = small_config(tmp_path, block_size=512, memory_threshold=1024, max_reducers=4)
        cfg.result_dir.mkdir(parents=True)
        records = [("%05d" % rng.randrange(10**5)).encode() for _ in range(600)]
        f = write_lines(tmp_path / "middle" / "1" / "2" / "data", records)
        outcomes = run_shuffle_fallback([f], cfg, (1, 2))
        names = [o.result_path.name for o in outcomes]
        assert len(names) > 1
        assert names == [f"1_2_{k}" for k in range(len(names))]
        combined = [r for o in outcomes for r in read_lines(o.result_path)]
        assert combined == sorted(records)

    def test_single_reducer_plan(self, tmp_path):
        cfg = small_config(tmp_path, max_reducers=1)
        cfg.result_dir.mkdir(parents=True)
        f = write_lines(tmp_path / "middle" / "0" / "data", [b"b", b"a"])
        outcomes = run_shuffle_fallback([f], cfg, (0,))
        assert [o.result_path.name for o in outcomes] == ["0_0"]
        assert read_lines(outcomes[0].result_path) == [b"a", b"b"]


class TestRunPartitionSort:
    def test_single_round_when_everything_fits(self, tmp_path, rng):
        records = [("%06d" % rng.randrange(10**6)).encode() for _ in range(2000)]
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(tmp_path, block_size=4096, memory_threshold=1 << 20)
        report = run_partition_sort([src], cfg)
        assert report.rounds_executed == 1
        assert report.deferred_per_round == [0]
        assert report.segments_per_round[0] >= 2
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == sorted(records)
        assert not cfg.middle_dir.exists()

    def test_multi_round_produces_nested_names(self, tmp_path, rng):
        # Clustered keys make round-1 sampling miss the dense range, forcing
        # at least one oversized segment into round 2.
        records = [b"%07d" % rng.randrange(500) for _ in range(4000)]
        records += [b"%07d" % (9_000_000 + rng.randrange(10**6)) for _ in range(400)]
        rng.shuffle(records)
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(tmp_path, block_size=2048, memory_threshold=2048)
        report = run_partition_sort([src], cfg)
        assert report.rounds_executed >= 2
        assert sum(report.deferred_per_round) >= 1
        assert report.deferred_per_round[-1] == 0
        nested = [p for p in cfg.result_dir.iterdir() if "_" in p.name]
        assert nested
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == sorted(records)

    def test_fallback_round_finishes_after_max_file_rounds(self, tmp_path, rng):
        records = [b"%07d" % rng.randrange(200) for _ in range(4000)]
        rng.shuffle(records)
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(
            tmp_path, block_size=1024, memory_threshold=1024, max_file_rounds=1
        )
        report = run_partition_sort([src], cfg)
        assert report.rounds_executed <= cfg.max_file_rounds + 1
        assert report.deferred_per_round[-1] == 0
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == sorted(records)

    def test_single_key_dataset_guard_terminates_round_one(self, tmp_path):
        records = [b"0001111"] * 3000
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(tmp_path, block_size=1024, memory_threshold=1024)
        report = run_partition_sort([src], cfg)
        assert report.rounds_executed == 1
        assert report.guard_segments >= 1
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == records

    def test_empty_input(self, tmp_path):
        src = tmp_path / "in"
        src.write_bytes(b"")
        cfg = small_config(tmp_path)
        report = run_partition_sort([src], cfg)
        assert report.rounds_executed == 1
        assert report.segments_per_round == [0]
        assert report.deferred_per_round == [0]
        assert list(cfg.result_dir.iterdir()) == []

    def test_multiple_input_files(self, tmp_path, rng):
        recs_a = [("%05d" % rng.randrange(10**5)).encode() for _ in range(700)]
        recs_b = [("%05d" % rng.randrange(10**5)).encode() for _ in range(900)]
        a = write_lines(tmp_path / "a", recs_a)
        b = write_lines(tmp_path / "b", recs_b)
        cfg = small_config(tmp_path, block_size=2048, memory_threshold=1 << 20)
        run_partition_sort([a, b], cfg)
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == sorted(recs_a + recs_b)

    def test_threshold_discipline(self, tmp_path, rng):
        records = [b"%07d" % rng.randrange(3000) for _ in range(5000)]
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(tmp_path, block_size=1024, memory_threshold=2048)
        report = run_partition_sort([src], cfg)
        assert report.max_loaded_bytes <= cfg.memory_threshold
        assembled = assemble_result(cfg.result_dir, tmp_path / "all")
        assert read_lines(assembled) == sorted(records)

    def test_intermediates_respect_ranges(self, tmp_path, rng):
        from rangesort.sampling import make_partition_plan, take_samples

        records = [("%06d" % rng.randrange(10**6)).encode() for _ in range(3000)]
        src = write_lines(tmp_path / "in", records)
        cfg = small_config(tmp_path, block_size=2048, memory_threshold=1 << 20, keep_temp=True)
        run_partition_sort([src], cfg)
        summary = take_samples([src], cfg.sampling_plan)
        plan = make_partition_plan(
            summary, cfg.block_size, os.path.getsize(src), cfg.max_reducers
        )
        sites = plan.sites.sites
        checked = 0
        for seg_dir in cfg.middle_dir.iterdir():
            if not seg_dir.is_dir() or not seg_dir.name.isdigit():
                continue
            seg = int(seg_dir.name)
            for f in seg_dir.iterdir():
                if not f.is_file():
                    continue
                for record in read_lines(f):
                    assert reference_segment(record, sites) == seg
                    checked += 1
        assert checked == len(records)

    def test_deterministic_trees_same_seed(self, tmp_path, rng):
        records = [b"%07d" % rng.randrange(800) for _ in range(3000)]
        src = write_lines(tmp_path / "in", records)

        def run(tag: str) -> dict[str, bytes]:
            cfg = small_config(
                tmp_path / tag,
                block_size=1024,
                memory_threshold=1024,
                keep_temp=True,
                workers=1,
                seed=7,
            )
            run_partition_sort([src], cfg)
            tree = {}
            for base in (cfg.middle_dir, cfg.result_dir):
                for p in sorted(base.rglob("*")):
                    rel = str(p.relative_to(tmp_path / tag))
                    tree[rel] = p.read_bytes() if p.is_file() else b"<dir>"
            return tree

        assert run("one") == run("two")

    def test_nonempty_result_dir_rejected(self, tmp_path):
        src = write_lines(tmp_path / "in", [b"a"])
        cfg = small_config(tmp_path)
        cfg.result_dir.mkdir(parents=True)
        (cfg.result_dir / "0").write_bytes(b"old")
        with pytest.raises(ValidationError, match="empty or absent"):
            run_partition_sort([src], cfg)

    def test_missing_input_rejected(self, tmp_path):
        cfg = small_config(tmp_path)
        with pytest.raises(ValidationError, match="not found"):
            run_partition_sort([tmp_path / "ghost"], cfg)

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            small_config(tmp_path, block_size=4096, memory_threshold=1024)
        with pytest.raises(ValidationError):
            small_config(tmp_path, max_file_rounds=0)
        with pytest.raises(ValidationError):
            small_config(tmp_path, workers=0)

    def test_matches_baseline_mode(self, tmp_path, rng):
        records = [("%08d" % rng.randrange(10**8)).encode() for _ in range(5000)]
        src = write_lines(tmp_path / "in", records)
        p_cfg = small_config(tmp_path / "p", block_size=4096, memory_threshold=8192)
        run_partition_sort([src], p_cfg)
        partition_bytes = assemble_result(p_cfg.result_dir, tmp_path / "p.all").read_bytes()
        s_cfg = small_config(tmp_path / "s", block_size=4096, memory_threshold=8192)
        baseline_shuffle_sort([src], s_cfg)
        shuffle_bytes = b"".join(
            p.read_bytes() for p in sorted(s_cfg.result_dir.iterdir())
        )
        assert partition_bytes == shuffle_bytes


class TestResultAssembly:
    def make_results(self, tmp_path, names: list[str]) -> Path:
        d = tmp_path / "result"
        d.mkdir()
        for name in names:
            (d / name).write_bytes(name.encode() + b"\n")
        return d

    def test_orders_by_segment_tuple(self, tmp_path):
        d = self.make_results(tmp_path, ["0", "1_2_0", "1_2_1", "1_0", "2"])
        assert [p.name for p in ordered_result_files(d)] == ["0", "1_0", "1_2_0", "1_2_1", "2"]

    def test_numeric_not_lexicographic_component_order(self, tmp_path):
        d = self.make_results(tmp_path, ["2", "10", "1"])
        assert [p.name for p in ordered_result_files(d)] == ["1", "2", "10"]

    def test_foreign_name_rejected(self, tmp_path):
        d = self.make_results(tmp_path, ["0", "part-r-00000"])
        with pytest.raises(SortError, match="unparseable"):
            ordered_result_files(d)

    def test_parent_child_overlap_rejected(self, tmp_path):
        d = self.make_results(tmp_path, ["1", "1_0"])
        with pytest.raises(SortError, match="overlap"):
            ordered_result_files(d)

    def test_assemble_concatenates_in_order(self, tmp_path):
        d = self.make_results(tmp_path, ["1_1", "0", "1_0"])
        out = assemble_result(d, tmp_path / "all")
        assert out.read_bytes() == b"0\n1_0\n1_1\n"
