"""Command line entry points: gen, sort, verify, bench.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import os
import shutil
import statistics
import sys
import time
from pathlib import Path

from .datasets import DatasetSpec, generate_dataset, parse_manifest
from .partition_sort import (
    JobConfig,
    baseline_shuffle_sort,
    ordered_result_files,
    run_partition_sort,
)
from .sampling import SamplingPlan, SiteIndexRule
from .util import (
    KeyMode,
    SortError,
    ValidationError,
    VerificationFailure,
    format_size,
    parse_size,
)
from .verify import verify_sorted

BENCH_CSV_HEADER = "size,baseline_s,new_partition_s,rounds,verified"


def _size_arg(text: str) -> int:
    try:
        return parse_size(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size_list_arg(text: str) -> list[int]:
    return [_size_arg(part) for part in text.split(",") if part.strip()]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--block-size", type=_size_arg, default="20M", metavar="BYTES",
                        help="target bytes per range segment (K/M/G suffixes allowed)")
    parser.add_argument("--threshold", type=_size_arg, default=None, metavar="BYTES",
                        help="in-memory sort ceiling per segment; defaults to --block-size")
    parser.add_argument("--max-reducers", type=int, default=64, metavar="N",
                        help="upper bound on reduce tasks per round")
    parser.add_argument("--max-file-rounds", type=int, default=2, metavar="N",
                        help="partition rounds before the shuffle fallback finishes the job")
    parser.add_argument("--sample-sites", type=int, default=3, metavar="N",
                        help="sample chunks read per input file")
    parser.add_argument("--sample-chunk", type=_size_arg, default="4K", metavar="BYTES",
                        help="bytes per sample chunk")
    parser.add_argument("--seed", type=int, default=1,
                        help="seed for intermediate file names")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1, metavar="N",
                        help="task threads; 1 runs every task inline")
    parser.add_argument("--key-mode", choices=[m.value for m in KeyMode], default="lex",
                        help="record ordering: raw bytes or decimal value")
    parser.add_argument("--site-rule", choices=[r.value for r in SiteIndexRule],
                        default=SiteIndexRule.STRICT_MULTIPLES.value,
                        help="which sorted-sample indices become division sites")
    parser.add_argument("--keep-temp", action="store_true",
                        help="keep middle files and shuffle spills for inspection")


def _config_from_args(args: argparse.Namespace, out_dir: Path) -> JobConfig:
    scratch = os.environ.get("SORT_SCRATCH_DIR")
    return JobConfig(
        middle_dir=out_dir / "middle",
        result_dir=out_dir / "result",
        block_size=args.block_size if isinstance(args.block_size, int) else parse_size(args.block_size),
        memory_threshold=args.threshold,
        max_reducers=args.max_reducers,
        max_file_rounds=args.max_file_rounds,
        sampling_plan=SamplingPlan(sites_per_file=args.sample_sites, chunk_bytes=args.sample_chunk),
        seed=args.seed,
        key_mode=KeyMode(args.key_mode),
        site_rule=SiteIndexRule(args.site_rule),
        workers=args.workers,
        keep_temp=args.keep_temp,
        scratch_dir=Path(scratch) if scratch else None,
    )


def cmd_gen(args: argparse.Namespace) -> int:
    if args.out is None:
        args.out = f"dataset-{format_size(args.size)}-{args.dist.replace(':', '')}-s{args.seed}.txt"
    spec = DatasetSpec(
        total_bytes=args.size,
        distribution=args.dist,
        key_width=args.key_width,
        seed=args.seed,
    )
    manifest = generate_dataset(spec, args.out)
    print(f"dataset={args.out}")
    print(f"manifest={manifest}")
    return 0


def cmd_sort(args: argparse.Namespace) -> int:
    out_dir = Path(args.out) if args.out else Path(str(args.input[0]) + ".out")
    cfg = _config_from_args(args, out_dir)
    if args.mode == "partition":
        report = run_partition_sort(args.input, cfg)
        for line in report.lines():
            print(line)
    else:
        t0 = time.perf_counter()
        result_dir = baseline_shuffle_sort(args.input, cfg, hash_partition=args.hash_partition)
        parts = sorted(result_dir.iterdir())
        print(f"mode=shuffle part_files={len(parts)}")
        print(f"elapsed_s={time.perf_counter() - t0:.3f}")
        print(f"result_dir={result_dir}")
    return 0


def _verify_target_paths(target: Path) -> list[Path]:
    if target.is_dir():
        names = [p.name for p in target.iterdir() if p.is_file()]
        if names and all(name.startswith("part-r-") for name in names):
            return sorted(p for p in target.iterdir() if p.is_file())
        return ordered_result_files(target)
    return [target]


def cmd_verify(args: argparse.Namespace) -> int:
    target = Path(args.target)
    if not target.exists():
        raise ValidationError(f"verify target not found: {target}")
    paths = _verify_target_paths(target)
    result = verify_sorted(paths, key_mode=KeyMode(args.key_mode))
    print(f"records={result.record_count}")
    print(f"sorted={str(result.is_sorted).lower()}")
    if result.first_violation_offset is not None:
        print(f"first_violation_offset={result.first_violation_offset}")
    print(f"multiset_hash={result.multiset_hash}")
    ok = result.is_sorted
    if args.manifest:
        expected = parse_manifest(args.manifest).get("multiset_hash")
        match = expected == result.multiset_hash
        print(f"manifest_match={str(match).lower()}")
        ok = ok and match
    return 0 if ok else 1


def _bench_one(mode: str, data: Path, work: Path, args: argparse.Namespace) -> tuple[float, int | None, list[Path]]:
    """Run one mode once; returns (seconds, partition rounds, result files)."""
    if work.exists():
        shutil.rmtree(work)
    cfg = _config_from_args(args, work)
    t0 = time.perf_counter()
    if mode == "partition":
        report = run_partition_sort([data], cfg)
        elapsed = time.perf_counter() - t0
        return elapsed, report.rounds_executed, ordered_result_files(cfg.result_dir)
    baseline_shuffle_sort([data], cfg)
    elapsed = time.perf_counter() - t0
    return elapsed, None, sorted(cfg.result_dir.iterdir())


def cmd_bench(args: argparse.Namespace) -> int:
    if args.repeat < 1:
        raise ValidationError("--repeat must be at least 1")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    work_root = out_dir / "work"
    sizes = sorted(set(args.size))
    rows = []
    verification_failed = False

    for size in sizes:
        label = format_size(size)
        data = work_root / f"data-{label}.txt"
        spec = DatasetSpec(total_bytes=size, distribution=args.dist, seed=args.seed)
        manifest_path = generate_dataset(spec, data)
        expected_hash = parse_manifest(manifest_path)["multiset_hash"]

        cells: dict[str, str] = {}
        rounds: int | None = None
        mode_verified: list[bool] = []
        for mode, column in (("shuffle", "baseline_s"), ("partition", "new_partition_s")):
            work = work_root / f"{label}-{mode}"
            times = []
            files: list[Path] = []
            failed = False
            for _ in range(args.repeat):
                try:
                    elapsed, mode_rounds, files = _bench_one(mode, data, work, args)
                except (SortError, OSError) as exc:
                    print(f"[{label}] {mode} FAILED: {exc}", file=sys.stderr)
                    failed = True
                    break
                times.append(elapsed)
                if mode_rounds is not None:
                    rounds = mode_rounds
            if failed:
                cells[column] = "FAILED"
                continue
            cells[column] = f"{statistics.median(times):.3f}"
            check = verify_sorted(files, key_mode=KeyMode(args.key_mode))
            ok = check.is_sorted and check.multiset_hash == expected_hash
            mode_verified.append(ok)
            if not ok:
                verification_failed = True
                print(f"[{label}] {mode} output failed verification", file=sys.stderr)

        verified = bool(mode_verified) and all(mode_verified)
        rows.append(
            {
                "size": size,
                "baseline_s": cells.get("baseline_s", "FAILED"),
                "new_partition_s": cells.get("new_partition_s", "FAILED"),
                "rounds": "" if rounds is None else str(rounds),
                "verified": str(verified).lower(),
            }
        )
        if not args.keep_temp:
            shutil.rmtree(work_root, ignore_errors=True)

    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w") as f:
        f.write(BENCH_CSV_HEADER + "\n")
        for row in rows:
            f.write(
                f"{row['size']},{row['baseline_s']},{row['new_partition_s']},{row['rounds']},{row['verified']}\n"
            )

    widths = (10, 12, 16, 7, 9)
    headers = ("size", "baseline_s", "new_partition_s", "rounds", "verified")
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    table = [fmt.format(*headers)]
    for row in rows:
        table.append(
            fmt.format(
                format_size(row["size"]),
                "---" if row["baseline_s"] == "FAILED" else row["baseline_s"],
                "---" if row["new_partition_s"] == "FAILED" else row["new_partition_s"],
                row["rounds"] or "-",
                row["verified"],
            )
        )
    print("\n".join(table))
    print(f"\ncsv={csv_path}")
    print("note: timings are medians of wall-clock runs on this machine; compare trends, not absolutes")
    return 1 if verification_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rangesort",
        description="Range-partitioned external sorting for newline-delimited records.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser(
        "gen",
        help="generate a synthetic dataset and its manifest",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_gen.add_argument("--size", type=_size_arg, required=True, metavar="BYTES",
                       help="total dataset bytes (K/M/G suffixes allowed)")
    p_gen.add_argument("--dist", default="uniform",
                       help="uniform, zipf:S, dup:F, sorted or reversed")
    p_gen.add_argument("--key-width", type=int, default=10, metavar="DIGITS",
                       help="decimal digits per key")
    p_gen.add_argument("--seed", type=int, default=1, help="generator seed")
    p_gen.add_argument("--out", default=None, metavar="PATH",
                       help="dataset path; derived from size/dist/seed when omitted")
    p_gen.set_defaults(func=cmd_gen)

    p_sort = sub.add_parser(
        "sort",
        help="sort newline-delimited files",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_sort.add_argument("input", nargs="+", type=Path, help="input files")
    p_sort.add_argument("--mode", choices=["partition", "shuffle"], default="partition",
                        help="multi-round range partitioning, or one engine shuffle job")
    p_sort.add_argument("--out", default=None, metavar="DIR",
                        help="output directory; <first input>.out when omitted")
    p_sort.add_argument("--hash-partition", action="store_true",
                        help="shuffle mode only: checksum partitioner (demonstrates imbalance)")
    _add_config_flags(p_sort)
    p_sort.set_defaults(func=cmd_sort)

    p_verify = sub.add_parser(
        "verify",
        help="check order and record conservation of a file or result directory",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_verify.add_argument("target", help="file, result directory, or part-file directory")
    p_verify.add_argument("--manifest", default=None, metavar="PATH",
                          help="compare the stream digest against this manifest")
    p_verify.add_argument("--key-mode", choices=[m.value for m in KeyMode], default="lex",
                          help="record ordering: raw bytes or decimal value")
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser(
        "bench",
        help="time both sort modes across dataset sizes",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_bench.add_argument("--size", type=_size_list_arg, required=True, metavar="LIST",
                         help="comma-separated dataset sizes, e.g. 30M,60M,100M")
    p_bench.add_argument("--dist", default="uniform",
                         help="dataset distribution for every size")
    p_bench.add_argument("--repeat", type=int, default=3, metavar="N",
                         help="runs per mode; the median is reported")
    p_bench.add_argument("--out", required=True, metavar="DIR",
                         help="directory for bench.csv and working files")
    _add_config_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 1
    except SortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
