"""Range-partitioned external sorting for newline-delimited records."""

from .datasets import DatasetSpec, generate_dataset, parse_manifest
from .engine import ExternalMerger, JobError, JobSpec, KeyValue, SortedRun, run_job, shuffle
from .partition_sort import (
    JobConfig,
    SegmentOutcome,
    SortReport,
    assemble_result,
    baseline_shuffle_sort,
    ordered_result_files,
    run_partition_sort,
)
from .sampling import (
    DivisionSites,
    PartitionPlan,
    SamplingPlan,
    SampleSummary,
    SiteIndexRule,
    compute_divide_nums,
    compute_division_sites,
    make_partition_plan,
    reducer_count,
    segment_of,
    take_samples,
)
from .util import KeyMode, SortError, ValidationError, VerificationFailure, parse_size
from .verify import VerificationResult, multiset_digest, oracle_sort, verify_sorted

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec",
    "DivisionSites",
    "ExternalMerger",
    "JobConfig",
    "JobError",
    "JobSpec",
    "KeyMode",
    "KeyValue",
    "PartitionPlan",
    "SampleSummary",
    "SamplingPlan",
    "SegmentOutcome",
    "SiteIndexRule",
    "SortError",
    "SortReport",
    "SortedRun",
    "ValidationError",
    "VerificationFailure",
    "VerificationResult",
    "assemble_result",
    "baseline_shuffle_sort",
    "compute_divide_nums",
    "compute_division_sites",
    "generate_dataset",
    "make_partition_plan",
    "multiset_digest",
    "oracle_sort",
    "ordered_result_files",
    "parse_manifest",
    "parse_size",
    "reducer_count",
    "run_job",
    "run_partition_sort",
    "segment_of",
    "shuffle",
    "take_samples",
    "verify_sorted",
]
