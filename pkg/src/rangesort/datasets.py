"""Synthetic benchmark datasets: fixed-width decimal keys, one per line.

Every generator is deterministic for a given DatasetSpec (including the seed)
and writes a manifest next to the data file recording the generation
parameters, the record count and the multiset digest, so later verification
needs no re-read of the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .util import ValidationError
from .verify import _DIGEST_MOD, format_digest, record_hash

ZIPF_UNIVERSE = 1 << 16
_SCATTER_MULTIPLIER = 2654435761
_SCATTER_OFFSET = 40503
_CHUNK_RECORDS = 1 << 20
_FULL_MATERIALIZE_LIMIT = 1 << 28  # sorted/reversed hold every value in memory


def _parse_distribution(text: str) -> tuple[str, float | None]:
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name in ("uniform", "sorted", "reversed"):
        if arg:
            raise ValidationError(f"distribution {name!r} takes no parameter")
        return name, None
    if name == "zipf":
        try:
            s = float(arg)
        except ValueError:
            raise ValidationError(f"zipf needs a numeric exponent, got {arg!r}") from None
        if s <= 0:
            raise ValidationError("zipf exponent must be positive")
        return name, s
    if name == "dup":
        try:
            f = float(arg)
        except ValueError:
            raise ValidationError(f"dup needs a hot-key fraction, got {arg!r}") from None
        if not 0 < f <= 1:
            raise ValidationError("dup hot-key fraction must be in (0, 1]")
        return name, f
    raise ValidationError(
        f"unknown distribution {text!r} (expected uniform, zipf:S, dup:F, sorted or reversed)"
    )


@dataclass(frozen=True)
class DatasetSpec:
    total_bytes: int
    distribution: str = "uniform"
    key_width: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_bytes < 0:
            raise ValidationError("total_bytes must be non-negative")
        if not 1 <= self.key_width <= 18:
            raise ValidationError("key_width must be between 1 and 18")
        _parse_distribution(self.distribution)

    @property
    def record_bytes(self) -> int:
        return self.key_width + 1

    @property
    def record_count(self) -> int:
        return self.total_bytes // self.record_bytes


def _render_lines(values: np.ndarray, width: int) -> bytes:
    """Zero-padded decimal digits plus newline, one row per value."""
    n = len(values)
    out = np.empty((n, width + 1), dtype=np.uint8)
    out[:, width] = 10
    rem = values.astype(np.int64, copy=True)
    for col in range(width - 1, -1, -1):
        rem, digit = np.divmod(rem, 10)
        out[:, col] = digit.astype(np.uint8) + 48
    return out.tobytes()


def _scatter(ranks: np.ndarray, domain: int) -> np.ndarray:
    # Spreads small ranks across the key domain so hot keys get cold neighbors.
    mixed = (ranks.astype(np.uint64) * _SCATTER_MULTIPLIER + _SCATTER_OFFSET) % domain
    return mixed.astype(np.int64)


def _value_chunks(spec: DatasetSpec, rng: np.random.Generator) -> Iterator[np.ndarray]:
    count = spec.record_count
    domain = 10**spec.key_width
    kind, param = _parse_distribution(spec.distribution)

    if kind in ("sorted", "reversed"):
        if count * 8 > _FULL_MATERIALIZE_LIMIT:
            raise ValidationError(f"{kind} datasets are limited to {_FULL_MATERIALIZE_LIMIT // 8} records")
        values = np.sort(rng.integers(0, domain, size=count, dtype=np.int64))
        if kind == "reversed":
            values = values[::-1]
        for start in range(0, count, _CHUNK_RECORDS):
            yield values[start : start + _CHUNK_RECORDS]
        return

    if kind == "zipf":
        universe = min(domain, ZIPF_UNIVERSE)
        weights = np.arange(1, universe + 1, dtype=np.float64) ** -param
        probs = weights / weights.sum()
    elif kind == "dup":
        hot_value = int(rng.integers(0, domain))

    done = 0
    while done < count:
        n = min(_CHUNK_RECORDS, count - done)
        if kind == "uniform":
            yield rng.integers(0, domain, size=n, dtype=np.int64)
        elif kind == "zipf":
            ranks = rng.choice(universe, size=n, p=probs)
            yield _scatter(ranks, domain)
        else:
            values = rng.integers(0, domain, size=n, dtype=np.int64)
            hot = rng.random(n) < param
            values[hot] = hot_value
            yield values
        done += n


def _digest_chunk(values: np.ndarray, width: int) -> int:
    unique, counts = np.unique(values, return_counts=True)
    lines = _render_lines(unique, width)
    stride = width + 1
    total = 0
    for i, c in enumerate(counts):
        record = lines[i * stride : i * stride + width]
        total += record_hash(record) * int(c)
    return total % _DIGEST_MOD


def generate_dataset(spec: DatasetSpec, path: Path | str) -> Path:
    """Write the dataset to path and its manifest to path + '.manifest'.

    Returns the manifest path. total_bytes is rounded down to a whole number
    of records; total_bytes=0 produces an empty file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    digest = 0
    written = 0
    with open(path, "wb") as out:
        for values in _value_chunks(spec, rng):
            out.write(_render_lines(values, spec.key_width))
            digest = (digest + _digest_chunk(values, spec.key_width)) % _DIGEST_MOD
            written += len(values)
    manifest = path.with_name(path.name + ".manifest")
    manifest.write_text(
        "\n".join(
            [
                f"path={path.name}",
                f"total_bytes={written * spec.record_bytes}",
                f"distribution={spec.distribution}",
                f"key_width={spec.key_width}",
                f"seed={spec.seed}",
                f"record_count={written}",
                f"multiset_hash={format_digest(digest)}",
            ]
        )
        + "\n"
    )
    return manifest


_INT_FIELDS = ("total_bytes", "key_width", "seed", "record_count")


def parse_manifest(path: Path | str) -> dict[str, object]:
    out: dict[str, object] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        out[key] = int(value) if key in _INT_FIELDS else value
    return out
