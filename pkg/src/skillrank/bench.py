"""Throughput and model-size benchmarking.

Protocol per repetition: run the warmup inputs untimed, then time the measured
pairs in fixed-size batches on a monotonic clock. Throughput is measured
pairs per second; the report carries the mean and the population standard
deviation over repetitions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch


@dataclass(frozen=True)
class BenchProtocol:
    warmup_queries: int = 10
    measured_pairs: int = 200
    batch_size: int = 16
    repetitions: int = 8
    input_len: int = 256
    threads: int = 1  # emulate core pinning; single worker by default

    def __post_init__(self):
        values = (self.warmup_queries, self.measured_pairs, self.batch_size,
                  self.repetitions, self.input_len, self.threads)
        if any(v <= 0 for v in values):
            raise ValueError("all protocol fields must be positive")


@dataclass
class BenchResult:
    throughput_mean: float
    throughput_std: float
    per_repetition: list[float]
    model_size_bytes: int = 0


class BenchAborted(RuntimeError):
    """Scoring failed mid-run; .partial holds the completed repetitions."""

    def __init__(self, cause: Exception, partial: list[float]):
        super().__init__(f"benchmark aborted after {len(partial)} repetitions: {cause}")
        self.partial = partial


def _batches(items: Sequence[str], size: int):
    for start in range(0, len(items), size):
        yield list(items[start : start + size])


def measure_throughput(
    scorer: Callable[[list[str]], object],
    pairs: Sequence[str],
    protocol: BenchProtocol = BenchProtocol(),
    model_size: int = 0,
) -> BenchResult:
    """Time `scorer` over the protocol's measured pairs; warmup is untimed."""
    if len(pairs) < protocol.measured_pairs:
        raise ValueError(
            f"need at least {protocol.measured_pairs} pairs, got {len(pairs)}"
        )
    measured = list(pairs[: protocol.measured_pairs])
    warmup = list(pairs[: protocol.warmup_queries])
    torch.set_num_threads(protocol.threads)

    per_rep: list[float] = []
    for _ in range(protocol.repetitions):
        try:
            for batch in _batches(warmup, protocol.batch_size):
                scorer(batch)
            start = time.perf_counter()
            for batch in _batches(measured, protocol.batch_size):
                scorer(batch)
            elapsed = time.perf_counter() - start
        except Exception as exc:  # abort with partial log
            raise BenchAborted(exc, per_rep) from exc
        per_rep.append(protocol.measured_pairs / elapsed)

    mean = sum(per_rep) / len(per_rep)
    std = math.sqrt(sum((x - mean) ** 2 for x in per_rep) / len(per_rep))
    return BenchResult(
        throughput_mean=mean,
        throughput_std=std,
        per_repetition=per_rep,
        model_size_bytes=model_size,
    )


def bench_report(results: dict[str, dict[int, BenchResult]]) -> str:
    """Text table: one row per scheme, throughput per input length with std in
    brackets, model size in MB, plus speedup and size-ratio columns against
    the FP32 ("none") row when present.
    """
    if not results:
        raise ValueError("no benchmark results")
    lengths = sorted({ln for by_len in results.values() for ln in by_len})
    baseline = results.get("none")

    header = ["scheme"]
    header += [f"throughput({ln})" for ln in lengths]
    if baseline:
        header += [f"speedup({ln})" for ln in lengths]
    header.append("size MB")
    if baseline:
        header.append("size ratio")
    rows = [header]

    order = [s for s in ("none", "static", "dynamic", "smoothquant") if s in results]
    order += [s for s in results if s not in order]
    for scheme in order:
        by_len = results[scheme]
        row = [scheme]
        for ln in lengths:
            r = by_len.get(ln)
            row.append(f"{r.throughput_mean:.3f} (±{r.throughput_std:.3f})" if r else "-")
        if baseline:
            for ln in lengths:
                r, base = by_len.get(ln), baseline.get(ln)
                row.append(f"{r.throughput_mean / base.throughput_mean:.2f}x" if r and base else "-")
        size = next((r.model_size_bytes for r in by_len.values() if r.model_size_bytes), 0)
        row.append(f"{size / 1e6:.1f}" if size else "-")
        if baseline:
            base_size = next((r.model_size_bytes for r in baseline.values() if r.model_size_bytes), 0)
            row.append(f"{base_size / size:.2f}x" if size and base_size else "-")
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
