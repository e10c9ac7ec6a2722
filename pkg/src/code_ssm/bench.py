"""
Memory and throughput benchmarks.

Compares one gated SSM layer against a multi-head self-attention layer that
materialises its full score matrix. Peak memory is the instrumented transient
tensor footprint from the tensor core; wall time is the median over trials
after one warm-up run.
"""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil

from .exceptions import InvalidInputError, ShapeError
from .layers import INIT_STD, GatedLayerParams, layer_forward
from .numerics import (
    Rng,
    Tensor,
    as_tensor,
    linear,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    tensor,
    track_allocations,
    transpose,
)


logger = logging.getLogger(__name__)

LAYER_KINDS = ("ssm", "attention")
CSV_COLUMNS = ["layer", "L", "batch", "peak_bytes", "ms", "samples_per_s"]


@dataclass
class AttentionParams:
    """Query, key, value and output projections of one attention layer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    @classmethod
    def initialize(cls, hidden_dim: int, n_heads: int, rng: Rng) -> "AttentionParams":
        if hidden_dim % n_heads != 0:
            raise ShapeError(f"hidden_dim {hidden_dim} is not divisible by {n_heads} heads")

        def weight() -> Tensor:
            return tensor(rng.truncated_normal((hidden_dim, hidden_dim), std=INIT_STD))

        return cls(w_q=weight(), w_k=weight(), w_v=weight(), w_o=weight(), n_heads=n_heads)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, d = x.shape
    heads = reshape(x, (batch, length, n_heads, d // n_heads))
    # (B, L, H, dh) -> (B, H, L, dh)
    data = np.ascontiguousarray(heads.data.transpose(0, 2, 1, 3))
    return Tensor(data)


def _merge_heads(x: Tensor) -> Tensor:
    batch, n_heads, length, dh = x.shape
    return Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(batch, length, n_heads * dh))


def attention_reference_forward(params: AttentionParams, x: Union[Tensor, np.ndarray]) -> Tensor:
    """softmax(Q K^T / sqrt(d_h)) V per head, with every (L, L) score matrix held in memory.

    Accepts (L, d) or (B, L, d); inference only.
    """
    with no_grad():
        x = as_tensor(x)
        unbatched = x.ndim == 2
        if unbatched:
            x = reshape(x, (1,) + x.shape)
        d = x.shape[-1]
        if d % params.n_heads != 0:
            raise ShapeError(f"hidden_dim {d} is not divisible by {params.n_heads} heads")
        head_dim = d // params.n_heads

        q = _split_heads(linear(x, params.w_q), params.n_heads)
        k = _split_heads(linear(x, params.w_k), params.n_heads)
        v = _split_heads(linear(x, params.w_v), params.n_heads)
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head_dim))
        weights = softmax(scores, axis=-1)
        del scores
        out = linear(_merge_heads(matmul(weights, v)), params.w_o)
        return reshape(out, out.shape[1:]) if unbatched else out


@dataclass
class BenchRecord:
    layer: str
    L: int
    batch: int
    peak_bytes: int
    ms: float
    samples_per_s: float
    rss_bytes: int = 0


@dataclass
class BenchReport:
    """Per (layer, L, batch) measurements plus derived scaling figures."""

    records: List[BenchRecord] = field(default_factory=list)

    def get(self, layer: str, length: int) -> BenchRecord:
        for record in self.records:
            if record.layer == layer and record.L == length:
                return record
        raise InvalidInputError(f"no {layer} measurement at L={length}")

    def lengths(self, layer: str) -> List[int]:
        return sorted(r.L for r in self.records if r.layer == layer)

    def memory_ratio(self, layer: str, long: int, short: int) -> float:
        return self.get(layer, long).peak_bytes / self.get(layer, short).peak_bytes

    def memory_slope(self, layer: str) -> float:
        """Least-squares slope of log(peak bytes) against log(L)."""
        lengths = self.lengths(layer)
        if len(lengths) < 2:
            raise InvalidInputError(f"need two lengths to fit a slope for {layer}")
        peaks = [self.get(layer, n).peak_bytes for n in lengths]
        slope, _ = np.polyfit(np.log(lengths), np.log(peaks), 1)
        return float(slope)

    def crossover_length(self) -> Optional[int]:
        """Smallest measured L from which SSM throughput stays at or above attention's."""
        common = sorted(set(self.lengths("ssm")) & set(self.lengths("attention")))
        crossover = None
        for length in reversed(common):
            if self.get("ssm", length).samples_per_s >= self.get("attention", length).samples_per_s:
                crossover = length
            else:
                break
        return crossover

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for record in self.records:
                writer.writerow(asdict(record))
        return path

    def summary(self) -> Dict[str, object]:
        summary: Dict[str, object] = {}
        for layer in LAYER_KINDS:
            if len(self.lengths(layer)) >= 2:
                summary[f"{layer}_memory_slope"] = self.memory_slope(layer)
        if self.lengths("ssm") and self.lengths("attention"):
            summary["crossover_length"] = self.crossover_length()
        return summary

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        document = {"records": [asdict(r) for r in self.records], "summary": self.summary()}
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def pin_to_one_cpu() -> Optional[List[int]]:
    """Restrict the process to its first allowed CPU where the platform supports affinity.

    Returns the previous affinity list for restore_affinity, or None when
    nothing was changed.
    """
    process = psutil.Process()
    if not hasattr(process, "cpu_affinity"):
        logger.warning("CPU affinity is not supported here; benchmarks run unpinned")
        return None
    try:
        allowed = process.cpu_affinity()
        if allowed:
            process.cpu_affinity([allowed[0]])
            logger.debug(f"Pinned benchmark to CPU {allowed[0]}")
            return list(allowed)
    except (psutil.Error, OSError) as e:
        logger.warning(f"Could not pin benchmark to one CPU: {e}")
    return None


def restore_affinity(previous: Optional[List[int]]) -> None:
    if not previous:
        return
    try:
        psutil.Process().cpu_affinity(previous)
    except (psutil.Error, OSError) as e:
        logger.warning(f"Could not restore CPU affinity {previous}: {e}")


def _layer_runner(kind: str, hidden_dim: int, state_size: int, n_heads: int,
                  rng: Rng) -> Callable[[np.ndarray], Tensor]:
    if kind == "ssm":
        params = GatedLayerParams.initialize(hidden_dim, state_size, rng)

        def run_ssm(x: np.ndarray) -> Tensor:
            with no_grad():
                return layer_forward(params, x)

        return run_ssm
    if kind == "attention":
        attention = AttentionParams.initialize(hidden_dim, n_heads, rng)
        return lambda x: attention_reference_forward(attention, x)
    raise InvalidInputError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def measure(kind: str, lengths: Sequence[int], batch: int = 4, trials: int = 3, hidden_dim: int = 64,
            state_size: int = 16, n_heads: int = 4, seed: int = 0) -> BenchReport:
    """Benchmark one layer kind over a grid of sequence lengths.

    Args:
        kind: ``ssm`` or ``attention``
        lengths: Sequence lengths to measure
        batch: Samples per forward pass
        trials: Timed runs per length (a warm-up run precedes them)
        hidden_dim: Model width
        state_size: SSM state size N
        n_heads: Attention heads
        seed: Parameter and input seed

    Returns:
        BenchReport with one record per length
    """
    if trials < 1 or batch < 1:
        raise InvalidInputError("batch and trials must be positive")
    rng = Rng(seed)
    run = _layer_runner(kind, hidden_dim, state_size, n_heads, rng)
    process = psutil.Process()
    report = BenchReport()

    for length in lengths:
        inputs = rng.normal((batch, length, hidden_dim))
        with track_allocations() as tracker:
            x = tensor(inputs)
            out = run(x)
            del x, out
        peak = tracker.peak_bytes

        run(inputs)  # warm-up
        timings = []
        for _ in range(trials):
            started = time.perf_counter()
            run(inputs)
            timings.append(time.perf_counter() - started)
        seconds = float(np.median(timings))
        record = BenchRecord(layer=kind, L=int(length), batch=batch, peak_bytes=int(peak),
                             ms=seconds * 1000.0, samples_per_s=batch / seconds if seconds > 0 else float("inf"),
                             rss_bytes=int(process.memory_info().rss))
        report.records.append(record)
        logger.info(f"{kind} L={length} batch={batch}: peak {peak / 2**20:.1f} MiB, "
                    f"{record.ms:.1f} ms, {record.samples_per_s:.2f} samples/s")
    return report


def compare(lengths: Sequence[int], batch: int = 4, trials: int = 3, hidden_dim: int = 64,
            state_size: int = 16, n_heads: int = 4, seed: int = 0, pin: bool = True) -> BenchReport:
    """Measure both layer kinds on the same grid, pinned to one CPU for the duration."""
    previous = pin_to_one_cpu() if pin else None
    report = BenchReport()
    try:
        for kind in LAYER_KINDS:
            report.records += measure(kind, lengths, batch, trials, hidden_dim, state_size, n_heads, seed).records
    finally:
        restore_affinity(previous)
    return report
