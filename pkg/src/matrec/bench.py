"""Single-image latency harness for the full predict path.

The timed region covers decode -> preprocess -> backbone -> head ->
argmax; stats computation and serialization stay outside it. Statistics
are pure functions of the recorded sample vector, with nearest-rank
percentiles so golden tests can be exact.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .inference import TtaConfig, predict_file


class BenchError(ValueError):
    pass


def nearest_rank_percentile(samples, p: float) -> float:
    """Value at rank ceil(p*n) of the sorted samples (1-based)."""
    if not 0 < p <= 1:
        raise BenchError("percentile must be in (0, 1]")
    ordered = sorted(samples)
    if not ordered:
        raise BenchError("no samples")
    rank = int(np.ceil(p * len(ordered)))
    return float(ordered[rank - 1])


def median(samples) -> float:
    ordered = sorted(samples)
    n = len(ordered)
    if n == 0:
        raise BenchError("no samples")
    mid = n // 2
    if n % 2:
        return float(ordered[mid])
    return float((ordered[mid - 1] + ordered[mid]) / 2.0)


@dataclass
class LatencyStats:
    runs: int
    warmup: int
    samples_ms: list
    median_ms: float
    mean_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    cv: float                      # coefficient of variation
    hardware_note: str = ""
    includes_decode: bool = True   # timed region covers decode + preprocess

    @classmethod
    def from_samples(cls, samples_ms, warmup: int = 0,
                     hardware_note: str = "") -> "LatencyStats":
        samples_ms = [float(s) for s in samples_ms]
        if not samples_ms:
            raise BenchError("need at least one timed run")
        mean = float(np.mean(samples_ms))
        std = float(np.std(samples_ms))
        return cls(
            runs=len(samples_ms),
            warmup=warmup,
            samples_ms=samples_ms,
            median_ms=median(samples_ms),
            mean_ms=mean,
            p95_ms=nearest_rank_percentile(samples_ms, 0.95),
            min_ms=float(min(samples_ms)),
            max_ms=float(max(samples_ms)),
            cv=std / mean if mean > 0 else 0.0,
            hardware_note=hardware_note,
        )

    def to_dict(self) -> dict:
        return {
            "runs": self.runs, "warmup": self.warmup,
            "samples_ms": self.samples_ms,
            "median_ms": self.median_ms, "mean_ms": self.mean_ms,
            "p95_ms": self.p95_ms, "min_ms": self.min_ms,
            "max_ms": self.max_ms, "cv": self.cv,
            "hardware_note": self.hardware_note,
            "includes_decode": self.includes_decode,
        }


def time_single_image(backbone, head, catalog, image_path, runs: int = 30,
                      warmup: int = 5, tta: TtaConfig = TtaConfig(),
                      clock=time.perf_counter,
                      hardware_note: str = "") -> LatencyStats:
    """Warmup then timed runs of the full predict path on one image.

    Single-threaded by contract so results stay comparable; `clock` is
    injectable for exact order-statistics tests.
    """
    if runs < 1:
        raise BenchError("runs must be >= 1")
    for _ in range(warmup):
        predict_file(image_path, backbone, head, catalog, tta)
    samples_ms = []
    for _ in range(runs):
        t0 = clock()
        predict_file(image_path, backbone, head, catalog, tta)
        t1 = clock()
        samples_ms.append((t1 - t0) * 1000.0)
    return LatencyStats.from_samples(samples_ms, warmup=warmup,
                                     hardware_note=hardware_note)
