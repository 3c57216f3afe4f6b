"""Wall-clock scaling of the WKV scan against the quadratic oracle."""

from __future__ import annotations

import io
import csv
import time
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .wkv import WkvParams, wkv_bidirectional, wkv_oracle

DEFAULT_J = (256, 1024, 4096)
SCAN_SLOPE_MAX = 1.4
ORACLE_SLOPE_MIN = 1.7


@dataclass
class BenchResult:
    J: list
    scan_ns: list
    oracle_ns: list

    @property
    def scan_slope(self) -> float:
        return loglog_slope(self.J, self.scan_ns)

    @property
    def oracle_slope(self) -> float:
        return loglog_slope(self.J, self.oracle_ns)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["J", "scan_ns", "oracle_ns"])
        for row in zip(self.J, self.scan_ns, self.oracle_ns):
            w.writerow(row)
        return buf.getvalue()

    def check(self) -> list[str]:
        """Failed slope conditions, empty when both hold."""
        bad = []
        if not self.scan_slope < SCAN_SLOPE_MAX:
            bad.append(f"scan slope {self.scan_slope:.3f} >= {SCAN_SLOPE_MAX}")
        if not self.oracle_slope > ORACLE_SLOPE_MIN:
            bad.append(f"oracle slope {self.oracle_slope:.3f} <= {ORACLE_SLOPE_MIN}")
        return bad


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def run_bench(J_list=DEFAULT_J, D: int = 64, repeats: int = 3, seed: int = 0) -> BenchResult:
    J_list = [int(j) for j in J_list]
    if any(b <= a for a, b in zip(J_list, J_list[1:])):
        raise ValueError("J values must be strictly ascending")
    rng = Rng(seed, stream=0xBE)
    params = WkvParams(rng.uniform(D), rng.uniform(D) - 0.5)
    scan, oracle = [], []
    for J in J_list:
        k = rng.uniform((J, D)) * 2 - 1
        v = rng.uniform((J, D)) * 2 - 1
        wkv_bidirectional(k, v, params)  # warm-up
        scan.append(_median_ns(lambda: wkv_bidirectional(k, v, params), repeats))
        oracle.append(_median_ns(lambda: wkv_oracle(k, v, params), repeats))
    return BenchResult(J_list, scan, oracle)
