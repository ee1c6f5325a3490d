"""Latency harness for the deployment path.

Warm-up iterations are run and discarded; statistics cover exactly ``runs``
timed iterations on a monotonic clock.  Sensing is excluded from
``bench_inference``; ``bench_pipeline`` adds the simulated 16-mask
measurement.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import time
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import Checkpoint
from .decoder import count_flops, count_params, deployment_engine
from .numerics import ContractError
from .optics import realize_masks

log = logging.getLogger(__name__)

CLOCK = time.perf_counter_ns


@dataclass
class LatencyReport:
    runs: int
    warmup: int
    mean_us: float
    p50_us: float
    p95_us: float
    p99_us: float
    min_us: float
    max_us: float
    flops: int
    params: int
    machine: str = ""
    backend: str = ""
    clock_resolution_us: float = 0.0
    external_sensing_us: float | None = None
    samples_us: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples_us")
        return d


def machine_string() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return (f"{cpu}; {os.cpu_count()} cpu; {platform.system()} {platform.release()}; "
            f"python {platform.python_version()}; numpy {np.__version__}")


def _clock_resolution_us() -> float:
    res = time.get_clock_info("perf_counter").resolution * 1e6
    if res > 1.0:
        warnings.warn(f"clock resolution {res:.3g} us is coarser than 1 us; "
                      "percentiles are only meaningful at that granularity", RuntimeWarning)
    return res


def summarize(samples_ns: np.ndarray, warmup: int, ckpt: Checkpoint, backend: str) -> LatencyReport:
    us = np.asarray(samples_ns, dtype=np.float64) / 1e3
    p50, p95, p99 = np.percentile(us, [50, 95, 99])
    return LatencyReport(
        runs=len(us), warmup=warmup, mean_us=float(us.mean()), p50_us=float(p50),
        p95_us=float(p95), p99_us=float(p99), min_us=float(us.min()), max_us=float(us.max()),
        flops=count_flops(ckpt.decoder), params=count_params(ckpt.decoder),
        machine=machine_string(), backend=backend,
        clock_resolution_us=_clock_resolution_us(), samples_us=us)


def _time(fn, runs: int, warmup: int) -> np.ndarray:
    if runs < 1 or warmup < 0:
        raise ContractError("runs must be >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    out = np.empty(runs, dtype=np.int64)
    for i in range(runs):
        t0 = CLOCK()
        fn()
        out[i] = CLOCK() - t0
    return out


def _default_input(ckpt: Checkpoint, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xBE4C])
    return (ckpt.stats.mean + ckpt.stats.std * rng.standard_normal(ckpt.stats.mean.shape)
            ).astype(np.float32)


def bench_inference(ckpt: Checkpoint, runs: int = 2000, warmup: int = 50,
                    y: np.ndarray | None = None, backend: str | None = None,
                    seed: int = 0) -> LatencyReport:
    """Normalization, decoder forward and validity threshold for one reading."""
    engine = deployment_engine(ckpt.decoder, ckpt.stats, backend)
    y = np.ascontiguousarray(_default_input(ckpt, seed) if y is None else y, dtype=np.float32)
    gaze = np.empty(3, dtype=np.float32)

    def step():
        return engine.infer(y, gaze) > 0.5

    samples = _time(step, runs, warmup)
    return summarize(samples, warmup, ckpt, backend or kernels.BACKEND)


def bench_pipeline(ckpt: Checkpoint, patch: np.ndarray, runs: int = 2000, warmup: int = 50,
                   backend: str | None = None) -> LatencyReport:
    """Simulated measurement plus the inference path for one 256x256 patch."""
    engine = deployment_engine(ckpt.decoder, ckpt.stats, backend)
    bank = ckpt.bank if ckpt.bank.mode == "hard" else ckpt.bank.hardened()
    M = np.ascontiguousarray(realize_masks(bank).reshape(bank.n_masks, -1))
    x = np.ascontiguousarray(patch, dtype=np.float32).reshape(-1)
    if x.shape[0] != M.shape[1]:
        raise ContractError(f"patch has {x.shape[0]} pixels, masks expect {M.shape[1]}")
    gaze = np.empty(3, dtype=np.float32)

    def step():
        return engine.infer(M @ x, gaze) > 0.5

    samples = _time(step, runs, warmup)
    return summarize(samples, warmup, ckpt, backend or kernels.BACKEND)


def write_bench(reports: dict[str, LatencyReport], path, config_hash: str = "",
                external_sensing_us: float | None = None) -> Path:
    doc = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "machine": machine_string(),
        "config_hash": config_hash,
    }
    for name, rep in reports.items():
        d = rep.to_dict()
        d["external_sensing_us"] = external_sensing_us
        if external_sensing_us is not None:
            d["end_to_end_p50_us"] = external_sensing_us + rep.p50_us
        doc[name] = d
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return Path(path)
