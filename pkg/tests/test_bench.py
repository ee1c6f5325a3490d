import json
import time
from types import SimpleNamespace

import numpy as np
import pytest

from latent_gaze import bench, kernels
from latent_gaze.bench import bench_inference, bench_pipeline, summarize, write_bench
from latent_gaze.decoder import count_flops, count_params
from latent_gaze.numerics import ContractError

FIELDS = {"runs", "warmup", "mean_us", "p50_us", "p95_us", "p99_us", "min_us", "max_us",
          "flops", "params", "machine", "backend", "clock_resolution_us",
          "external_sensing_us"}


def test_runs_exclude_warmup(tiny_ckpt):
    rep = bench_inference(tiny_ckpt, runs=30, warmup=7)
    assert rep.runs == 30 and rep.warmup == 7 and len(rep.samples_us) == 30
    assert rep.min_us <= rep.p50_us <= rep.p95_us <= rep.p99_us <= rep.max_us
    assert rep.mean_us <= rep.max_us
    assert rep.flops == count_flops(tiny_ckpt.decoder)
    assert rep.params == count_params(tiny_ckpt.decoder)


def test_warmup_iterations_are_not_timed():
    n = {"calls": 0}

    def fn():
        n["calls"] += 1

    samples = bench._time(fn, 5, 3)
    assert n["calls"] == 8 and len(samples) == 5
    with pytest.raises(ContractError):
        bench._time(fn, 0, 0)


def test_single_run_percentiles_equal(tiny_ckpt):
    rep = summarize(np.array([1500]), 0, tiny_ckpt, "python")
    assert rep.p50_us == rep.p95_us == rep.p99_us == rep.min_us == rep.max_us == 1.5


def test_pipeline_is_superset(tiny_ckpt, tiny_arrays):
    patch = tiny_arrays[1].patches(np.arange(1))[0]
    inf = bench_inference(tiny_ckpt, runs=200, warmup=20)
    pipe = bench_pipeline(tiny_ckpt, patch, runs=200, warmup=20)
    assert pipe.p50_us >= inf.p50_us
    with pytest.raises(ContractError):
        bench_pipeline(tiny_ckpt, np.zeros((10, 10)), runs=1, warmup=0)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backends_selectable(tiny_ckpt, backend):
    assert bench_inference(tiny_ckpt, runs=5, warmup=1, backend=backend).backend == backend


def test_coarse_clock_warns(monkeypatch):
    monkeypatch.setattr(time, "get_clock_info", lambda name: SimpleNamespace(resolution=1e-3))
    with pytest.warns(RuntimeWarning, match="coarser"):
        assert bench._clock_resolution_us() == pytest.approx(1000.0)


def test_bench_json_schema(tiny_ckpt, tmp_path):
    rep = bench_inference(tiny_ckpt, runs=10, warmup=2)
    write_bench({"inference": rep}, tmp_path / "b.json", "cafe", external_sensing_us=3190.0)
    doc = json.loads((tmp_path / "b.json").read_text())
    assert {"timestamp", "machine", "config_hash", "inference"} <= doc.keys()
    assert doc["config_hash"] == "cafe" and doc["machine"]
    assert FIELDS <= doc["inference"].keys()
    assert doc["inference"]["end_to_end_p50_us"] == pytest.approx(3190.0 + rep.p50_us)
