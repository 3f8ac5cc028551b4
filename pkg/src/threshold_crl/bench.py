"""Decision-latency microbenchmark (reported, never asserted)."""
from __future__ import annotations

import os
import platform
import time

import numpy as np

from .mdp import ClientModel, ClientState
from .npg import SoftThresholdPolicy, action_prob
from .policies import hard_threshold_action, index_assign
from .solve import ThresholdFunction


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _time(fn, repeats: int) -> dict:
    for _ in range(min(100, repeats)):
        fn()
    samples = np.empty(repeats, dtype=np.int64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    p = np.percentile(samples, [50, 90, 99])
    return {"n": repeats, "p50_ns": float(p[0]), "p90_ns": float(p[1]), "p99_ns": float(p[2]),
            "min_ns": int(samples.min())}


def run_bench(models: list[ClientModel], K: int, repeats: int = 20000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    m = models[0]
    f = ThresholdFunction(tuple(int(v) for v in rng.integers(-1, m.L + 1, m.M + 1)))
    pols = [SoftThresholdPolicy(rng.normal(size=mm.n_states)) for mm in models]
    states = [ClientState(int(rng.integers(0, mm.L + 1)), int(rng.integers(0, mm.M + 1)))
              for mm in models]
    s0 = states[0]
    i0 = m.index(s0)
    return {
        "machine": machine_descriptor(),
        "clients": len(models),
        "K": K,
        "results": {
            "hard_threshold_single": _time(lambda: hard_threshold_action(f, s0), repeats),
            "soft_threshold_prob_single": _time(lambda: action_prob(pols[0], i0, 0), repeats),
            "index_assign_all_clients": _time(lambda: index_assign(pols, states, K, models), repeats),
        },
    }
