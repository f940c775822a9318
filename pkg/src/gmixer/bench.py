"""Forward-time scaling of token mixing versus softmax attention."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from gmixer.layers import AttentionReference, MixerParams, token_mixing
from gmixer.params import ParamRegistry
from gmixer.tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_SIZES = (64, 128, 256, 512, 1024, 2048)
MIN_SAMPLE_SECONDS = 2e-4


@dataclass
class BenchReport:
    sizes: list[int]
    mixer_ns: list[float]
    attention_ns: list[float]
    mixer_exponent: float
    attention_exponent: float
    mixer_r_squared: float
    attention_r_squared: float
    d: int
    batch: int
    token_hidden: int
    repeats: int

    @property
    def separation(self) -> float:
        return self.attention_exponent - self.mixer_exponent

    def to_json(self) -> str:
        return json.dumps(asdict(self) | {"separation": self.separation}, indent=2) + "\n"


def loglog_fit(sizes: Sequence[float], times: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(size) and its r^2."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _median_ns(fn, repeats: int) -> float:
    """Median per-call time; calls are looped so each sample spans MIN_SAMPLE_SECONDS."""
    fn()
    t0 = time.perf_counter()
    fn()
    single = time.perf_counter() - t0
    inner = 1
    if single < MIN_SAMPLE_SECONDS:
        inner = int(np.ceil(MIN_SAMPLE_SECONDS / max(single, time.get_clock_info("perf_counter").resolution)))
        log.warning("forward takes %.1f us, below timer comfort; looping %d calls per sample",
                    single * 1e6, inner)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner * 1e9)
    return statistics.median(samples)


def run_bench(sizes: Sequence[int] = DEFAULT_SIZES, repeats: int = 5, d: int = 64,
              batch: int = 8, token_hidden: int = 64, seed: int = 0) -> BenchReport:
    sizes = [int(s) for s in sizes]
    if len(sizes) < 5:
        raise ValueError("bench needs at least 5 sizes")
    if any(s < 16 for s in sizes):
        raise ValueError("every bench size must be >= 16")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("bench sizes must be strictly increasing")
    if repeats < 1 or d < 1:
        raise ValueError("repeats and d must be >= 1")
    rng = np.random.default_rng(seed)
    mixer_ns, attn_ns = [], []
    with threadpool_limits(limits=1):
        for n in sizes:
            x = rng.standard_normal((batch, n, d))
            mask = np.ones((batch, n), dtype=bool)
            reg = ParamRegistry(rng_seed=seed)
            params = MixerParams.create(reg, "bench", n, d, token_hidden, 1)
            xt = Tensor(x)
            attention = AttentionReference(d, seed)
            mixer_ns.append(_median_ns(lambda: token_mixing(xt, mask, params), repeats))
            attn_ns.append(_median_ns(lambda: attention(x), repeats))
            log.info("n=%d mixer %.3g ns attention %.3g ns", n, mixer_ns[-1], attn_ns[-1])
    m_exp, m_r2 = loglog_fit(sizes, mixer_ns)
    a_exp, a_r2 = loglog_fit(sizes, attn_ns)
    return BenchReport(sizes, mixer_ns, attn_ns, m_exp, a_exp, m_r2, a_r2, d, batch, token_hidden, repeats)
