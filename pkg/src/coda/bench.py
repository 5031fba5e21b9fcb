"""Timing sweeps over layer sizes, reduction factors and attention variants."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import tensor
from .flops import count_flops
from .layer import AttentionVariant, CodaConfig, CodaLayerParams, layer_forward
from .soft_topk import soft_topk

THREADS_ENV = "CODA_BENCH_THREADS"

COLUMNS = (
    "config_hash", "n", "d", "d_ffn", "r", "k", "variant",
    "flops_cond", "flops_dense", "model_speedup", "soft_topk_flops_share",
    "wall_ms", "soft_topk_wall_ms", "soft_topk_wall_share",
)
# columns that depend only on the spec, never on the clock
DETERMINISTIC_COLUMNS = COLUMNS[:11]


@dataclass(frozen=True)
class LayerDims:
    n: int
    d: int
    heads: int
    d_ffn: int
    d_adpt: int = 64


@dataclass
class BenchSpec:
    dims: list[LayerDims]
    r_values: list[float]
    variants: list[str] = field(default_factory=lambda: [v.value for v in AttentionVariant])
    seed: int = 0
    repetitions: int = 5
    output: str | None = None

    def __post_init__(self):
        if not self.dims or not self.r_values or not self.variants:
            raise ValueError("bench grid is empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        self.dims = [d if isinstance(d, LayerDims) else LayerDims(**d) for d in self.dims]
        self.variants = [AttentionVariant(v).value for v in self.variants]

    def configs(self) -> list[CodaConfig]:
        return [
            CodaConfig(n=dm.n, d=dm.d, heads=dm.heads, d_ffn=dm.d_ffn, d_adpt=dm.d_adpt, r=float(r),
                       attention_variant=v)
            for dm in self.dims for r in self.r_values for v in self.variants
        ]


def config_hash(cfg: CodaConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV}={raw!r} is not an integer") from exc
    return max(1, value)


def _median_ms(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def bench_point(cfg: CodaConfig, seed: int, repetitions: int) -> dict:
    rng = tensor.Rng(seed)
    params = CodaLayerParams.init(cfg, rng)
    x = rng.normal((cfg.n, cfg.d))
    scores = x @ params.router.w
    report = count_flops(cfg)
    wall = _median_ms(lambda: layer_forward(x, params.frozen, params.adapters, params.router, cfg), repetitions)
    k = cfg.capacity
    topk_wall = _median_ms(lambda: soft_topk(scores, k, cfg.schedule), repetitions) if k < cfg.n else 0.0
    return {
        "config_hash": config_hash(cfg), "n": cfg.n, "d": cfg.d, "d_ffn": cfg.d_ffn,
        "r": cfg.r, "k": k, "variant": cfg.attention_variant.value,
        "flops_cond": report.coda_total, "flops_dense": report.dense_total,
        "model_speedup": f"{report.speedup:.6f}", "soft_topk_flops_share": f"{report.soft_topk_share:.6e}",
        "wall_ms": f"{wall:.4f}", "soft_topk_wall_ms": f"{topk_wall:.4f}",
        "soft_topk_wall_share": f"{topk_wall / wall:.6f}",
    }


def run(spec: BenchSpec, threads: int | None = None) -> list[dict]:
    """One row per grid point, in grid order regardless of thread count."""
    configs = spec.configs()
    threads = thread_count() if threads is None else threads
    if threads == 1:
        return [bench_point(c, spec.seed, spec.repetitions) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: bench_point(c, spec.seed, spec.repetitions), configs))


def to_csv(rows: list[dict], columns=COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text(to_csv(rows))


def load_spec(path: str | Path) -> BenchSpec:
    data = json.loads(Path(path).read_text())
    return BenchSpec(**data)


def default_spec() -> BenchSpec:
    return BenchSpec(
        dims=[LayerDims(n=128, d=64, heads=4, d_ffn=256, d_adpt=16),
              LayerDims(n=128, d=256, heads=4, d_ffn=1024, d_adpt=16)],
        r_values=[1.0, 2.0, 3.0, 4.0],
    )
