"""Closed-form multiply-add accounting for one layer, plus an instrumented cross-check."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from . import tensor
from .layer import AdapterVariant, AttentionVariant, CodaConfig, CodaLayerParams, layer_forward
from .router import RouterVariant
from .soft_topk import OPS_PER_ENTRY_PER_ITER, OPS_PER_ENTRY_READOUT

BRANCHES = ("attention_proj", "attention_matmul", "ffn", "adapter", "router_score", "soft_topk_iters")

# tensor.op_tag names used inside the layer, keyed by report field
_TAGS = {
    "attention_proj": "attention_proj",
    "attention_matmul": "attention_matmul",
    "ffn": "ffn",
    "adapter": "adapter",
    "router_score": "router",
    "soft_topk_iters": "soft_topk",
}


@dataclass(frozen=True)
class BranchCounts:
    attention_proj: int = 0
    attention_matmul: int = 0
    ffn: int = 0
    adapter: int = 0
    router_score: int = 0
    soft_topk_iters: int = 0

    @property
    def total(self) -> int:
        return sum(asdict(self).values())


@dataclass(frozen=True)
class FlopsReport:
    """Per-branch multiply-adds for the routed layer and its dense baseline.

    The dense baseline is the parallel-adapter layer: same adapter, every
    token through the frozen block, no router.
    """

    n: int
    k: int
    coda: BranchCounts
    dense: BranchCounts

    @property
    def coda_total(self) -> int:
        return self.coda.total

    @property
    def dense_total(self) -> int:
        return self.dense.total

    @property
    def speedup(self) -> float:
        return self.dense_total / self.coda_total

    @property
    def soft_topk_share(self) -> float:
        return self.coda.soft_topk_iters / self.coda_total

    def token_linear_reduction(self) -> Fraction:
        """Dense over routed count of the projection and FFN terms, as an exact ratio."""
        return Fraction(self.dense.attention_proj + self.dense.ffn, self.coda.attention_proj + self.coda.ffn)

    def as_dict(self) -> dict:
        out = {"n": self.n, "k": self.k}
        out.update({f"coda_{b}": getattr(self.coda, b) for b in BRANCHES})
        out.update({f"dense_{b}": getattr(self.dense, b) for b in BRANCHES})
        out.update(coda_total=self.coda_total, dense_total=self.dense_total, speedup=self.speedup,
                   soft_topk_share=self.soft_topk_share)
        return out


def soft_topk_ops(n: int, k: int, T: int) -> int:
    if k >= n:
        return 0
    return n * (OPS_PER_ENTRY_PER_ITER * T + OPS_PER_ENTRY_READOUT)


def _adapter_ops(cfg: CodaConfig, q_rows: int, kv_rows: int) -> int:
    n, d = cfg.n, cfg.d
    if cfg.adapter_variant is AdapterVariant.PARALLEL:
        return 2 * n * d * cfg.d_adpt
    r = cfg.lora_rank
    square = r * (d + d)
    ffn = r * (d + cfg.d_ffn)
    # wq and wo act on query rows, wk and wv on key/value rows, both FFN matrices on query rows
    return 2 * q_rows * square + 2 * kv_rows * square + 2 * q_rows * ffn


def count_flops(cfg: CodaConfig) -> FlopsReport:
    n, d, k = cfg.n, cfg.d, cfg.capacity
    kv = k if cfg.attention_variant is AttentionVariant.K_TO_K else n
    routed = cfg.router_variant is not RouterVariant.TRUNCATION
    coda = BranchCounts(
        attention_proj=2 * k * d * d + 2 * kv * d * d,
        attention_matmul=2 * k * kv * d,
        ffn=2 * k * d * cfg.d_ffn,
        adapter=_adapter_ops(cfg, k, kv),
        router_score=n * d if routed else 0,
        soft_topk_iters=soft_topk_ops(n, k, cfg.T) if cfg.router_variant is RouterVariant.SOFT_TOPK else 0,
    )
    dense = BranchCounts(
        attention_proj=4 * n * d * d,
        attention_matmul=2 * n * n * d,
        ffn=2 * n * d * cfg.d_ffn,
        adapter=_adapter_ops(cfg, n, n),
    )
    return FlopsReport(n, k, coda, dense)


def instrumented_counts(cfg: CodaConfig, seed: int = 0) -> BranchCounts:
    """Run one layer forward on random input and tally what the tensor module executed."""
    rng = tensor.Rng(seed)
    params = CodaLayerParams.init(cfg, rng)
    x = rng.normal((cfg.n, cfg.d))
    with tensor.counting() as counter:
        layer_forward(x, params.frozen, params.adapters, params.router, cfg)
    unknown = set(counter.by_tag) - set(_TAGS.values())
    if unknown:
        raise RuntimeError(f"untagged operations in layer forward: {sorted(unknown)}")
    return BranchCounts(**{field: counter.by_tag.get(tag, 0) for field, tag in _TAGS.items()})


def relative_gap(closed: BranchCounts, measured: BranchCounts) -> float:
    return abs(closed.total - measured.total) / max(measured.total, 1)


def base_config(r: float = 3.0, **overrides) -> CodaConfig:
    """A Base-sized text layer: d=768, d_ffn=3072, d_adpt=64, n=512."""
    fields = dict(n=512, d=768, heads=12, d_ffn=3072, d_adpt=64, r=r)
    fields.update(overrides)
    return CodaConfig(**fields)


def xl_config(r: float = 3.0, **overrides) -> CodaConfig:
    """An XL-sized text layer: d=2048, d_ffn=5120."""
    fields = dict(n=512, d=2048, heads=32, d_ffn=5120, d_adpt=64, r=r)
    fields.update(overrides)
    return CodaConfig(**fields)
