"""One conditional-adapter encoder layer and its dense parallel-adapter baseline.

The layer keeps a frozen pre-norm Transformer block, runs it only on the
``k`` routed tokens, and adds a light adapter branch that sees every token::

    x_norm = LN_att(x)
    y = x + adapter(x_norm) + m * scatter(att(x_routed) + ffn(LN_ffn(x_routed + att(x_routed))))

Frozen projections and FFN weights never receive gradients. Layer-norm gains
and biases, the router vector and the adapter weights are trainable.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor
from .router import RouterParams, RouterVariant, SelectionResult, route_graph
from .soft_topk import CapacityError, EpsSchedule, capacity


class StateError(RuntimeError):
    """Backward called without a usable forward cache."""


class AttentionVariant(str, enum.Enum):
    K_TO_K = "k_to_k"
    K_TO_ALL = "k_to_all"


class AdapterVariant(str, enum.Enum):
    PARALLEL = "parallel"
    LORA = "lora"


PROJECTIONS = ("wq", "wk", "wv", "wo", "ffn_in", "ffn_out")


@dataclass
class CodaConfig:
    n: int
    d: int
    heads: int = 2
    d_ffn: int | None = None
    d_adpt: int = 64
    r: float | None = None
    k: int | None = None
    attention_variant: AttentionVariant = AttentionVariant.K_TO_K
    router_variant: RouterVariant = RouterVariant.SOFT_TOPK
    adapter_variant: AdapterVariant = AdapterVariant.PARALLEL
    eps0: float = 4.0
    eps_target: float = 0.03
    beta: float = 0.7
    T: int = 20
    lora_rank: int = 4
    lora_alpha: float = 16.0
    ln_eps: float = tensor.DEFAULT_LN_EPS

    def __post_init__(self):
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d
        self.attention_variant = AttentionVariant(self.attention_variant)
        self.router_variant = RouterVariant(self.router_variant)
        self.adapter_variant = AdapterVariant(self.adapter_variant)
        if self.d % self.heads:
            raise tensor.DimensionError(f"d={self.d} not divisible by heads={self.heads}")
        if self.r is not None and self.r < 1:
            raise ValueError(f"reduction factor must be >= 1, got {self.r}")
        if self.k is not None and not 1 <= self.k <= self.n:
            raise CapacityError(f"k={self.k} outside [1, {self.n}]")

    @property
    def capacity(self) -> int:
        if self.k is not None:
            return int(self.k)
        if self.r is not None:
            return capacity(self.n, self.r)
        return self.n

    @property
    def schedule(self) -> EpsSchedule:
        return EpsSchedule(self.eps0, self.eps_target, self.beta, self.T)

    def with_capacity(self, k: int) -> "CodaConfig":
        return dataclasses.replace(self, k=int(k), r=None)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("attention_variant", "router_variant", "adapter_variant"):
            out[key] = getattr(self, key).value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CodaConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "LayerNormParams":
        return cls(np.ones(d), np.zeros(d))


@dataclass
class FrozenLayerWeights:
    """Pretrained block weights. ``ln_att``/``ln_ffn`` live here but are trained."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_in: np.ndarray
    ffn_out: np.ndarray
    heads: int
    ln_att: LayerNormParams
    ln_ffn: LayerNormParams

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, heads: int, d_ffn: int, rng: tensor.Rng) -> "FrozenLayerWeights":
        if d % heads:
            raise tensor.DimensionError(f"d={d} not divisible by heads={heads}")
        std = 1.0 / math.sqrt(d)
        return cls(
            wq=rng.normal((d, d), std), wk=rng.normal((d, d), std),
            wv=rng.normal((d, d), std), wo=rng.normal((d, d), std),
            ffn_in=rng.normal((d, d_ffn), std), ffn_out=rng.normal((d_ffn, d), 1.0 / math.sqrt(d_ffn)),
            heads=heads, ln_att=LayerNormParams.identity(d), ln_ffn=LayerNormParams.identity(d),
        )

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PROJECTIONS}

    def zeros_like(self) -> "FrozenLayerWeights":
        return FrozenLayerWeights(
            **{k: np.zeros_like(v) for k, v in self.matrices().items()},
            heads=self.heads, ln_att=self.ln_att, ln_ffn=self.ln_ffn,
        )


@dataclass
class AdapterWeights:
    variant: AdapterVariant = AdapterVariant.PARALLEL
    down: np.ndarray | None = None
    up: np.ndarray | None = None
    lora: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    lora_alpha: float = 16.0

    @classmethod
    def parallel(cls, d: int, d_adpt: int, rng: tensor.Rng) -> "AdapterWeights":
        return cls(AdapterVariant.PARALLEL, down=rng.normal((d, d_adpt), 1.0 / math.sqrt(d)), up=np.zeros((d_adpt, d)))

    @classmethod
    def low_rank(cls, shapes: dict[str, tuple[int, int]], rank: int, alpha: float, rng: tensor.Rng) -> "AdapterWeights":
        lora = {name: (rng.normal((din, rank), 1.0 / math.sqrt(din)), np.zeros((rank, dout)))
                for name, (din, dout) in shapes.items()}
        return cls(AdapterVariant.LORA, lora=lora, lora_alpha=alpha)

    @classmethod
    def for_config(cls, cfg: CodaConfig, rng: tensor.Rng) -> "AdapterWeights":
        if cfg.adapter_variant is AdapterVariant.PARALLEL:
            return cls.parallel(cfg.d, cfg.d_adpt, rng)
        shapes = {name: (cfg.d, cfg.d) for name in ("wq", "wk", "wv", "wo")}
        shapes.update(ffn_in=(cfg.d, cfg.d_ffn), ffn_out=(cfg.d_ffn, cfg.d))
        return cls.low_rank(shapes, cfg.lora_rank, cfg.lora_alpha, rng)


@dataclass
class CodaLayerParams:
    frozen: FrozenLayerWeights
    adapters: AdapterWeights
    router: RouterParams

    @classmethod
    def init(cls, cfg: CodaConfig, rng: tensor.Rng) -> "CodaLayerParams":
        return cls(
            FrozenLayerWeights.init(cfg.d, cfg.heads, cfg.d_ffn, rng),
            AdapterWeights.for_config(cfg, rng),
            RouterParams.init(cfg.d, rng),
        )

    def trainable(self) -> dict[str, np.ndarray]:
        return trainable_arrays(self.frozen, self.adapters, self.router)

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return self.frozen.matrices()


def trainable_arrays(frozen: FrozenLayerWeights, adapters: AdapterWeights, router: RouterParams | None) -> dict[str, np.ndarray]:
    """Named views of every trainable array; mutating them updates the params."""
    out = {
        "ln_att.gain": frozen.ln_att.gain, "ln_att.bias": frozen.ln_att.bias,
        "ln_ffn.gain": frozen.ln_ffn.gain, "ln_ffn.bias": frozen.ln_ffn.bias,
    }
    if router is not None:
        out["router.w"] = router.w
    if adapters.variant is AdapterVariant.PARALLEL:
        out["adapter.down"] = adapters.down
        out["adapter.up"] = adapters.up
    else:
        for name, (a, b) in adapters.lora.items():
            out[f"lora.{name}.A"] = a
            out[f"lora.{name}.B"] = b
    return out


def parameter_census(params: CodaLayerParams) -> dict[str, int]:
    trainable = params.trainable()
    groups = {"adapter": 0, "router": 0, "layer_norm": 0}
    for name, arr in trainable.items():
        key = "router" if name.startswith("router") else "layer_norm" if name.startswith("ln_") else "adapter"
        groups[key] += arr.size
    frozen = sum(a.size for a in params.frozen_arrays().values())
    groups["trainable"] = sum(a.size for a in trainable.values())
    groups["frozen"] = frozen
    groups["total"] = frozen + groups["trainable"]
    return groups


# ---------------------------------------------------------------------------
# graph construction


class _Weights:
    """Frozen weights as constants, trainables as autodiff leaves."""

    def __init__(self, frozen: FrozenLayerWeights, adapters: AdapterWeights, router: RouterParams | None):
        self.frozen = frozen
        self.adapters = adapters
        self.leaves = {name: ad.leaf(arr, name) for name, arr in trainable_arrays(frozen, adapters, router).items()}
        self.const = {name: ad.const(arr) for name, arr in frozen.matrices().items()}
        self.lora_scale = adapters.lora_alpha / next(iter(adapters.lora.values()))[0].shape[1] if adapters.lora else 0.0

    def project(self, x: ad.Var, name: str) -> ad.Var:
        y = x @ self.const[name]
        if self.adapters.variant is AdapterVariant.LORA and name in self.adapters.lora:
            with tensor.op_tag("adapter"):
                y = y + ((x @ self.leaves[f"lora.{name}.A"]) @ self.leaves[f"lora.{name}.B"]) * self.lora_scale
        return y


def _attention(q_src: ad.Var, kv_src: ad.Var, w: _Weights) -> ad.Var:
    h = w.frozen.heads
    d = q_src.shape[-1]
    dh = d // h

    def split(t: ad.Var) -> ad.Var:
        return ad.swapaxes(ad.reshape(t, t.shape[:-1] + (h, dh)), -2, -3)

    with tensor.op_tag("attention_proj"):
        q = split(w.project(q_src, "wq"))
        k = split(w.project(kv_src, "wk"))
        v = split(w.project(kv_src, "wv"))
    with tensor.op_tag("attention_matmul"):
        scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        ctx = ad.softmax(scores) @ v
    merged = ad.swapaxes(ctx, -2, -3)
    merged = ad.reshape(merged, merged.shape[:-2] + (d,))
    with tensor.op_tag("attention_proj"):
        return w.project(merged, "wo")


def _ffn(x: ad.Var, w: _Weights) -> ad.Var:
    with tensor.op_tag("ffn"):
        return w.project(ad.relu(w.project(x, "ffn_in")), "ffn_out")


def _adapter(x_norm: ad.Var, w: _Weights) -> ad.Var:
    if w.adapters.variant is AdapterVariant.LORA:
        return ad.const(np.zeros(x_norm.shape))
    with tensor.op_tag("adapter"):
        return ad.relu(x_norm @ w.leaves["adapter.down"]) @ w.leaves["adapter.up"]


def _ln(x: ad.Var, w: _Weights, which: str, eps: float) -> ad.Var:
    return ad.layer_norm(x, w.leaves[f"{which}.gain"], w.leaves[f"{which}.bias"], eps)


def coda_graph(x: ad.Var, w: _Weights, router_w: ad.Var, k: int, cfg: CodaConfig):
    """Build the routed layer on autodiff vars. Returns ``(y, z_adapter, m, lam, idx)``."""
    n = x.shape[-2]
    x_norm = _ln(x, w, "ln_att", cfg.ln_eps)
    z_adapter = _adapter(x_norm, w)
    m, lam, idx = route_graph(x_norm, router_w, k, cfg.router_variant, cfg.schedule)
    x_routed = ad.gather_rows(x_norm, idx)
    kv = x_routed if cfg.attention_variant is AttentionVariant.K_TO_K else x_norm
    z_bar = _attention(x_routed, kv, w)
    z_routed = _ffn(_ln(x_routed + z_bar, w, "ln_ffn", cfg.ln_eps), w)
    z_cond = ad.scatter_rows(z_bar + z_routed, idx, n)
    y = x + z_adapter + ad.expand_last(m) * z_cond
    return y, z_adapter, m, lam, idx


def dense_graph(x: ad.Var, w: _Weights, ln_eps: float = tensor.DEFAULT_LN_EPS):
    x_norm = _ln(x, w, "ln_att", ln_eps)
    z_adapter = _adapter(x_norm, w)
    z_bar = _attention(x_norm, x_norm, w)
    z_ffn = _ffn(_ln(x_norm + z_bar, w, "ln_ffn", ln_eps), w)
    return x + z_adapter + (z_bar + z_ffn), z_adapter


# ---------------------------------------------------------------------------
# public API


@dataclass
class LayerOutput:
    y: np.ndarray
    selection: SelectionResult | None
    z_adapter: np.ndarray
    cache: tuple | None = None


def _check_input(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != d:
        raise tensor.DimensionError(f"input shape {x.shape} does not end in width {d}")
    return x


def adapter_forward(x_norm, w: AdapterWeights) -> np.ndarray:
    """Adapter branch on every token; the LoRA variant contributes nothing here."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if w.variant is AdapterVariant.LORA:
        return np.zeros_like(x_norm)
    if x_norm.shape[-1] != w.down.shape[0] or w.down.shape[1] != w.up.shape[0]:
        raise tensor.DimensionError(f"adapter {w.down.shape}->{w.up.shape} cannot take width {x_norm.shape[-1]}")
    with tensor.op_tag("adapter"):
        return tensor.matmul(np.maximum(tensor.matmul(x_norm, w.down), 0.0), w.up)


def attention(q_src, kv_src, frozen: FrozenLayerWeights, adapters: AdapterWeights | None = None) -> np.ndarray:
    """Multi-head scaled dot-product attention of ``q_src`` over ``kv_src``."""
    q_src = _check_input(q_src, frozen.d)
    kv_src = _check_input(kv_src, frozen.d)
    w = _Weights(frozen, adapters or AdapterWeights(), None)
    return _attention(ad.const(q_src), ad.const(kv_src), w).value


def layer_forward(x, frozen: FrozenLayerWeights, adapters: AdapterWeights, router: RouterParams,
                  cfg: CodaConfig) -> LayerOutput:
    x = _check_input(x, frozen.d)
    if x.shape[-2] != cfg.n:
        raise tensor.DimensionError(f"input has {x.shape[-2]} tokens, config says n={cfg.n}")
    w = _Weights(frozen, adapters, router)
    y, z_adapter, m, lam, idx = coda_graph(ad.const(x), w, w.leaves["router.w"], cfg.capacity, cfg)
    sel = SelectionResult(m=m.value, lam=lam.value, selected_indices=idx)
    return LayerOutput(y.value, sel, z_adapter.value, cache=(y, w.leaves))


def dense_layer_forward(x, frozen: FrozenLayerWeights, adapters: AdapterWeights,
                        ln_eps: float = tensor.DEFAULT_LN_EPS) -> LayerOutput:
    """Parallel-adapter baseline: every token goes through the frozen block, no router."""
    x = _check_input(x, frozen.d)
    w = _Weights(frozen, adapters, None)
    y, z_adapter = dense_graph(ad.const(x), w, ln_eps)
    return LayerOutput(y.value, None, z_adapter.value, cache=(y, w.leaves))


def layer_backward(out: LayerOutput, dy) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dy * y)`` w.r.t. the trainable parameters only."""
    if out.cache is None:
        raise StateError("layer output carries no forward cache")
    y, leaves = out.cache
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != y.shape:
        raise tensor.DimensionError(f"cotangent {dy.shape} does not match output {y.shape}")
    grads = ad.backward(y, dy, wrt=leaves.values())
    return {name: grads[id(var)] for name, var in leaves.items()}
