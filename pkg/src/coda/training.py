"""Toy finetuning loop on a planted-relevance sequence classification task.

Only the adapter, router, layer-norm and head parameters move; the frozen
block weights are checked bit-for-bit at the end of every run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor
from .layer import CodaConfig, CodaLayerParams, _Weights, coda_graph, parameter_census
from .router import RouterVariant

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    """Sequences of random vocabulary embeddings, a few of which are marked.

    Marked (relevant) tokens carry a fixed offset direction; the label is the
    sign of a fixed readout of the mean of their vocabulary embeddings. The
    readout is orthogonal to the offset, so the mark carries no label signal.

    ``context_shift`` adds a per-sequence random shift along the same offset
    direction to every token, so a mark is only recognisable relative to the
    other tokens of its sequence, not against a fixed per-token threshold.
    """

    n: int = 16
    d: int = 32
    vocab: int = 256
    relevant_count: int = 3
    seed: int = 0
    offset_scale: float = 4.0
    context_shift: float = 3.0
    scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.relevant_count <= self.n:
            raise ValueError(f"relevant_count={self.relevant_count} outside [1, {self.n}]")


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray
    relevant: np.ndarray  # (batch, n) 0/1
    clean: np.ndarray  # embeddings before the offset


class TaskStream:
    """Deterministic batches: batch ``i`` depends only on the task seed and ``i``."""

    def __init__(self, spec: SyntheticTask):
        self.spec = spec
        rng = tensor.Rng(spec.seed)
        self.embeddings = rng.normal((spec.vocab, spec.d))
        basis, _ = np.linalg.qr(rng.normal((spec.d, 2)))
        self.offset = basis[:, 0] * spec.offset_scale
        self.readout = basis[:, 1]

    def planted_label(self, clean: np.ndarray, relevant: np.ndarray) -> np.ndarray:
        pooled = (clean * relevant[..., None]).sum(axis=-2) / relevant.sum(axis=-1, keepdims=True)
        return (pooled @ self.readout > 0).astype(np.int64)

    def batch(self, size: int, index: int) -> Batch:
        spec = self.spec
        rng = tensor.Rng(spec.seed).spawn(index + 1)
        tokens = rng.integers(0, spec.vocab, (size, spec.n))
        clean = self.embeddings[tokens]
        relevant = np.zeros((size, spec.n))
        np.put_along_axis(relevant, rng.choice_rows(spec.n, spec.relevant_count, size), 1.0, axis=-1)
        shift = rng.normal((size, 1, 1), spec.context_shift) if spec.context_shift else 0.0
        x = spec.scale * (clean + (relevant[..., None] + shift / spec.offset_scale) * self.offset)
        return Batch(x, self.planted_label(clean, relevant), relevant, clean)

    def __iter__(self):
        index = 0
        while True:
            yield self.batch(1, index)
            index += 1


def make_task(spec: SyntheticTask) -> TaskStream:
    return TaskStream(spec)


@dataclass(frozen=True)
class AnnealSchedule:
    n: int
    k_end: int
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if not 0.1 <= self.warmup_fraction <= 0.2:
            raise ValueError("warmup_fraction must lie in [0.1, 0.2]")
        if not 1 <= self.k_end <= self.n:
            raise ValueError(f"k_end={self.k_end} outside [1, {self.n}]")


def anneal_capacity(step: int, total: int, sched: AnnealSchedule) -> int:
    """k decreases linearly from n to k_end over the warmup steps, then stays put."""
    if step > total:
        raise ValueError("step exceeds total")
    warmup = math.ceil(sched.warmup_fraction * total)
    if warmup == 0 or step >= warmup:
        return sched.k_end
    k = round(sched.n - (step / warmup) * (sched.n - sched.k_end))
    return int(min(sched.n, max(sched.k_end, k)))


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "adam"  # or "momentum"
    batch_size: int = 32
    eval_interval: int = 100
    eval_size: int = 512
    warmup_fraction: float = 0.1
    layers: int = 2
    seed: int = 0


@dataclass
class Model:
    layers: list[CodaLayerParams]
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def init(cls, cfg: CodaConfig, n_layers: int, rng: tensor.Rng) -> "Model":
        layers = [CodaLayerParams.init(cfg, rng) for _ in range(n_layers)]
        # small but nonzero, so gradients reach the router on the very first step
        return cls(layers, rng.normal((cfg.d, 2), 0.01), np.zeros(2))

    def trainable(self) -> dict[str, np.ndarray]:
        out = {"head.w": self.head_w, "head.b": self.head_b}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.trainable().items()})
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.frozen_arrays().items()})
        return out

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.frozen().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def census(self) -> dict[str, int]:
        total: dict[str, int] = {}
        for layer in self.layers:
            for key, val in parameter_census(layer).items():
                total[key] = total.get(key, 0) + val
        return total


@dataclass
class Forward:
    loss: ad.Var
    logits: np.ndarray
    leaves: dict[str, ad.Var]
    selections: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (idx, lam) per layer


def forward(model: Model, cfg: CodaConfig, k: int, x: np.ndarray, labels: np.ndarray) -> Forward:
    h = ad.const(x)
    leaves: dict[str, ad.Var] = {}
    selections = []
    for i, layer in enumerate(model.layers):
        w = _Weights(layer.frozen, layer.adapters, layer.router)
        h, _, _, lam, idx = coda_graph(h, w, w.leaves["router.w"], k, cfg)
        leaves.update({f"layers.{i}.{name}": v for name, v in w.leaves.items()})
        selections.append((idx, lam.value))
    head_w, head_b = ad.leaf(model.head_w), ad.leaf(model.head_b)
    leaves["head.w"], leaves["head.b"] = head_w, head_b
    logits = ad.mean(h, axis=-2) @ head_w + head_b
    return Forward(ad.cross_entropy(logits, labels), logits.value, leaves, selections)


def selection_recall(idx: np.ndarray, relevant: np.ndarray) -> float:
    """Share of planted-relevant tokens that made it into the routed set."""
    hit = np.take_along_axis(relevant, idx, axis=-1).sum(axis=-1)
    return float(np.mean(hit / relevant.sum(axis=-1)))


def evaluate(model: Model, cfg: CodaConfig, k: int, batch: Batch) -> dict[str, float]:
    out = forward(model, cfg, k, batch.x, batch.labels)
    acc = float(np.mean(out.logits.argmax(axis=-1) == batch.labels))
    recall = float(np.mean([selection_recall(idx, batch.relevant) for idx, _ in out.selections]))
    return {"loss": float(out.loss.value), "accuracy": acc, "recall": recall}


def router_grad_norm(model: Model, cfg: CodaConfig, batch: Batch) -> float:
    """Norm of the loss gradient w.r.t. all router vectors at the target capacity."""
    out = forward(model, cfg, cfg.capacity, batch.x, batch.labels)
    routers = [v for name, v in out.leaves.items() if name.endswith("router.w")]
    grads = ad.backward(out.loss, wrt=routers)
    return math.sqrt(sum(float(np.sum(grads[id(v)] ** 2)) for v in routers))


TRACE_COLUMNS = ("step", "k", "train_loss", "eval_loss", "accuracy", "recall")


@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    frozen_checksum: str
    grad_norm_router_step0: float

    @property
    def final(self) -> dict:
        return self.trace[-1]


def train(task: SyntheticTask, cfg: CodaConfig, tc: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam (or SGD with momentum) on the trainable subset, annealed capacity, CE loss."""
    if tc.optimizer not in ("adam", "momentum"):
        raise ValueError(f"unknown optimizer {tc.optimizer!r}")
    stream = make_task(task)
    model = Model.init(cfg, tc.layers, tensor.Rng(tc.seed))
    checksum = model.frozen_checksum()
    params = model.trainable()
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    second = {name: np.zeros_like(arr) for name, arr in params.items()}
    anneal = AnnealSchedule(cfg.n, cfg.capacity, tc.warmup_fraction)
    eval_batch = stream.batch(tc.eval_size, -1)
    trace: list[dict] = []
    router_norm0 = 0.0
    train_loss = float("nan")

    def record(step: int):
        k = anneal_capacity(step, tc.steps, anneal)
        row = {"step": step, "k": k, "train_loss": train_loss}
        metrics = evaluate(model, cfg, k, eval_batch)
        row.update(eval_loss=metrics["loss"], accuracy=metrics["accuracy"], recall=metrics["recall"])
        trace.append(row)
        log.debug("step %d k=%d loss=%.4f acc=%.3f recall=%.3f", step, k, train_loss, row["accuracy"], row["recall"])

    for step in range(tc.steps):
        if step % tc.eval_interval == 0:
            record(step)
        k = anneal_capacity(step, tc.steps, anneal)
        batch = stream.batch(tc.batch_size, step)
        try:
            out = forward(model, cfg, k, batch.x, batch.labels)
        except ValueError as exc:
            raise DivergenceError(f"forward pass failed at step {step} (k={k}): {exc}") from exc
        train_loss = float(out.loss.value)
        if not math.isfinite(train_loss):
            raise DivergenceError(f"non-finite loss at step {step} (k={k}, lr={tc.lr})")
        grads = ad.backward(out.loss, wrt=out.leaves.values())
        if step == 0:
            router_norm0 = router_grad_norm(model, cfg, batch)
        for name, var in out.leaves.items():
            g = grads[id(var)]
            vel = velocity[name]
            if tc.optimizer == "adam":
                sq = second[name]
                vel *= 0.9
                vel += 0.1 * g
                sq *= 0.999
                sq += 0.001 * g * g
                t = step + 1
                params[name] -= tc.lr * (vel / (1 - 0.9 ** t)) / (np.sqrt(sq / (1 - 0.999 ** t)) + 1e-8)
            else:
                vel *= tc.momentum
                vel += g
                params[name] -= tc.lr * vel
    record(tc.steps)

    final_checksum = model.frozen_checksum()
    if final_checksum != checksum:
        raise AssertionError("frozen weights changed during training")
    return TrainResult(model, trace, final_checksum, router_norm0)


def eval_tradeoff(task: SyntheticTask, cfg: CodaConfig, r_values, tc: TrainConfig = TrainConfig()) -> list[dict]:
    """Train one model per reduction factor and report accuracy next to its FLOPs."""
    from .flops import count_flops

    rows = []
    for r in r_values:
        run_cfg = dataclasses.replace(cfg, r=float(r), k=None)
        result = train(task, run_cfg, tc)
        report = count_flops(run_cfg)
        rows.append({"r": float(r), "k": run_cfg.capacity, "accuracy": result.final["accuracy"],
                     "recall": result.final["recall"], "flops_cond": report.coda_total,
                     "flops_dense": report.dense_total})
    return rows


def toy_config(router: RouterVariant | str = RouterVariant.SOFT_TOPK, **overrides) -> CodaConfig:
    """The n=16, d=32 configuration the router-ablation runs use."""
    # the smoother schedule keeps the router gradient alive at this scale
    base = dict(n=16, d=32, heads=4, d_ffn=128, d_adpt=8, r=4.0, router_variant=router,
                eps_target=1.0, beta=0.85)
    base.update(overrides)
    return CodaConfig(**base)


def router_ablation(seeds=(0, 1, 2), steps: int = 2000,
                    variants=tuple(RouterVariant)) -> list[dict]:
    """Final metrics for each router variant and seed on the default toy task."""
    rows = []
    for seed in seeds:
        task = SyntheticTask(seed=seed)
        for variant in variants:
            variant = RouterVariant(variant)
            result = train(task, toy_config(variant), TrainConfig(steps=steps, seed=seed, eval_interval=steps))
            rows.append({"seed": seed, "variant": variant.value, **result.final})
    return rows
