"""Property and oracle checks behind the ``verify`` subcommand.

Every check returns :class:`CheckResult` rows whose ``value`` column depends
only on seeds, so the CSV written by :func:`results_csv` is reproducible
byte for byte. Runtimes are kept on the result object but never written.
"""

from __future__ import annotations

import csv
import functools
import io
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor
from .flops import base_config, count_flops, instrumented_counts, relative_gap, xl_config
from .layer import (
    AdapterVariant, AttentionVariant, CodaConfig, CodaLayerParams, dense_layer_forward, layer_backward,
    layer_forward, parameter_census,
)
from .router import RouterVariant
from .soft_topk import EpsSchedule, _forward, hard_topk_mask, oracle_bisection, soft_topk, soft_topk_backward
from .training import TRACE_COLUMNS, SyntheticTask, TrainConfig, router_ablation, toy_config, train

FD_STEP = 1e-5
FD_RTOL = 1e-3


def fd_noise(loss: float, condition: float = 1.0) -> float:
    """Rounding noise of a central difference of a loss of this magnitude.

    ``condition`` is the relative error amplification of the evaluation itself.
    """
    return 16 * np.finfo(np.float64).eps * max(1.0, abs(loss)) * max(1.0, condition) / FD_STEP


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.criterion}. {self.name}: value={self.value:.6g} threshold={self.threshold:.6g} {self.detail}".rstrip()


def _timed(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        results = fn(*args, **kwargs)
        elapsed = time.perf_counter() - start
        for r in results:
            r.seconds = elapsed
        return results
    return wrapper


# ---------------------------------------------------------------------------
# soft top-k


def oracle_cases(seed: int = 0, per_cell: int = 34):
    """Standard-normal score vectors over n in {4, 8, 16, 64} and k in {1, n/4, n/2, n}."""
    rng = tensor.Rng(seed)
    for n in (4, 8, 16, 64):
        for k in sorted({1, n // 4, n // 2, n}):
            for _ in range(per_cell):
                yield rng.normal(n), k


@_timed
def check_oracle(sched: EpsSchedule, label: str, seed: int = 0) -> list[CheckResult]:
    worst_gap = worst_res = 0.0
    failures = total = 0
    for s, k in oracle_cases(seed):
        it = soft_topk(s, k, sched)
        ref = oracle_bisection(s, k, sched.eps_target)
        gap = float(np.max(np.abs(it.lam - ref.lam)))
        res = float(it.constraint_residual) / k
        worst_gap, worst_res = max(worst_gap, gap), max(worst_res, res)
        failures += not (gap < 1e-3 and res < 1e-3)
        total += 1
    detail = f"{label}: {failures}/{total} instances off; worst residual/k={worst_res:.3g}"
    return [CheckResult(1, f"soft top-k vs bisection oracle ({label})", failures == 0, worst_gap, 1e-3, detail)]


@_timed
def check_limits(seed: int = 0, count: int = 100) -> list[CheckResult]:
    rng = tensor.Rng(seed)
    sched = EpsSchedule.text()
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 65))
        s = rng.normal(n)
        lam = soft_topk(s, 1, sched).lam
        worst = max(worst, float(np.max(np.abs(lam - tensor.row_softmax(s / sched.eps_target)))))
    out = [CheckResult(2, "k=1 equals softmax(s/eps)", worst < 1e-3, worst, 1e-3, f"{count} instances")]

    hard = EpsSchedule(eps0=4.0, eps_target=1e-3, beta=0.7, T=20)
    misses = 0
    for _ in range(count):
        n = int(rng.integers(2, 17))
        s = np.cumsum(0.5 + rng.uniform(n))[rng.permutation(n)]
        s = s - s.mean()
        k = int(rng.integers(1, n))
        lam = soft_topk(s, k, hard).lam
        misses += not np.array_equal(np.rint(lam).astype(np.int64), hard_topk_mask(s, k))
    out.append(CheckResult(2, "eps=1e-3 rounds to hard top-k", misses == 0, misses, 0,
                           f"{misses}/{count} instances differ"))
    return out


# ---------------------------------------------------------------------------
# gradients


def fd_agrees(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> np.ndarray:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= FD_RTOL * scale + atol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    scale = np.maximum(np.abs(analytic), np.abs(numeric)) + atol / FD_RTOL
    return float(np.max(np.abs(analytic - numeric) / scale))


def _clip_pattern(s: np.ndarray, k: int, sched: EpsSchedule) -> np.ndarray:
    """Which entries the upper-bound clip is active on, at every iteration."""
    _, _, _, (_, a_hist, _) = _forward(s, k, sched)
    return np.stack([(-s - a) < 0.0 for a in a_hist])


def soft_topk_fd_instance(rng: tensor.Rng, sched: EpsSchedule):
    """Random instance and its central differences, or None when a step crosses a clip kink."""
    n = int(rng.integers(2, 9))
    k = int(rng.integers(1, n))
    s = rng.normal(n)
    g = rng.normal(n)
    analytic = soft_topk_backward(s, k, sched, g)
    pattern = _clip_pattern(s, k, sched)
    numeric = np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = FD_STEP
        if not (np.array_equal(_clip_pattern(s + e, k, sched), pattern)
                and np.array_equal(_clip_pattern(s - e, k, sched), pattern)):
            return None
        numeric[i] = (g @ soft_topk(s + e, k, sched).lam - g @ soft_topk(s - e, k, sched).lam) / (2 * FD_STEP)
    # exp((s + a + b) / eps) turns one rounding step in the exponent into a relative error of |s| / eps
    condition = float(np.max(np.abs(s))) / sched.eps_target
    return analytic, numeric, fd_noise(float(np.abs(g) @ soft_topk(s, k, sched).lam), condition)


def random_layer(rng: tensor.Rng, variant_seed: int):
    """Small layer with every trainable tensor moved off its initial value."""
    n = int(rng.integers(2, 9))
    d = 8 if variant_seed % 2 else 4
    k = int(rng.integers(1, n + 1))
    cfg = CodaConfig(
        n=n, d=d, heads=2, d_ffn=2 * d, d_adpt=3, k=k,
        attention_variant=list(AttentionVariant)[variant_seed % 2],
        router_variant=(RouterVariant.SOFT_TOPK, RouterVariant.SIGMOID_GATE)[(variant_seed // 2) % 2],
        adapter_variant=list(AdapterVariant)[(variant_seed // 4) % 2],
        lora_rank=2, eps_target=(0.03, 1.0)[(variant_seed // 8) % 2],
        beta=(0.7, 0.85)[(variant_seed // 8) % 2],
    )
    params = CodaLayerParams.init(cfg, rng)
    for arr in params.trainable().values():
        arr += rng.normal(arr.shape, 0.3)
    return cfg, params, rng.normal((n, d)), rng.normal((n, d))


def layer_fd_instance(rng: tensor.Rng, variant_seed: int):
    cfg, params, x, dy = random_layer(rng, variant_seed)
    out = layer_forward(x, params.frozen, params.adapters, params.router, cfg)
    grads = layer_backward(out, dy)
    selected = out.selection.selected_indices.copy()
    analytic, numeric = [], []
    for name, arr in params.trainable().items():
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            vals = []
            for sign in (1.0, -1.0):
                arr[i] = orig + sign * FD_STEP
                o = layer_forward(x, params.frozen, params.adapters, params.router, cfg)
                if not np.array_equal(o.selection.selected_indices, selected):
                    raise RuntimeError("finite-difference step changed the hard selection")
                vals.append(float(np.sum(dy * o.y)))
            arr[i] = orig
            analytic.append(grads[name][i])
            numeric.append((vals[0] - vals[1]) / (2 * FD_STEP))
    condition = 1.0
    if cfg.router_variant is RouterVariant.SOFT_TOPK:
        scores = tensor.layer_norm(x, params.frozen.ln_att.gain, params.frozen.ln_att.bias, cfg.ln_eps) @ params.router.w
        condition = float(np.max(np.abs(scores))) / cfg.eps_target
    return np.array(analytic), np.array(numeric), fd_noise(float(np.sum(np.abs(dy * out.y))), condition)


@_timed
def check_gradients(seed: int = 0, count: int = 100) -> list[CheckResult]:
    out = []
    rng = tensor.Rng(seed)
    for label, sched in (("text", EpsSchedule.text()), ("speech", EpsSchedule.speech())):
        bad, worst, done, skipped = 0, 0.0, 0, 0
        while done < count:
            inst = soft_topk_fd_instance(rng, sched)
            if inst is None:
                skipped += 1
                continue
            a, nu, atol = inst
            bad += int(np.sum(~fd_agrees(a, nu, atol)))
            worst = max(worst, _rel_err(a, nu, atol))
            done += 1
        out.append(CheckResult(3, f"soft_topk_backward vs finite differences ({label})", bad == 0, worst, FD_RTOL,
                               f"{bad} coordinates off over {count} instances, {skipped} kink draws redrawn"))
    rng = tensor.Rng(seed + 1)
    bad, worst, coords = 0, 0.0, 0
    for i in range(count):
        a, nu, atol = layer_fd_instance(rng, i)
        bad += int(np.sum(~fd_agrees(a, nu, atol)))
        worst = max(worst, _rel_err(a, nu, atol))
        coords += a.size
    out.append(CheckResult(3, "layer_backward vs finite differences", bad == 0, worst, FD_RTOL,
                           f"{bad}/{coords} coordinates off over {count} instances"))
    return out


# ---------------------------------------------------------------------------
# layer equivalences


@_timed
def check_dense_equivalence(seed: int = 0, count: int = 50) -> list[CheckResult]:
    rng = tensor.Rng(seed)
    worst, row_mismatch = 0.0, 0
    for i in range(count):
        heads = int(rng.integers(1, 4))
        d = heads * int(rng.integers(2, 6))
        n = int(rng.integers(2, 13))
        cfg = CodaConfig(n=n, d=d, heads=heads, d_ffn=int(rng.integers(4, 33)), d_adpt=int(rng.integers(1, 9)),
                         attention_variant=list(AttentionVariant)[i % 2],
                         adapter_variant=list(AdapterVariant)[(i // 2) % 2], lora_rank=2)
        params = CodaLayerParams.init(cfg, rng)
        for arr in params.trainable().values():
            if arr is not params.router.w:
                arr += rng.normal(arr.shape, 0.3)
        x = rng.normal((n, d))
        full = layer_forward(x, params.frozen, params.adapters, params.router, cfg.with_capacity(n))
        dense = dense_layer_forward(x, params.frozen, params.adapters, cfg.ln_eps)
        worst = max(worst, float(np.max(np.abs(full.y - dense.y))))
        if n > 1:
            part = layer_forward(x, params.frozen, params.adapters, params.router,
                                 cfg.with_capacity(int(rng.integers(1, n))))
            off = part.selection.mask == 0
            row_mismatch += int(np.sum(part.y[off] != (x + part.z_adapter)[off]))
    return [
        CheckResult(4, "k=n layer equals dense baseline", worst <= 1e-9, worst, 1e-9, f"{count} configs"),
        CheckResult(4, "unselected rows are x + adapter exactly", row_mismatch == 0, row_mismatch, 0,
                    f"{row_mismatch} entries differ"),
    ]


# ---------------------------------------------------------------------------
# training


@_timed
def check_router_learning(seeds=(0, 1, 2), steps: int = 2000) -> list[CheckResult]:
    rows = router_ablation(seeds=seeds, steps=steps)
    by = {(r["seed"], r["variant"]): r for r in rows}
    soft = [by[s, "soft_topk"] for s in seeds]
    trunc = [by[s, "truncation"] for s in seeds]
    sig = [by[s, "sigmoid_gate"] for s in seeds]
    recall = float(np.mean([r["recall"] for r in soft]))
    gap = float(np.mean([a["accuracy"] - b["accuracy"] for a, b in zip(soft, trunc)]))
    sig_ok = sum(g["accuracy"] < s["accuracy"] for g, s in zip(sig, soft))
    per_seed = " ".join(f"seed{s}:soft={a['accuracy']:.3f}/sig={g['accuracy']:.3f}/trunc={t['accuracy']:.3f}"
                        for s, a, g, t in zip(seeds, soft, sig, trunc))
    return [
        CheckResult(5, "soft top-k selection recall", recall > 0.9, recall, 0.9,
                    "per seed " + " ".join(f"{r['recall']:.3f}" for r in soft)),
        CheckResult(5, "soft top-k minus truncation accuracy", gap > 0.10, gap, 0.10, per_seed),
        CheckResult(5, "sigmoid gate below soft top-k", sig_ok >= 2, sig_ok, 2, f"{sig_ok}/{len(seeds)} seeds"),
    ]


# ---------------------------------------------------------------------------
# FLOPs and census


@_timed
def check_flops() -> list[CheckResult]:
    worst = 0.0
    for cfg in (base_config(), base_config(attention_variant="k_to_all"), base_config(adapter_variant="lora")):
        worst = max(worst, relative_gap(count_flops(cfg).coda, instrumented_counts(cfg)))
    ratio = count_flops(base_config(r=None, k=192)).token_linear_reduction()
    share = max(count_flops(c).soft_topk_share
                for make in (base_config, xl_config) for r in (2.0, 3.0, 4.0, 8.0)
                for c in (make(r=r), make(r=r, attention_variant="k_to_all")))
    return [
        CheckResult(6, "closed form vs instrumented counter", worst <= 0.01, worst, 0.01, "Base config, 3 variants"),
        CheckResult(6, "n=512 k=192 projection+FFN reduction", ratio == Fraction(512, 192), float(ratio),
                    512 / 192, f"exact ratio {ratio}"),
        CheckResult(6, "soft top-k FLOPs share for d>=768", share < 0.02, share, 0.02, "max over Base/XL, r in 2..8"),
    ]


def trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(TRACE_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in trace:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


@_timed
def check_determinism(steps: int = 40) -> list[CheckResult]:
    tc = TrainConfig(steps=steps, eval_interval=10, eval_size=64, seed=7)
    runs = [trace_csv(train(SyntheticTask(seed=7), toy_config(), tc).trace) for _ in range(2)]
    checks = [results_csv(check_limits(seed=3, count=10) + check_flops()) for _ in range(2)]
    same = runs[0] == runs[1] and checks[0] == checks[1]
    return [CheckResult(7, "repeated runs give identical CSV", same, float(same), 1.0, "train trace and check table")]


@_timed
def check_census() -> list[CheckResult]:
    cfg = base_config()
    census = parameter_census(CodaLayerParams.init(cfg, tensor.Rng(0)))
    frac = census["trainable"] / census["total"]
    exact = census["trainable"] == census["adapter"] + census["router"] + census["layer_norm"]
    return [CheckResult(8, "trainable fraction, Base layer", frac < 0.03 and exact, frac, 0.03,
                        f"{census['trainable']}/{census['total']} parameters")]


# ---------------------------------------------------------------------------


def run_all(include_training: bool = True, training_steps: int = 2000) -> list[CheckResult]:
    results = []
    results += check_oracle(EpsSchedule.text(), "text schedule")
    results += check_oracle(EpsSchedule.speech(), "speech schedule")
    results += check_limits()
    results += check_gradients()
    results += check_dense_equivalence()
    if include_training:
        results += check_router_learning(steps=training_steps)
    results += check_flops()
    results += check_determinism()
    results += check_census()
    return results


def results_csv(results: list[CheckResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["criterion", "check", "passed", "value", "threshold"])
    for r in results:
        writer.writerow([r.criterion, r.name, int(r.passed), repr(float(r.value)), repr(float(r.threshold))])
    return buf.getvalue()

