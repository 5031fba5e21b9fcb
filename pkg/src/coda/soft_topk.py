"""Entropy-regularized soft top-k.

Solves ``max_l s.l + eps*H(l)`` subject to ``sum(l) = k`` and ``0 <= l <= 1`` by
coordinate ascent on the dual variables ``(a, b)``, with eps annealed from a
large starting value down to the target. All functions operate on the last
axis and accept arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor


class CapacityError(ValueError):
    """Requested capacity k is outside the feasible range."""


@dataclass(frozen=True)
class EpsSchedule:
    eps0: float = 4.0
    eps_target: float = 0.03
    beta: float = 0.7
    T: int = 20

    def __post_init__(self):
        if not self.eps_target > 0:
            raise ValueError("eps_target must be positive")
        if self.eps0 < self.eps_target:
            raise ValueError("eps0 must be >= eps_target")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def text(cls, T: int = 20) -> "EpsSchedule":
        return cls(eps0=4.0, eps_target=0.03, beta=0.7, T=T)

    @classmethod
    def speech(cls, T: int = 20) -> "EpsSchedule":
        return cls(eps0=4.0, eps_target=1.0, beta=0.85, T=T)

    def epsilons(self) -> list[float]:
        """eps used at iterations 1..T."""
        out, eps = [], self.eps0
        for _ in range(self.T):
            eps = max(self.beta * eps, self.eps_target)
            out.append(eps)
        return out


@dataclass
class SoftTopkResult:
    lam: np.ndarray
    a: np.ndarray
    b: np.ndarray
    constraint_residual: np.ndarray
    iterations_run: int


# scalar ops per score entry in one dual iteration: add, divide, subtract max,
# exp, accumulate, negate-add, min
OPS_PER_ENTRY_PER_ITER = 7
# final readout: add, add, divide, exp
OPS_PER_ENTRY_READOUT = 4


def _check_scores(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] < 1:
        raise ValueError("score vector must have at least one entry")
    if not np.all(np.isfinite(s)):
        raise ValueError("score vector contains non-finite entries")
    return s


def _check_k(k: int) -> int:
    if k != int(k) or k < 1:
        raise CapacityError(f"capacity k must be a positive integer, got {k}")
    return int(k)


def _forward(s: np.ndarray, k: int, sched: EpsSchedule):
    n = s.shape[-1]
    epsilons = sched.epsilons()
    log_k = math.log(k)
    b = np.zeros_like(s)
    a_hist, b_hist = [], [b]
    a = np.zeros(s.shape[:-1])
    for eps in epsilons:
        a = eps * log_k - eps * tensor.logsumexp((s + b) / eps)
        b = np.minimum(-s - a[..., None], 0.0)
        a_hist.append(a)
        b_hist.append(b)
    eps = epsilons[-1]
    # s + b + a with b = min(-s - a, 0), written so saturated entries come out exactly 1
    lam = np.exp(np.minimum(s + a[..., None], 0.0) / eps)
    tensor.record_ops(int(np.prod(s.shape[:-1], dtype=np.int64)) * n
                      * (OPS_PER_ENTRY_PER_ITER * len(epsilons) + OPS_PER_ENTRY_READOUT), "soft_topk")
    return lam, a, b, (epsilons, a_hist, b_hist)


def _saturated(s: np.ndarray, k: int) -> SoftTopkResult:
    batch = s.shape[:-1]
    return SoftTopkResult(
        lam=np.ones_like(s),
        a=np.zeros(batch),
        b=np.zeros_like(s),
        constraint_residual=np.zeros(batch),
        iterations_run=0,
    )


def soft_topk(s, k: int, sched: EpsSchedule = EpsSchedule()) -> SoftTopkResult:
    """Soft top-k weights of ``s`` along the last axis after ``sched.T`` dual iterations.

    ``k >= n`` returns all ones without iterating.
    """
    s = _check_scores(s)
    k = _check_k(k)
    if k >= s.shape[-1]:
        return _saturated(s, k)
    lam, a, b, _ = _forward(s, k, sched)
    return SoftTopkResult(lam, a, b, np.abs(lam.sum(axis=-1) - k), sched.T)


def _backward(s: np.ndarray, lam: np.ndarray, trace, grad_lam: np.ndarray) -> np.ndarray:
    epsilons, a_hist, b_hist = trace
    eps = epsilons[-1]
    g_z = grad_lam * lam / eps
    g_s = g_z.copy()
    g_b = g_z
    g_a = g_z.sum(axis=-1)
    for t in range(len(epsilons) - 1, -1, -1):
        eps_t, a_t = epsilons[t], a_hist[t]
        # b_t = min(-s - a_t, 0)
        active = (-s - a_t[..., None]) < 0.0
        g_branch = np.where(active, g_b, 0.0)
        g_s -= g_branch
        g_a = g_a - g_branch.sum(axis=-1)
        # a_t = eps_t*ln k - eps_t*logsumexp((s + b_{t-1}) / eps_t)
        p = tensor.row_softmax((s + b_hist[t]) / eps_t)
        g_u = -g_a[..., None] * p
        g_s += g_u
        g_b = g_u
        g_a = np.zeros_like(g_a)
    return g_s


def soft_topk_backward(s, k: int, sched: EpsSchedule, grad_lambda) -> np.ndarray:
    """Vector-Jacobian product of :func:`soft_topk` w.r.t. ``s``.

    Differentiates the exact unrolled iterations, eps schedule included.
    """
    s = _check_scores(s)
    k = _check_k(k)
    grad_lambda = np.asarray(grad_lambda, dtype=np.float64)
    if grad_lambda.shape != s.shape:
        raise tensor.DimensionError(f"cotangent shape {grad_lambda.shape} != score shape {s.shape}")
    if k >= s.shape[-1]:
        return np.zeros_like(s)
    lam, _, _, trace = _forward(s, k, sched)
    return _backward(s, lam, trace, grad_lambda)


def soft_topk_vjp(s, k: int, sched: EpsSchedule):
    """Forward pass plus a closure computing the VJP, sharing one trace."""
    s = _check_scores(s)
    k = _check_k(k)
    if k >= s.shape[-1]:
        return np.ones_like(s), lambda g: np.zeros_like(s)
    lam, _, _, trace = _forward(s, k, sched)
    return lam, lambda g: _backward(s, lam, trace, np.asarray(g, dtype=np.float64))


def oracle_bisection(s, k: int, eps: float, tol: float = 1e-10, max_iter: int = 400) -> SoftTopkResult:
    """Exact soft top-k of a single score vector by bisection on the dual ``a``.

    With ``b`` eliminated, ``l_i(a) = min(1, exp((s_i + a)/eps))`` is monotone
    in ``a``; the root of ``sum(l(a)) = k`` is found by bracketing.
    """
    s = _check_scores(s)
    if s.ndim != 1:
        raise tensor.DimensionError(f"oracle expects a 1-D score vector, got {s.shape}")
    k = _check_k(k)
    n = s.size
    if k > n:
        raise CapacityError(f"k={k} exceeds n={n}")
    if eps <= 0:
        raise ValueError("eps must be positive")

    def lam_at(a: float) -> np.ndarray:
        return np.exp(np.minimum(s + a, 0.0) / eps)

    lo = eps * math.log(k / n) - s.max()
    hi = -s.min()
    a = hi
    for _ in range(max_iter):
        if k == n:
            break
        a = 0.5 * (lo + hi)
        total = lam_at(a).sum()
        if abs(total - k) < tol or not lo < a < hi:
            break
        if total < k:
            lo = a
        else:
            hi = a
    lam = lam_at(a)
    return SoftTopkResult(
        lam=lam,
        a=np.asarray(a),
        b=np.minimum(-s - a, 0.0),
        constraint_residual=np.asarray(abs(lam.sum() - k)),
        iterations_run=0,
    )


def hard_topk_mask(v, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries along the last axis; ties go to the lower index."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if k != int(k) or not 1 <= k <= n:
        raise CapacityError(f"k={k} outside [1, {n}]")
    order = np.argsort(-v, axis=-1, kind="stable")[..., : int(k)]
    mask = np.zeros(v.shape, dtype=np.int64)
    np.put_along_axis(mask, order, 1, axis=-1)
    return mask


def capacity(n: int, r: float) -> int:
    """Tokens routed for reduction factor ``r``: ceil(n / r)."""
    if r < 1:
        raise ValueError("reduction factor must be >= 1")
    return max(1, min(n, math.ceil(n / r - 1e-12)))
