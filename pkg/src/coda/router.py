"""Token router: scores, selection weights ``m`` and the one-hot selection ``P``."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor
from .soft_topk import CapacityError, EpsSchedule, hard_topk_mask


class RouterVariant(str, enum.Enum):
    SOFT_TOPK = "soft_topk"
    SIGMOID_GATE = "sigmoid_gate"
    TRUNCATION = "truncation"


@dataclass
class RouterParams:
    w: np.ndarray

    @classmethod
    def init(cls, d: int, rng: tensor.Rng) -> "RouterParams":
        return cls(rng.normal(d, std=1.0 / np.sqrt(d)))


@dataclass
class SelectionResult:
    """Routing decision for one sequence (or a batch, along leading axes).

    ``selected_indices`` is ascending along its last axis, so row ``i`` of
    ``P`` picks token ``selected_indices[..., i]``.
    """

    m: np.ndarray
    lam: np.ndarray
    selected_indices: np.ndarray

    @property
    def n(self) -> int:
        return self.m.shape[-1]

    @property
    def k(self) -> int:
        return self.selected_indices.shape[-1]

    @property
    def P(self) -> np.ndarray:
        p = np.zeros(self.selected_indices.shape + (self.n,))
        np.put_along_axis(p, self.selected_indices[..., None], 1.0, axis=-1)
        return p

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.m.shape, dtype=np.int64)
        np.put_along_axis(out, self.selected_indices, 1, axis=-1)
        return out


def _indices_from_mask(mask: np.ndarray, k: int) -> np.ndarray:
    # stable argsort on -mask lists selected positions first, in ascending order
    return np.argsort(-mask, axis=-1, kind="stable")[..., :k]


def route_graph(x_norm: ad.Var, w: ad.Var, k: int, variant: RouterVariant | str, sched: EpsSchedule):
    """Differentiable routing. Returns ``(m, lam, selected_indices)``.

    The hard selection is a constant; gradients reach ``w`` only through ``m``.
    """
    variant = RouterVariant(variant)
    n = x_norm.shape[-2]
    if k != int(k) or not 1 <= k <= n:
        raise CapacityError(f"k={k} outside [1, {n}]")
    if variant is RouterVariant.TRUNCATION:
        mask = np.zeros(x_norm.shape[:-1])
        mask[..., :k] = 1.0
        idx = np.broadcast_to(np.arange(k), x_norm.shape[:-2] + (k,)).copy()
        return ad.const(mask), ad.const(mask), idx
    with tensor.op_tag("router"):
        s = ad.reshape(x_norm @ ad.expand_last(w), x_norm.shape[:-1])
    if variant is RouterVariant.SOFT_TOPK:
        lam = ad.soft_topk(s, k, sched)
    else:
        lam = ad.sigmoid(s)
    mask = hard_topk_mask(lam.value, k)
    idx = _indices_from_mask(mask, k)
    m = lam * mask.astype(np.float64)
    return m, lam, idx


def route(x_norm, params: RouterParams, k: int, variant: RouterVariant | str = RouterVariant.SOFT_TOPK,
          sched: EpsSchedule = EpsSchedule()) -> SelectionResult:
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if not np.all(np.isfinite(x_norm)):
        raise ValueError("x_norm contains non-finite entries")
    if params.w.shape != (x_norm.shape[-1],):
        raise tensor.DimensionError(f"router weight {params.w.shape} does not match width {x_norm.shape[-1]}")
    m, lam, idx = route_graph(ad.const(x_norm), ad.const(params.w), k, variant, sched)
    return SelectionResult(m=m.value, lam=lam.value, selected_indices=idx)


def gather(x_norm, sel: SelectionResult) -> np.ndarray:
    """``P @ x_norm`` as a row gather."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if x_norm.shape[-2] != sel.n:
        raise tensor.DimensionError(f"input has {x_norm.shape[-2]} rows, selection expects {sel.n}")
    return np.take_along_axis(x_norm, sel.selected_indices[..., None], axis=-2)


def scatter(z_routed, sel: SelectionResult, n: int) -> np.ndarray:
    """``P.T @ z_routed``: selected rows carry ``z_routed``, the rest are zero."""
    z_routed = np.asarray(z_routed, dtype=np.float64)
    if z_routed.shape[-2] != sel.k or n != sel.n:
        raise tensor.DimensionError(f"cannot scatter {z_routed.shape} with k={sel.k} into n={n}")
    out = np.zeros(z_routed.shape[:-2] + (n, z_routed.shape[-1]))
    np.put_along_axis(out, sel.selected_indices[..., None], z_routed, axis=-2)
    return out
