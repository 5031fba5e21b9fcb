"""Dense float64 substrate shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Leading batch
axes are allowed everywhere; the last two axes are (rows, cols).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DEFAULT_LN_EPS = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@dataclass
class OpCounter:
    """Multiply-add tally, bucketed by a caller-chosen tag."""

    by_tag: dict[str, int] = field(default_factory=dict)

    def add(self, tag: str, count: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(count)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("coda_op_counter", default=None)
_tag: contextvars.ContextVar[str] = contextvars.ContextVar("coda_op_tag", default="other")


@contextlib.contextmanager
def counting() -> Iterator[OpCounter]:
    """Record every multiply-add executed by this module inside the block."""
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def op_tag(tag: str) -> Iterator[None]:
    token = _tag.set(tag)
    try:
        yield
    finally:
        _tag.reset(token)


def record_ops(count: int, tag: str | None = None) -> None:
    """Credit ``count`` scalar operations to the active counter, if any."""
    counter = _counter.get()
    if counter is not None:
        counter.add(tag or _tag.get(), count)


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim < 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[-2] != rows or cols is not None and m.shape[-1] != cols:
        raise DimensionError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product with an explicit shape check.

    Counts ``rows(a) * cols(a) * cols(b)`` multiply-adds per batch element.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a, b)
    counter = _counter.get()
    if counter is not None:
        batch = int(np.prod(out.shape[:-2], dtype=np.int64))
        counter.add(_tag.get(), batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return out


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"gain {gain.shape} / bias {bias.shape} do not match width {x.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def row_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp. Terms are summed in sorted order, so the result
    does not depend on the order of the entries."""
    x = np.asarray(x, dtype=np.float64)
    mx = x.max(axis=axis, keepdims=True)
    terms = np.sort(np.exp(x - mx), axis=axis)
    return np.squeeze(mx, axis=axis) + np.log(terms.sum(axis=axis))


class Rng:
    """Seeded generator; the PCG64 stream is identical across platforms."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_rows(self, n: int, count: int, batch: int) -> np.ndarray:
        """``batch`` independent draws of ``count`` distinct indices out of ``n``."""
        keys = self._gen.random((batch, n))
        return np.argsort(keys, axis=-1, kind="stable")[:, :count]

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed * 1_000_003 + offset)


def format_tensor(m: np.ndarray) -> str:
    m = as_matrix(m)
    if m.ndim != 2:
        raise DimensionError(f"only 2-D matrices can be serialized, got {m.shape}")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    """Inverse of :func:`format_tensor`: header ``rows cols`` then one line per row.

    Blank lines and lines starting with ``#`` are skipped.
    """
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty tensor text")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"bad tensor header {lines[0]!r}") from exc
    body = lines[1 : 1 + rows]
    if len(body) != rows:
        raise DimensionError(f"header declares {rows} rows, found {len(body)}")
    values = [[float(t) for t in ln.split()] for ln in body]
    for i, row in enumerate(values):
        if len(row) != cols:
            raise DimensionError(f"header declares {cols} columns, row {i} has {len(row)}")
    return np.array(values, dtype=np.float64).reshape(rows, cols)


def tensor_directives(text: str) -> dict[str, list[str]]:
    """``# key v1 v2`` comment lines of a tensor text, as ``{key: [v1, v2]}``."""
    out = {}
    for ln in text.splitlines():
        parts = ln.strip().lstrip("#").split() if ln.lstrip().startswith("#") else []
        if parts:
            out[parts[0]] = parts[1:]
    return out


def read_tensor(path: str | Path) -> np.ndarray:
    return parse_tensor(Path(path).read_text())


def write_tensor(path: str | Path, m: np.ndarray) -> None:
    Path(path).write_text(format_tensor(m))
