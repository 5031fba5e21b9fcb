"""Per-layer routing maps: the soft top-k weights of every token as a grayscale image."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor
from .layer import CodaConfig, _Weights, coda_graph
from .training import Model


@dataclass
class Fixture:
    x: np.ndarray  # (n, d)
    grid: tuple[int, int] | None = None


def load_fixture(path: str | Path) -> Fixture:
    """Tensor text file; an optional ``# grid H W`` line lays the tokens out row-major."""
    text = Path(path).read_text()
    x = tensor.parse_tensor(text)
    directives = tensor.tensor_directives(text)
    grid = None
    if "grid" in directives:
        try:
            h, w = (int(v) for v in directives["grid"])
        except ValueError as exc:
            raise ValueError(f"bad grid directive {directives['grid']}") from exc
        if h * w != x.shape[0]:
            raise tensor.DimensionError(f"grid {h}x{w} does not hold {x.shape[0]} tokens")
        grid = (h, w)
    return Fixture(x, grid)


def routing_weights(model: Model, cfg: CodaConfig, x: np.ndarray, k: int | None = None) -> list[np.ndarray]:
    """Soft top-k weights of each layer for one input sequence (or a batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (cfg.n, cfg.d):
        raise tensor.DimensionError(f"input {x.shape} does not match n={cfg.n}, d={cfg.d}")
    k = cfg.capacity if k is None else k
    h = ad.const(x)
    out = []
    for layer in model.layers:
        w = _Weights(layer.frozen, layer.adapters, layer.router)
        h, _, _, lam, _ = coda_graph(h, w, w.leaves["router.w"], k, cfg)
        out.append(lam.value)
    return out


def to_pixels(lam: np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Weights in [0, 1] mapped to 8-bit gray, one row unless a grid is given."""
    lam = np.asarray(lam, dtype=np.float64)
    pixels = np.rint(np.clip(lam, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels.reshape(grid) if grid else pixels.reshape(1, -1)


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Binary (P5) PGM with maxval 255."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise tensor.DimensionError(f"PGM needs a 2-D image, got {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def lambda_csv(maps: dict[int, np.ndarray]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "position", "lambda"])
    for layer, lam in maps.items():
        for pos, value in enumerate(np.asarray(lam).ravel()):
            writer.writerow([layer, pos, repr(float(value))])
    return buf.getvalue()


def write_heatmaps(model: Model, cfg: CodaConfig, fixture: Fixture, layers: list[int],
                   out_dir: str | Path) -> list[Path]:
    """One ``layer<i>.pgm`` per requested layer plus ``lambda.csv``; returns the written paths."""
    if fixture.x.ndim != 2:
        raise tensor.DimensionError("fixture must hold one sequence")
    for i in layers:
        if not 0 <= i < len(model.layers):
            raise IndexError(f"layer {i} outside [0, {len(model.layers)})")
    weights = routing_weights(model, cfg, fixture.x)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in layers:
        path = out_dir / f"layer{i}.pgm"
        path.write_bytes(encode_pgm(to_pixels(weights[i], fixture.grid)))
        written.append(path)
    csv_path = out_dir / "lambda.csv"
    csv_path.write_text(lambda_csv({i: weights[i] for i in layers}))
    written.append(csv_path)
    return written
