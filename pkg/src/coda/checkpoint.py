"""Single-file parameter checkpoints.

Layout: one line of JSON (the manifest), then the tensor payloads back to back
in the tensor text format. Each manifest entry records its name, section
(``frozen`` or ``trainable``), original shape, and the byte offset and length
of its payload counted from the first byte after the manifest line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor
from .layer import AdapterWeights, CodaConfig, CodaLayerParams, FrozenLayerWeights, LayerNormParams
from .router import RouterParams
from .training import Model

FORMAT = "coda-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_2d(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def dumps(model: Model, cfg: CodaConfig, meta: dict | None = None) -> bytes:
    sections = [("frozen", model.frozen()), ("trainable", model.trainable())]
    entries, chunks, offset = [], [], 0
    for section, arrays in sections:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            payload = tensor.format_tensor(_as_2d(arr)).encode("ascii")
            entries.append({"name": name, "section": section, "shape": list(arr.shape),
                            "offset": offset, "length": len(payload)})
            chunks.append(payload)
            offset += len(payload)
    manifest = {"format": FORMAT, "version": VERSION, "config": cfg.to_dict(),
                "layers": len(model.layers), "meta": meta or {}, "entries": entries}
    return json.dumps(manifest, sort_keys=True).encode("ascii") + b"\n" + b"".join(chunks)


def save(path: str | Path, model: Model, cfg: CodaConfig, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, cfg, meta))


def loads(data: bytes) -> tuple[Model, CodaConfig, dict]:
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint {manifest.get('format')!r} v{manifest.get('version')}")
    cfg = CodaConfig.from_dict(manifest["config"])
    arrays: dict[str, np.ndarray] = {}
    sections: dict[str, str] = {}
    for entry in manifest["entries"]:
        start, length = entry["offset"], entry["length"]
        if start < 0 or start + length > len(body):
            raise CheckpointError(f"entry {entry['name']} points outside the payload")
        arr = tensor.parse_tensor(body[start:start + length].decode("ascii"))
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"entry {entry['name']} has {arr.size} values, manifest says {shape}")
        arrays[entry["name"]] = arr.reshape(shape)
        sections[entry["name"]] = entry["section"]
    model = _assemble(cfg, manifest["layers"], arrays, sections)
    return model, cfg, manifest.get("meta", {})


def load(path: str | Path) -> tuple[Model, CodaConfig, dict]:
    return loads(Path(path).read_bytes())


def _assemble(cfg: CodaConfig, n_layers: int, arrays: dict, sections: dict) -> Model:
    def take(name: str, section: str) -> np.ndarray:
        if name not in arrays:
            raise CheckpointError(f"missing entry {name}")
        if sections[name] != section:
            raise CheckpointError(f"entry {name} is in section {sections[name]}, expected {section}")
        return arrays[name]

    layers = []
    for i in range(n_layers):
        p = f"layers.{i}."
        frozen = FrozenLayerWeights(
            **{m: take(p + m, "frozen") for m in ("wq", "wk", "wv", "wo", "ffn_in", "ffn_out")},
            heads=cfg.heads,
            ln_att=LayerNormParams(take(p + "ln_att.gain", "trainable"), take(p + "ln_att.bias", "trainable")),
            ln_ffn=LayerNormParams(take(p + "ln_ffn.gain", "trainable"), take(p + "ln_ffn.bias", "trainable")),
        )
        lora_names = sorted({key[len(p) + 5:-2] for key in arrays if key.startswith(p + "lora.")})
        if lora_names:
            adapters = AdapterWeights(cfg.adapter_variant, lora_alpha=cfg.lora_alpha, lora={
                name: (take(f"{p}lora.{name}.A", "trainable"), take(f"{p}lora.{name}.B", "trainable"))
                for name in lora_names})
        else:
            adapters = AdapterWeights(cfg.adapter_variant, down=take(p + "adapter.down", "trainable"),
                                      up=take(p + "adapter.up", "trainable"), lora_alpha=cfg.lora_alpha)
        layers.append(CodaLayerParams(frozen, adapters, RouterParams(take(p + "router.w", "trainable"))))
    return Model(layers, take("head.w", "trainable"), take("head.b", "trainable"))
