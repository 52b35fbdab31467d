"""Checkpoint directories: a JSON manifest plus one raw little-endian
float64 buffer per named weight."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .architectures import Model, UniXLayout
from .transformer import ModelConfig

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "xmodal-checkpoint-v1"


def save_model(model: Model, ckpt_dir):
    path = Path(ckpt_dir)
    path.mkdir(parents=True, exist_ok=True)
    weights = []
    for name, t in model.named_weights():
        fname = name + ".bin"
        (path / fname).write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        weights.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {
        "format": FORMAT_TAG,
        "arch": model.arch,
        "config": model.config.to_dict(),
        "layout": model.layout.to_dict() if model.layout is not None else None,
        "fork_layer": model.fork_layer,
        "weights": weights,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_model(ckpt_dir) -> Model:
    path = Path(ckpt_dir)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise IOError(f"{path}: not a model checkpoint (format tag mismatch)")
    config = ModelConfig(**manifest["config"])
    layout = (
        UniXLayout(n_layers=config.n_layers, **manifest["layout"])
        if manifest["layout"] is not None
        else None
    )
    model = Model(
        config,
        manifest["arch"],
        layout=layout,
        fork_layer=manifest["fork_layer"],
        seed=0,
    )
    for spec in manifest["weights"]:
        buf = np.frombuffer((path / spec["file"]).read_bytes(), dtype="<f8")
        shape = tuple(spec["shape"])
        tensor = model.params[spec["name"]]
        if tensor.shape != shape:
            raise IOError(
                f"{spec['name']}: stored shape {shape} != model shape {tensor.shape}"
            )
        tensor.data = buf.reshape(shape).copy()
    return model


def save_raw_buffers(named_arrays: dict, out_dir, kind: str):
    """Generic manifest+buffers directory for non-model artifacts."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in named_arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        fname = name + ".bin"
        (path / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format": f"xmodal-{kind}-v1", "buffers": entries}
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_raw_buffers(in_dir, kind: str) -> dict:
    path = Path(in_dir)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != f"xmodal-{kind}-v1":
        raise IOError(f"{path}: not a {kind} directory")
    out = {}
    for spec in manifest["buffers"]:
        buf = np.frombuffer((path / spec["file"]).read_bytes(), dtype="<f8")
        out[spec["name"]] = buf.reshape(tuple(spec["shape"])).copy()
    return out
