"""JSON checkpoints: named float64 tensors plus the model config and a kind tag.

Layout::

    {"format": "kt-workbench-checkpoint", "version": 1, "kind": "dkt" | "akt" | "bkt",
     "config": {...}, "tensors": {name: {"shape": [...], "data": [...]}}}

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SchemaError

FORMAT = "kt-workbench-checkpoint"
VERSION = 1


def dump_tensors(kind, config, tensors):
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "tensors": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in tensors.items()
        },
    }


def read(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise SchemaError(f"{path}: not a workbench checkpoint")
    if doc.get("version") != VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc


def tensor_arrays(doc):
    return {
        name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["tensors"].items()
    }


def load_model(path):
    """Rebuild whichever model kind the checkpoint holds."""
    doc = read(path)
    kind = doc.get("kind")
    if kind == "bkt":
        from .bkt import BKTModel

        return BKTModel.from_dict(doc)
    if kind == "dkt":
        from .dkt import DKT

        return DKT.from_dict(doc)
    if kind == "akt":
        from .akt import AKT

        return AKT.from_dict(doc)
    raise SchemaError(f"{path}: unknown model kind {kind!r}")


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict()))
