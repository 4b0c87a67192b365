"""Checkpoints: a directory of named TGAR blobs plus ``manifest.json``."""

from __future__ import annotations

import json
from pathlib import Path

from .autodiff import array_hash, load_array, save_array
from .autodiff.nn import Module
from .errors import ContractError


def save_module(module: Module, directory, manifest: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, p in module.named_parameters().items():
        save_array(d / f"{name}.tgar", p.data)
        hashes[name] = array_hash(p.data)
    body = dict(manifest or {})
    body["params"] = hashes
    (d / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ContractError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_module(module: Module, directory) -> dict:
    """Load parameters saved by :func:`save_module`; verifies every blob hash."""
    d = Path(directory)
    manifest = read_manifest(d)
    state = {}
    for name, expected in manifest["params"].items():
        arr = load_array(d / f"{name}.tgar")
        if array_hash(arr) != expected:
            raise ContractError(f"checkpoint blob {name} does not match its manifest hash")
        state[name] = arr
    module.load_state_dict(state)
    return manifest
