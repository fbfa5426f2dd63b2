# -*- coding: utf-8 -*-
"""
Checkpoint files: a JSON manifest plus one little-endian float64 blob per
parameter set.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from modac.autodiff import Tensor
from modac.nets import NetworkSpec, ParamSet
from modac.utils import get_logger

logger = get_logger("modac.checkpoint")

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class CheckpointError(ValueError):
    """Missing, malformed or incompatible checkpoint."""


def save_checkpoint(directory: str | Path, param_sets: Mapping[str, ParamSet],
                    metadata: Mapping[str, Any] | None = None) -> Path:
    """Writes ``param_sets`` under ``directory`` and returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {"format": FORMAT_VERSION, "metadata": dict(metadata or {}), "param_sets": {}}
    for key, params in param_sets.items():
        blob = f"{key}.bin"
        entries, offset = [], 0
        chunks = []
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            entries.append({"name": name, "shape": list(t.shape), "dtype": "<f8", "offset": offset, "count": int(arr.size)})
            chunks.append(arr.tobytes())
            offset += int(arr.size)
        (directory / blob).write_bytes(b"".join(chunks))
        manifest["param_sets"][key] = {
            "role": params.role,
            "spec": params.spec.to_dict() if params.spec is not None else None,
            "blob": blob,
            "digest": params.digest(),
            "entries": entries,
        }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.debug("checkpoint written to %s (%s)", directory, ", ".join(param_sets))
    return path


def load_checkpoint(directory: str | Path) -> Tuple[Dict[str, ParamSet], Dict[str, Any]]:
    """Returns (param sets by key, metadata); raises :class:`CheckpointError`."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    directory = path.parent
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}, expected {FORMAT_VERSION}")

    out: Dict[str, ParamSet] = {}
    for key, info in manifest.get("param_sets", {}).items():
        blob_path = directory / info["blob"]
        if not blob_path.exists():
            raise CheckpointError(f"{key}: missing blob {blob_path.name}")
        flat = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
        entries = []
        for e in info["entries"]:
            if e.get("dtype") != "<f8":
                raise CheckpointError(f"{key}.{e['name']}: unsupported dtype {e.get('dtype')}")
            end = e["offset"] + e["count"]
            if end > flat.size or int(np.prod(e["shape"], dtype=np.int64)) != e["count"]:
                raise CheckpointError(f"{key}.{e['name']}: blob and manifest disagree")
            values = flat[e["offset"]:end].astype(np.float64).reshape(e["shape"])
            entries.append((e["name"], Tensor(values, requires_grad=True)))
        spec = NetworkSpec.from_dict(info["spec"]) if info.get("spec") else None
        params = ParamSet(info["role"], entries, spec)
        if info.get("digest") and params.digest() != info["digest"]:
            raise CheckpointError(f"{key}: digest mismatch")
        out[key] = params
    return out, manifest.get("metadata", {})
