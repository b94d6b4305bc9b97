"""Parameter checkpoint container.

Self-describing JSON: a flat list of (name, shape, row-major float64 values)
plus an optional metadata block. Python's json round-trips float64 exactly
(repr-based encoding), so save -> load is bit-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "gradworld-params"
FORMAT_VERSION = 1


def save_params(path, params: dict, meta: dict | None = None) -> None:
    """Write ``{name: ndarray}`` to ``path`` as a JSON checkpoint."""
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "params": [
            {
                "name": name,
                "shape": list(arr.shape),
                "values": np.asarray(arr, dtype=np.float64).ravel().tolist(),
            }
            for name, arr in params.items()
        ],
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (params, meta)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} checkpoint: {path}")
    params = {}
    for entry in payload["params"]:
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[entry["name"]] = arr
    return params, payload.get("meta", {})
