"""Parameter checkpoints: a flat little-endian blob plus a JSON index.

``<path>`` holds the raw bytes; ``<path>.json`` maps each parameter path to
``{"offset", "shape", "dtype"}`` and carries free-form metadata.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ValidationError

FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(dtype: np.dtype) -> str:
    for code, dt in _DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return code
    raise ValidationError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    index, offset = {}, 0
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            a = np.asarray(arrays[name])
            code = _code(a.dtype)
            buf = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
            fh.write(buf)
            index[name] = {"offset": offset, "shape": list(a.shape), "dtype": code}
            offset += len(buf)
    doc = {"version": FORMAT_VERSION, "params": index, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads(Path(str(path) + ".json").read_text())
    if doc.get("version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('version')}")
    raw = path.read_bytes()
    arrays = {}
    for name, e in doc["params"].items():
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, doc.get("meta", {})


def module_arrays(module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy() for n, p in module.state_dict().items()}


def load_into_module(module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``; a missing path or shape mismatch is rejected by name."""
    import torch

    state = module.state_dict()
    for name, target in state.items():
        key = prefix + name
        if key not in arrays:
            raise ValidationError(f"checkpoint is missing parameter {key}")
        src = arrays[key]
        if tuple(src.shape) != tuple(target.shape):
            raise ValidationError(
                f"shape mismatch at {key}: checkpoint {tuple(src.shape)} vs model {tuple(target.shape)}"
            )
        state[name] = torch.as_tensor(src, dtype=target.dtype)
    module.load_state_dict(state)
