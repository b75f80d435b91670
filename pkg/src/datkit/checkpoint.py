"""Single-file array container: magic, JSON manifest, little-endian value blob.

Layout::

    b"DATKIT\\x00\\x01" | uint64 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest maps each array name to ``{dtype, shape, offset, nbytes}`` relative to
the start of the blob, and carries a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from datkit.errors import DatError, ParameterError

MAGIC = b"DATKIT\x00\x01"


class CheckpointError(DatError, ValueError):
    """Malformed or incompatible container file."""


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format": "datkit-container", "version": 1, "meta": meta or {},
                           "entries": entries}, sort_keys=True, separators=(",", ":"))
    head = manifest.encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a datkit container (bad magic)")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    blob = memoryview(data)[start + n:]
    arrays = {}
    for e in manifest["entries"]:
        if e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"entry {e['name']!r} runs past the end of the file")
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(arrays, meta))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    """Write every named parameter and buffer plus the model config."""
    from datkit.model import array_of, named_parameters

    arrays = {name: np.asarray(array_of(v)) for name, v, _ in named_parameters(model)}
    save_arrays(path, arrays, {"config": model.config.to_dict(),
                               "dtype": np.dtype(model.dtype).name, **(meta or {})})


def load_checkpoint(path):
    """Rebuild the model from the stored config and overwrite its values."""
    from datkit.model import DatModelConfig, array_of, build_dat, named_parameters

    arrays, meta = load_arrays(path)
    if "config" not in meta:
        raise CheckpointError("container has no model config")
    cfg = DatModelConfig.from_dict(meta["config"])
    model = build_dat(cfg, np.random.default_rng(0), dtype=np.dtype(meta.get("dtype", "float32")).type)
    for name, v, _ in named_parameters(model):
        if name not in arrays:
            raise CheckpointError(f"missing entry {name!r}")
        target = array_of(v)
        src = arrays[name]
        if src.shape != target.shape:
            raise ParameterError(f"{name}: stored shape {src.shape} != model shape {target.shape}")
        target[...] = src
    return model, meta
