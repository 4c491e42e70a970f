"""Single-file checkpoint container and raw array export.

Layout: ``MAGIC`` (8 bytes), header length as little-endian uint64, a JSON
header (sorted keys, compact), then the raw little-endian arrays back to back
in header order. The content hash is SHA-256 over the config JSON followed by
every array's name, dtype, shape and bytes. A second digest, ``header_hash``,
covers the full meta and the array table so no header byte goes unchecked.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CVAECKPT"
SCHEMA = 1


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # must contain "stage" and "config"

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "")

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})

    def content_hash(self) -> str:
        h = hashlib.sha256(_dumps(self.config))
        for name in sorted(self.arrays):
            a = _le(self.arrays[name])
            h.update(_dumps([name, a.dtype.str, list(a.shape)]))
            h.update(a.tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        names = sorted(self.arrays)
        entries, offset = [], 0
        for name in names:
            a = _le(self.arrays[name])
            entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": a.nbytes})
            offset += a.nbytes
        table = {"schema": SCHEMA, "meta": self.meta, "arrays": entries}
        header = _dumps({**table, "hash": self.content_hash(),
                         "header_hash": hashlib.sha256(_dumps(table)).hexdigest()})
        body = b"".join(_le(self.arrays[n]).tobytes() for n in names)
        return MAGIC + struct.pack("<Q", len(header)) + header + body

    def save(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return self.content_hash()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC or len(data) < 16:
            raise DataError("not a checkpoint file")
        (n,) = struct.unpack("<Q", data[8:16])
        try:
            header = json.loads(data[16:16 + n])
        except ValueError as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("schema") != SCHEMA:
            raise DataError(f"unsupported checkpoint schema {header.get('schema')}")
        body = memoryview(data)[16 + n:]
        arrays = {}
        try:
            for e in header["arrays"]:
                raw = body[e["offset"]:e["offset"] + e["nbytes"]]
                if len(raw) != e["nbytes"]:
                    raise DataError(f"truncated checkpoint array {e['name']}")
                arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            table = {k: header[k] for k in ("schema", "meta", "arrays")}
            if hashlib.sha256(_dumps(table)).hexdigest() != header["header_hash"]:
                raise DataError("checkpoint header hash mismatch (file corrupted)")
            ckpt = cls(arrays, header["meta"])
            expected = header["hash"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from exc
        if ckpt.content_hash() != expected:
            raise DataError("checkpoint hash mismatch (file corrupted)")
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def state_to_arrays(module: torch.nn.Module, prefix: str = "model.") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise DataError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {unexpected[:3]}")


def optimizer_to_arrays(opt: torch.optim.Optimizer, names: list[str],
                        prefix: str = "optim.") -> dict[str, np.ndarray]:
    """Per-parameter optimizer state keyed by parameter name."""
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        for key, val in opt.state.get(p, {}).items():
            out[f"{prefix}{name}.{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return out


def optimizer_from_arrays(opt: torch.optim.Optimizer, names: list[str], arrays: dict[str, np.ndarray],
                          prefix: str = "optim.") -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        state = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            k = f"{prefix}{name}.{key}"
            if k in arrays:
                state[key] = torch.from_numpy(np.array(arrays[k]))
        if state:
            opt.state[p] = state


def rng_arrays() -> dict[str, np.ndarray]:
    return {"rng.torch": torch.get_rng_state().numpy().copy()}


# -- raw exports -------------------------------------------------------------------

def export_raw(path, array: np.ndarray, **info) -> Path:
    """Write ``array`` as raw little-endian float32 plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(a.tobytes())
    sidecar = path.with_name(path.name + ".json")
    meta = {"dtype": "float32", "byteorder": "little", "shape": list(a.shape), **info}
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return sidecar


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    a = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return a.copy(), meta
