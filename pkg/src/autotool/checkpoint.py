"""Versioned, byte-deterministic checkpoint files.

Layout: a magic line, a JSON header line (version, config hash, resolved
config, master seed, iteration, array manifest), then the arrays' raw
little-endian float64 bytes in manifest order. Writing the same state twice
produces identical bytes, which the determinism acceptance check relies on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "ConfigHashMismatch", "config_hash", "load_checkpoint", "save_checkpoint"]

_MAGIC = b"autotool-ckpt\n"
_VERSION = 1


class ConfigHashMismatch(RuntimeError):
    """The checkpoint was produced under a different configuration."""


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    config: dict
    config_hash: str
    seed: int
    iteration: int
    arrays: dict[str, np.ndarray]


def save_checkpoint(
    path: str | Path,
    config: dict,
    seed: int,
    iteration: int,
    arrays: dict[str, np.ndarray],
) -> None:
    manifest = [
        {"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()
    ]
    header = {
        "version": _VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "iteration": iteration,
        "arrays": manifest,
    }
    blob = bytearray()
    blob += _MAGIC
    blob += json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += b"\n"
    for name, arr in arrays.items():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = data[len(_MAGIC):]
    header_line, _, payload = rest.partition(b"\n")
    header = json.loads(header_line.decode("utf-8"))
    if header["version"] != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    stored_hash = header["config_hash"]
    if stored_hash != config_hash(header["config"]):
        raise ValueError(f"{path}: corrupted header (config hash mismatch)")
    if expected_config_hash is not None and expected_config_hash != stored_hash:
        raise ConfigHashMismatch(
            f"{path}: checkpoint config hash {stored_hash[:12]}... does not match "
            f"expected {expected_config_hash[:12]}..."
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64).copy()
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint payload")
    return Checkpoint(
        config=header["config"],
        config_hash=stored_hash,
        seed=header["seed"],
        iteration=header["iteration"],
        arrays=arrays,
    )
