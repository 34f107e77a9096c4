"""Versioned, checksummed tensor containers shared by every network.

A checkpoint is an uncompressed ``.npz`` archive holding one array per
parameter plus a ``__meta__`` entry with UTF-8 JSON: format version, model
kind, config, config hash and a SHA-256 checksum over everything else.
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META = "__meta__"


class ModelError(RuntimeError):
    """A model file is missing, corrupt or incompatible."""


class ChecksumError(ModelError):
    pass


class UnsupportedVersionError(ModelError):
    pass


class ConfigMismatchError(ModelError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _digest(tensors: dict[str, np.ndarray], meta: dict) -> str:
    h = hashlib.sha256()
    body = {k: v for k, v in meta.items() if k != "checksum"}
    h.update(json.dumps(body, sort_keys=True).encode())
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, tensors: dict[str, np.ndarray], *, kind: str, config: dict,
                    extra: dict | None = None) -> str:
    """Write ``tensors`` to ``path``; returns the checksum."""
    if _META in tensors:
        raise ValueError(f"tensor name {_META!r} is reserved")
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
            "config_hash": config_hash(config), "extra": extra or {}}
    meta["checksum"] = _digest(tensors, meta)
    payload = dict(tensors)
    payload[_META] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return meta["checksum"]


def load_checkpoint(path, *, kind: str | None = None,
                    expected_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read and verify a checkpoint; returns ``(tensors, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"model file {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise ChecksumError(f"{path}: unreadable checkpoint ({exc})") from exc
    if _META not in data:
        raise ChecksumError(f"{path}: missing metadata")
    try:
        meta = json.loads(data.pop(_META).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupt metadata") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(expected {FORMAT_VERSION})")
    if _digest(data, meta) != meta.get("checksum"):
        raise ChecksumError(f"{path}: checksum mismatch, file was modified or truncated")
    if kind is not None and meta.get("kind") != kind:
        raise ConfigMismatchError(f"{path}: holds a {meta.get('kind')!r}, expected {kind!r}")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise ConfigMismatchError(
            f"{path}: config hash {meta.get('config_hash')} does not match "
            f"{expected_hash}; stored config: {meta.get('config')}")
    return data, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
