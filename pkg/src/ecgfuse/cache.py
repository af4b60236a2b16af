"""On-disk feature cache.

One binary blob per record: header {magic "ECGF1", tau: u32, gamma: u32,
n_leads: u32}, then little-endian float32 features laid out lead-major,
window-major. A meta.json in the cache directory carries the producing
config's stage hash, backend id, labels, and layout so consumers can reject
stale or mismatched caches.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["CacheError", "CacheMiss", "StaleCache", "write_features", "read_features", "FeatureStore"]

MAGIC = b"ECGF1"
_HEADER = struct.Struct("<5sIII")


class CacheError(Exception):
    pass


class CacheMiss(CacheError):
    pass


class StaleCache(CacheError):
    pass


def write_features(path: str | Path, features: np.ndarray) -> None:
    """Write a (n_leads, gamma, tau) float array; atomic rename-into-place."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected (n_leads, gamma, tau) array, got shape {arr.shape}")
    n_leads, gamma, tau = arr.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, tau, gamma, n_leads))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_features(path: str | Path) -> np.ndarray:
    """Read one cache blob back as a (n_leads, gamma, tau) float32 array."""
    path = Path(path)
    if not path.exists():
        raise CacheMiss(f"no cached features at {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheError(f"{path}: truncated header")
    magic, tau, gamma, n_leads = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CacheError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    expect = n_leads * gamma * tau
    if body.size != expect:
        raise CacheError(f"{path}: {body.size} floats, header promises {expect}")
    return body.reshape(n_leads, gamma, tau).copy()


@dataclass
class FeatureStore:
    """A feature cache directory held in memory: per-record arrays + labels."""

    directory: Path
    stage_hash: str
    backend_id: str
    tau: int
    gamma: int
    n_leads: int
    fusion_input: str
    labels: dict[str, str]
    upstream: dict | None = None
    _arrays: dict[str, np.ndarray] = field(default_factory=dict)

    META_NAME = "meta.json"

    @classmethod
    def create(
        cls,
        directory: str | Path,
        stage_hash: str,
        backend_id: str,
        tau: int,
        gamma: int,
        fusion_input: str,
        upstream: dict | None = None,
    ) -> "FeatureStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n_leads = 1 if fusion_input == "stacked" else 12
        store = cls(
            directory=directory,
            stage_hash=stage_hash,
            backend_id=backend_id,
            tau=tau,
            gamma=gamma,
            n_leads=n_leads,
            fusion_input=fusion_input,
            labels={},
            upstream=upstream,
        )
        store._write_meta()
        return store

    def _write_meta(self) -> None:
        meta = {
            "magic": "ECGF1",
            "stage_hash": self.stage_hash,
            "backend_id": self.backend_id,
            "tau": self.tau,
            "gamma": self.gamma,
            "n_leads": self.n_leads,
            "fusion_input": self.fusion_input,
            "labels": dict(sorted(self.labels.items())),
            "upstream": self.upstream,
        }
        tmp = self.directory / (self.META_NAME + ".tmp")
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.directory / self.META_NAME)

    def put(self, record_id: str, features: np.ndarray, label: str | None) -> None:
        arr = np.ascontiguousarray(features, dtype=np.float32)
        if arr.shape != (self.n_leads, self.gamma, self.tau):
            raise ValueError(
                f"record {record_id!r}: shape {arr.shape}, store expects "
                f"{(self.n_leads, self.gamma, self.tau)}"
            )
        write_features(self.directory / f"{record_id}.ecgf", arr)
        if label is not None:
            self.labels[record_id] = label
        self._arrays[record_id] = arr
        self._write_meta()

    @classmethod
    def load(cls, directory: str | Path, expect_stage_hash: str | None = None) -> "FeatureStore":
        directory = Path(directory)
        meta_path = directory / cls.META_NAME
        if not meta_path.exists():
            raise CacheMiss(f"no feature cache at {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if expect_stage_hash is not None and meta.get("stage_hash") != expect_stage_hash:
            raise StaleCache(
                f"cache at {directory} was built under config hash "
                f"{meta.get('stage_hash')!r}, expected {expect_stage_hash!r}"
            )
        store = cls(
            directory=directory,
            stage_hash=meta["stage_hash"],
            backend_id=meta["backend_id"],
            tau=int(meta["tau"]),
            gamma=int(meta["gamma"]),
            n_leads=int(meta["n_leads"]),
            fusion_input=meta["fusion_input"],
            labels=dict(meta.get("labels", {})),
            upstream=meta.get("upstream"),
        )
        return store

    def record_ids(self) -> list[str]:
        if self._arrays:
            return sorted(self._arrays)
        return sorted(p.stem for p in self.directory.glob("*.ecgf"))

    def get(self, record_id: str) -> np.ndarray:
        if record_id not in self._arrays:
            arr = read_features(self.directory / f"{record_id}.ecgf")
            if arr.shape != (self.n_leads, self.gamma, self.tau):
                raise CacheError(
                    f"record {record_id!r}: blob shape {arr.shape} does not match meta"
                )
            self._arrays[record_id] = arr
        return self._arrays[record_id]
