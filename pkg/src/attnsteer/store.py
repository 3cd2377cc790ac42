"""Content-addressed on-disk store for KV caches and their steering plans.

Layout under the store root::

    manifest.json            key hex -> entry metadata
    manifest.lock            single-writer lock for the manifest
    <keyhex>.kv              binary cache file (format below)
    <keyhex>.plan.json       canonical plan JSON, steered entries only
    quarantine/              entries that failed their checksum

Cache file, little-endian::

    "LLMK" | version u32 | model_hash u64 | prefix_hash u64 | context_hash u64
    | plan_hash u64 | n_layers u32 | n_heads u32 | head_dim u32 | cached_len u32
    | token ids u32 x cached_len | per layer: K then V as f32 | FNV-1a u64

Tensors are stored at float32 and widened to float64 on load. Files and the
manifest are published with write-to-temp plus ``os.replace`` so a reader
never sees a partial file.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from attnsteer.digest import fnv1a64
from attnsteer.model import KVCache, ModelWeights, detokenize_bytes
from attnsteer.steering import SteeringPlan

CACHE_MAGIC = b"LLMK"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIQQQQIIII")
_CHECKSUM = struct.Struct("<Q")


class StoreError(Exception):
    pass


class CorruptEntryError(StoreError):
    pass


class ProvenanceError(StoreError, ValueError):
    pass


@dataclass(frozen=True, order=True)
class CacheKey:
    model_hash: int
    prefix_hash: int
    context_hash: int
    plan_hash: int = 0

    def hex(self) -> str:
        return "".join(f"{v:016x}" for v in
                       (self.model_hash, self.prefix_hash, self.context_hash, self.plan_hash))

    @classmethod
    def from_hex(cls, text: str) -> CacheKey:
        text = text.strip().lower()
        if len(text) != 64:
            raise ValueError(f"cache key must be 64 hex digits, got {len(text)}")
        return cls(*(int(text[i:i + 16], 16) for i in range(0, 64, 16)))

    @classmethod
    def for_inputs(
        cls, weights: ModelWeights, serving_prefix: str, context: str,
        plan: SteeringPlan | None = None,
    ) -> CacheKey:
        return cls(weights.content_hash, fnv1a64(serving_prefix), fnv1a64(context),
                   plan.digest if plan is not None else 0)

    @property
    def steered(self) -> bool:
        return self.plan_hash != 0


# --------------------------------------------------------------------------
# serialization


def cache_file_size(n_layers: int, n_heads: int, head_dim: int, cached_len: int) -> int:
    return (_HEADER.size + 4 * cached_len + 2 * n_layers * n_heads * cached_len * head_dim * 4
            + _CHECKSUM.size)


def encode_cache(key: CacheKey, cache: KVCache) -> bytes:
    n_layers = cache.n_layers
    n_heads, cached_len, head_dim = cache.keys[0].shape
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, key.model_hash, key.prefix_hash,
                          key.context_hash, key.plan_hash, n_layers, n_heads, head_dim, cached_len)
    parts = [header, np.asarray(cache.token_ids, dtype="<u4").tobytes()]
    for k, v in zip(cache.keys, cache.values):
        parts.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CHECKSUM.pack(fnv1a64(body))


def decode_cache(data: bytes, prefix_len: int | None = None) -> tuple[CacheKey, KVCache]:
    """Parse a cache file, verifying the trailing checksum before anything else."""
    if len(data) < _HEADER.size + _CHECKSUM.size:
        raise CorruptEntryError("cache file too short")
    body, (stored,) = data[:-_CHECKSUM.size], _CHECKSUM.unpack(data[-_CHECKSUM.size:])
    if fnv1a64(body) != stored:
        raise CorruptEntryError("cache file checksum mismatch")
    (magic, version, model_hash, prefix_hash, context_hash, plan_hash,
     n_layers, n_heads, head_dim, cached_len) = _HEADER.unpack_from(body)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CorruptEntryError(f"bad cache header {magic!r} v{version}")
    if len(data) != cache_file_size(n_layers, n_heads, head_dim, cached_len):
        raise CorruptEntryError("cache file size disagrees with its header")
    offset = _HEADER.size
    ids = np.frombuffer(body, dtype="<u4", count=cached_len, offset=offset)
    offset += 4 * cached_len
    n = n_heads * cached_len * head_dim
    keys, values = [], []
    for _ in range(n_layers):
        for dest in (keys, values):
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset)
            dest.append(arr.astype(np.float64).reshape(n_heads, cached_len, head_dim))
            offset += 4 * n
    key = CacheKey(model_hash, prefix_hash, context_hash, plan_hash)
    return key, KVCache(tuple(keys), tuple(values), tuple(int(i) for i in ids),
                        prefix_len=prefix_len)


def _split_prefix(cache: KVCache) -> tuple[bytes, bytes]:
    """Recover (prefix text bytes, context bytes) from a cache built by ``build_sequence``."""
    n = cache.prefix_len
    prefix = detokenize_bytes(cache.token_ids[:n])
    if prefix.endswith(b"\n"):
        prefix = prefix[:-1]
    return prefix, detokenize_bytes(cache.token_ids[n:])


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# --------------------------------------------------------------------------
# store


@dataclass
class StoreHit:
    key: CacheKey
    cache: KVCache
    plan: SteeringPlan | None


class CacheStore:
    MANIFEST = "manifest.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / "manifest.lock"))

    # manifest ------------------------------------------------------------

    def manifest(self) -> dict[str, dict]:
        path = self.root / self.MANIFEST
        if not path.exists():
            return {}
        return json.loads(path.read_text())["entries"]

    def _write_manifest(self, entries: dict[str, dict]) -> None:
        doc = {"version": 1, "entries": dict(sorted(entries.items()))}
        _atomic_write(self.root / self.MANIFEST,
                      json.dumps(doc, indent=1, sort_keys=True).encode())

    def keys(self) -> list[CacheKey]:
        return [CacheKey.from_hex(h) for h in self.manifest()]

    def find(self, model_hash: int, prefix_hash: int, context_hash: int,
             steered: bool | None = None) -> list[CacheKey]:
        """Keys for a (model, prefix, context) triple, optionally filtered by steering."""
        out = []
        for key in self.keys():
            if (key.model_hash, key.prefix_hash, key.context_hash) != (
                    model_hash, prefix_hash, context_hash):
                continue
            if steered is None or key.steered == steered:
                out.append(key)
        return sorted(out)

    def __contains__(self, key: CacheKey) -> bool:
        return key.hex() in self.manifest()

    # put / get -------------------------------------------------------------

    def _check_provenance(self, key: CacheKey, cache: KVCache, plan: SteeringPlan | None):
        if plan is None and key.plan_hash != 0:
            raise ProvenanceError("steered key given without a plan")
        if plan is not None:
            if plan.digest != key.plan_hash:
                raise ProvenanceError("key plan_hash does not match the plan")
            if plan.context_hash != key.context_hash:
                raise ProvenanceError("plan was built for a different context")
        if cache.prefix_len is None:
            raise ProvenanceError("cache does not record its prefix length")
        prefix, context = _split_prefix(cache)
        if fnv1a64(prefix) != key.prefix_hash:
            raise ProvenanceError("key prefix_hash does not match the cached tokens")
        if fnv1a64(context) != key.context_hash:
            raise ProvenanceError("key context_hash does not match the cached tokens")

    def path_for(self, key: CacheKey) -> Path:
        return self.root / f"{key.hex()}.kv"

    def put(self, key: CacheKey, cache: KVCache, plan: SteeringPlan | None = None) -> dict:
        """Store ``cache`` (and ``plan``) under ``key``; returns the manifest entry."""
        self._check_provenance(key, cache, plan)
        data = encode_cache(key, cache)
        hexkey = key.hex()
        path = self.path_for(key)
        with self._lock:
            entries = self.manifest()
            existing = entries.get(hexkey)
            if existing and path.exists() and path.read_bytes() == data:
                return existing
            _atomic_write(path, data)
            plan_file = None
            if plan is not None:
                plan_file = f"{hexkey}.plan.json"
                _atomic_write(self.root / plan_file, plan.to_json().encode())
            entry = {
                "file": path.name,
                "plan_file": plan_file,
                "prefix_tokens": cache.prefix_len,
                "context_tokens": cache.cached_len - cache.prefix_len,
                "cached_len": cache.cached_len,
                "created": time.time(),
                "bytes": len(data),
            }
            entries[hexkey] = entry
            self._write_manifest(entries)
        return entry

    def get(self, key: CacheKey, quarantine: bool = True) -> StoreHit | None:
        """Load the entry for ``key``; ``None`` on a miss.

        Raises:
            CorruptEntryError: checksum or header failure. With ``quarantine``
                the files are moved aside and the manifest entry dropped.
        """
        entry = self.manifest().get(key.hex())
        if entry is None:
            return None
        path = self.root / entry["file"]
        try:
            stored_key, cache = decode_cache(path.read_bytes(), entry.get("prefix_tokens"))
            if stored_key != key:
                raise CorruptEntryError("cache file header does not match its key")
            plan = None
            if entry.get("plan_file"):
                plan = SteeringPlan.from_json((self.root / entry["plan_file"]).read_text())
                if plan.digest != key.plan_hash:
                    raise CorruptEntryError("stored plan does not match its key")
        except (CorruptEntryError, FileNotFoundError, ValueError, KeyError) as exc:
            if quarantine:
                self._quarantine(key)
            if isinstance(exc, CorruptEntryError):
                raise
            raise CorruptEntryError(f"unreadable entry {key.hex()}: {exc}") from exc
        return StoreHit(key, cache, plan)

    def _quarantine(self, key: CacheKey) -> None:
        hexkey = key.hex()
        qdir = self.root / "quarantine"
        qdir.mkdir(exist_ok=True)
        with self._lock:
            entries = self.manifest()
            entry = entries.pop(hexkey, None)
            for name in (entry or {}).get("file"), (entry or {}).get("plan_file"):
                if name and (self.root / name).exists():
                    shutil.move(str(self.root / name), str(qdir / name))
            self._write_manifest(entries)
