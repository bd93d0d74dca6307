"""Embedding provider contract, SVEM binary store, and a synthetic embedder.

The SVEM file is the interchange format between whatever computes image
embeddings (an external export step) and the classifier/decoder stages.
Layout, all little-endian, no padding:

    "SVEM" | version u32 (=1) | dim u32 | count u64
    then per record: id_len u16 | id UTF-8 bytes | dim * f32

A sidecar JSON descriptor ``<store>.json`` records {path, dim, count, sha256}.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import DataFormatError, MissingEmbeddingError
from .fileio import atomic_write_bytes, atomic_write_text, sha256_bytes
from .timeseries import StreetViewSeries, assign_segments

logger = logging.getLogger(__name__)

MAGIC = b"SVEM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    """One image's embedding vector, stored as float32."""

    image_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size < 1:
            raise ValueError(f"record {self.image_id!r}: vector must be 1-D and nonempty")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"record {self.image_id!r}: vector has NaN/Inf components")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)


class EmbeddingProvider(Protocol):
    """Lookup of per-image vectors; repeated lookups must return identical bits."""

    @property
    def dim(self) -> int: ...

    def get(self, image_id: str) -> np.ndarray: ...


class EmbeddingStore:
    """Immutable in-memory id -> vector map satisfying EmbeddingProvider."""

    def __init__(self, records: Iterable[EmbeddingRecord], normalize: bool = False):
        self._vectors: dict[str, np.ndarray] = {}
        dim = None
        for rec in records:
            if rec.image_id in self._vectors:
                raise ValueError(f"duplicate image id {rec.image_id!r} in store")
            if dim is None:
                dim = rec.vector.size
            elif rec.vector.size != dim:
                raise ValueError(
                    f"record {rec.image_id!r} has dimension {rec.vector.size}, store has {dim}"
                )
            vec = l2_normalize(rec.vector).astype(np.float32) if normalize else rec.vector
            vec.flags.writeable = False
            self._vectors[rec.image_id] = vec
        self._dim = int(dim) if dim is not None else 0

    @classmethod
    def load(cls, path: str | Path, normalize: bool = False) -> "EmbeddingStore":
        return cls(read_store(path), normalize=normalize)

    @property
    def dim(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._vectors

    def ids(self) -> list[str]:
        return list(self._vectors)

    def get(self, image_id: str) -> np.ndarray:
        try:
            return self._vectors[image_id]
        except KeyError:
            raise MissingEmbeddingError(image_id) from None


def write_store(records: list[EmbeddingRecord], path: str | Path, dim: int | None = None) -> int:
    """Serialize records to the SVEM layout atomically; returns bytes written.

    ``dim`` is only consulted for an empty record list, where it cannot be
    inferred. Also emits the ``<path>.json`` descriptor.
    """
    path = Path(path)
    seen: set[str] = set()
    if records:
        dims = {rec.vector.size for rec in records}
        if len(dims) > 1:
            raise ValueError(f"records have mixed dimensions {sorted(dims)}")
        dim = records[0].vector.size
    elif dim is None:
        dim = 0
    chunks = [MAGIC, struct.pack("<IIQ", FORMAT_VERSION, dim, len(records))]
    for rec in records:
        if rec.image_id in seen:
            raise ValueError(f"duplicate image id {rec.image_id!r}")
        seen.add(rec.image_id)
        idb = rec.image_id.encode("utf-8")
        if len(idb) > 0xFFFF:
            raise ValueError(f"image id {rec.image_id!r} exceeds 65535 UTF-8 bytes")
        chunks.append(struct.pack("<H", len(idb)))
        chunks.append(idb)
        chunks.append(rec.vector.astype("<f4").tobytes())
    blob = b"".join(chunks)
    nbytes = atomic_write_bytes(path, blob)
    descriptor = {
        "path": path.name,
        "dim": int(dim),
        "count": len(records),
        "sha256": sha256_bytes(blob),
    }
    atomic_write_text(str(path) + ".json", json.dumps(descriptor, indent=2) + "\n")
    return nbytes


def read_store(path: str | Path) -> list[EmbeddingRecord]:
    """Parse an SVEM file; any deviation from the layout raises with its offset."""
    data = Path(path).read_bytes()

    def need(k: int, what: str, off: int) -> None:
        if off + k > len(data):
            raise DataFormatError(f"{path}: truncated {what}", offset=off)

    need(4, "magic", 0)
    if data[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    need(16, "header", 4)
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}", offset=4)
    off = 20
    records = []
    seen: set[str] = set()
    for i in range(count):
        need(2, f"id length of record {i}", off)
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        need(id_len, f"id bytes of record {i}", off)
        try:
            image_id = data[off:off + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{path}: record {i} id is not valid UTF-8: {exc}", offset=off)
        off += id_len
        need(4 * dim, f"vector of record {i} ({image_id!r})", off)
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        if image_id in seen:
            raise DataFormatError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        if not np.all(np.isfinite(vec)):
            raise DataFormatError(f"{path}: record {image_id!r} has non-finite components")
        records.append(EmbeddingRecord(image_id, vec))
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes after last record", offset=off)
    return records


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; rejects the zero vector."""
    vec = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return vec / norm


# --- synthetic embedder ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneParams:
    """Geometry of the synthetic embedding clusters used as a test-time provider."""

    dimension: int = 64
    inter_segment_distance: float = 8.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 2:
            raise ValueError(f"dimension must be >= 2, got {self.dimension}")
        if self.inter_segment_distance < 0:
            raise ValueError("inter_segment_distance must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _keyed_rng(*parts: object) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _unit_direction(d: int, *key: object) -> np.ndarray:
    v = _keyed_rng(*key).standard_normal(d)
    norm = np.linalg.norm(v)
    if norm < 1e-12:  # unreachable in practice, but keep the contract total
        v = np.zeros(d)
        v[0] = 1.0
        return v
    return v / norm


def synthetic_embed(
    scene_id: str,
    segment_index: int,
    image_index: int,
    params: SyntheticSceneParams,
) -> np.ndarray:
    """Deterministic synthetic embedding for one image.

    vector = center(scene_id, segment_index) + noise(scene_id, image_index).
    The center anchors at a pseudo-random per-scene unit direction and steps
    by inter_segment_distance along a global pseudo-random unit drift axis
    for each successive segment, so consecutive segments sit exactly that
    far apart while stills within a segment share their center. Noise is
    i.i.d. Gaussian(0, noise_sigma^2) keyed by (scene_id, image_index).
    """
    d = params.dimension
    dist = params.inter_segment_distance
    drift = _unit_direction(d, params.seed, "drift")
    base = _unit_direction(d, params.seed, "base", scene_id)
    center = dist * base + dist * (segment_index - 1) * drift
    noise = params.noise_sigma * _keyed_rng(params.seed, "noise", scene_id, image_index).standard_normal(d)
    return center + noise


def synthetic_records(
    scenes: Iterable[StreetViewSeries], params: SyntheticSceneParams
) -> list[EmbeddingRecord]:
    """Embed every image of every series per its ground-truth segment."""
    records = []
    for series in scenes:
        segments = assign_segments(series)
        for idx, image in enumerate(series.images, start=1):
            vec = synthetic_embed(series.scene_id, segments[idx - 1], idx, params)
            records.append(EmbeddingRecord(image.image_id, vec.astype(np.float32)))
    return records


def build_synthetic_store(
    scenes: Iterable[StreetViewSeries], params: SyntheticSceneParams
) -> EmbeddingStore:
    return EmbeddingStore(synthetic_records(scenes, params))
