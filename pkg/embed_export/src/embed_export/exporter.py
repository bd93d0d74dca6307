"""Batch export of frozen-backbone embeddings into the SVEM interchange format.

The pipeline consuming these stores documents the byte layout as:

    "SVEM" | version u32 LE (=1) | dim u32 LE | count u64 LE
    per record: id_len u16 LE | id UTF-8 | dim * f32 LE

plus a sidecar JSON descriptor {path, dim, count, sha256}. This module
implements that contract directly; export is all-or-nothing, and every
image file is checked before the first byte is written.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

MAGIC = b"SVEM"
FORMAT_VERSION = 1


class ExportError(RuntimeError):
    """Manifest/image inconsistency that aborts the export before output."""


@dataclass(frozen=True)
class ExportJob:
    manifest: Path
    images_root: Path
    backbone: str
    output: Path
    batch_size: int = 16
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ExportSummary:
    count: int
    dim: int
    sha256: str


@dataclass
class VerifyReport:
    ok: bool
    missing_ids: list[str] = field(default_factory=list)
    extra_ids: list[str] = field(default_factory=list)
    store_dim: int = 0
    store_count: int = 0


def manifest_images(manifest: Path) -> list[tuple[str, str]]:
    """(scene_id, image_id) pairs from a series-manifest JSONL file."""
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                scene_id = rec["scene_id"]
                images = [im["image_id"] for im in rec["images"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ExportError(f"{manifest}: line {lineno}: malformed manifest record: {exc!r}")
            for image_id in images:
                if image_id in seen:
                    raise ExportError(f"{manifest}: duplicate image id {image_id!r}")
                seen.add(image_id)
                out.append((scene_id, image_id))
    return out


def _image_path(root: Path, scene_id: str, image_id: str) -> Path:
    return root / scene_id / f"{image_id}.jpg"


def _check_inputs(job: ExportJob, entries: list[tuple[str, str]]) -> None:
    """Fail before any output if a single image is missing or unreadable."""
    problems = []
    for scene_id, image_id in entries:
        path = _image_path(job.images_root, scene_id, image_id)
        if not path.is_file():
            problems.append(f"{image_id} (missing {path})")
            continue
        try:
            with Image.open(path) as img:
                img.verify()
        except Exception as exc:
            problems.append(f"{image_id} (unreadable: {exc})")
    if problems:
        raise ExportError(
            f"{len(problems)} image(s) unavailable, aborting before output: " + "; ".join(problems)
        )


def write_svem(path: Path, ids: list[str], matrix: np.ndarray) -> ExportSummary:
    """Write vectors to the documented SVEM layout atomically, plus descriptor."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("matrix must be (len(ids), dim)")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("embeddings contain NaN/Inf")
    dim = matrix.shape[1]
    chunks = [MAGIC, struct.pack("<IIQ", FORMAT_VERSION, dim, len(ids))]
    for image_id, row in zip(ids, matrix):
        idb = image_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(idb)))
        chunks.append(idb)
        chunks.append(row.tobytes())
    blob = b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    digest = hashlib.sha256(blob).hexdigest()
    descriptor = {"path": path.name, "dim": int(dim), "count": len(ids), "sha256": digest}
    desc_path = Path(str(path) + ".json")
    desc_path.write_text(json.dumps(descriptor, indent=2) + "\n", encoding="utf-8")
    return ExportSummary(count=len(ids), dim=int(dim), sha256=digest)


def read_svem_ids(path: Path) -> tuple[list[str], int]:
    """Scan a store for its id list and dimension (verification only)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ExportError(f"{path}: not an SVEM store")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != FORMAT_VERSION:
        raise ExportError(f"{path}: unsupported version {version}")
    ids = []
    off = 20
    for i in range(count):
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off:off + id_len].decode("utf-8"))
        off += id_len + 4 * dim
        if off > len(data):
            raise ExportError(f"{path}: truncated at record {i}")
    return ids, int(dim)


def export_embeddings(job: ExportJob) -> ExportSummary:
    """Run the frozen backbone over every manifest image and write the store."""
    from .backbones import load_backbone

    entries = manifest_images(job.manifest)
    if not entries:
        raise ExportError(f"{job.manifest}: manifest lists no images")
    _check_inputs(job, entries)
    model, transform = load_backbone(job.backbone, job.device)

    ids = [image_id for _scene, image_id in entries]
    rows: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(entries), job.batch_size):
            batch_entries = entries[start:start + job.batch_size]
            tensors = []
            for scene_id, image_id in batch_entries:
                with Image.open(_image_path(job.images_root, scene_id, image_id)) as img:
                    tensors.append(transform(img.convert("RGB")))
            batch = torch.stack(tensors).to(job.device)
            out = model(batch)
            if out.ndim != 2:
                raise ExportError(
                    f"backbone {job.backbone!r} returned shape {tuple(out.shape)}, expected (batch, dim)"
                )
            rows.append(out.cpu().numpy().astype(np.float32))
    matrix = np.vstack(rows)
    return write_svem(job.output, ids, matrix)


def verify_store(store_path: Path, manifest: Path) -> VerifyReport:
    """Check id-set equality between a store and a manifest."""
    store_ids, dim = read_svem_ids(Path(store_path))
    manifest_ids = [image_id for _scene, image_id in manifest_images(Path(manifest))]
    store_set, manifest_set = set(store_ids), set(manifest_ids)
    missing = sorted(manifest_set - store_set)
    extra = sorted(store_set - manifest_set)
    return VerifyReport(
        ok=not missing and not extra,
        missing_ids=missing,
        extra_ids=extra,
        store_dim=dim,
        store_count=len(store_ids),
    )
