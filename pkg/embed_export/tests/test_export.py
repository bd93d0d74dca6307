import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from embed_export.cli import main
from embed_export.exporter import (
    ExportError,
    ExportJob,
    export_embeddings,
    manifest_images,
    verify_store,
    write_svem,
)

# the primary pipeline's public reader: the store format is the interface
from streetchange.embeddings import EmbeddingStore, read_store


def make_fixture(root: Path, scenes: dict[str, int]) -> Path:
    """Write a manifest plus JPEG files: scenes maps scene_id -> image count."""
    rng = np.random.default_rng(0)
    images_root = root / "images"
    lines = []
    for scene_id, count in scenes.items():
        (images_root / scene_id).mkdir(parents=True, exist_ok=True)
        images = []
        for k in range(count):
            image_id = f"{scene_id}_im{k}"
            pixels = rng.integers(0, 255, (48, 64, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(images_root / scene_id / f"{image_id}.jpg")
            images.append({
                "image_id": image_id,
                "timestamp": f"20{10 + k:02d}-06-01",
                "panoid": f"pano_{image_id}",
                "heading": 90.0,
                "cap_lat": 47.6,
                "cap_lon": -122.3,
            })
        lines.append(json.dumps({
            "scene_id": scene_id, "lat": 47.6, "lon": -122.3,
            "images": images, "change_points": [],
        }))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def job_for(root: Path, manifest: Path, **kwargs) -> ExportJob:
    defaults = dict(
        manifest=manifest,
        images_root=root / "images",
        backbone="toy-cnn",
        output=root / "out" / "store.svem",
        batch_size=4,
    )
    defaults.update(kwargs)
    return ExportJob(**defaults)


@pytest.fixture
def ten_image_fixture(tmp_path):
    manifest = make_fixture(tmp_path, {"sceneA": 5, "sceneB": 5})
    return tmp_path, manifest


class TestExport:
    def test_count_and_dim(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        summary = export_embeddings(job_for(root, manifest))
        assert summary.count == 10
        assert summary.dim == 32
        descriptor = json.loads((root / "out" / "store.svem.json").read_text())
        assert descriptor["count"] == 10
        assert descriptor["dim"] == 32
        assert descriptor["sha256"] == summary.sha256

    def test_primary_reader_accepts_store(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        export_embeddings(job_for(root, manifest))
        records = read_store(root / "out" / "store.svem")
        assert len(records) == 10
        store = EmbeddingStore(records)
        assert store.dim == 32
        expected_ids = {image_id for _s, image_id in manifest_images(manifest)}
        assert set(store.ids()) == expected_ids

    def test_verify_store_ok(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        export_embeddings(job_for(root, manifest))
        report = verify_store(root / "out" / "store.svem", manifest)
        assert report.ok
        assert report.store_count == 10
        assert report.store_dim == 32

    def test_repeated_runs_cosine_similar(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        export_embeddings(job_for(root, manifest))
        first = {r.image_id: r.vector.astype(np.float64) for r in read_store(root / "out" / "store.svem")}
        export_embeddings(job_for(root, manifest, output=root / "out" / "store2.svem"))
        second = {r.image_id: r.vector.astype(np.float64) for r in read_store(root / "out" / "store2.svem")}
        for image_id, vec in first.items():
            other = second[image_id]
            cosine = float(vec @ other / (np.linalg.norm(vec) * np.linalg.norm(other)))
            assert cosine >= 0.999

    def test_missing_image_fails_before_output(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        (root / "images" / "sceneA" / "sceneA_im2.jpg").unlink()
        with pytest.raises(ExportError, match="sceneA_im2"):
            export_embeddings(job_for(root, manifest))
        assert not (root / "out" / "store.svem").exists()

    def test_corrupt_image_fails_before_output(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        (root / "images" / "sceneB" / "sceneB_im1.jpg").write_bytes(b"not a jpeg")
        with pytest.raises(ExportError, match="sceneB_im1"):
            export_embeddings(job_for(root, manifest))
        assert not (root / "out" / "store.svem").exists()

    def test_batch_size_does_not_change_vectors(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        export_embeddings(job_for(root, manifest, batch_size=3, output=root / "a.svem"))
        export_embeddings(job_for(root, manifest, batch_size=10, output=root / "b.svem"))
        va = {r.image_id: r.vector for r in read_store(root / "a.svem")}
        vb = {r.image_id: r.vector for r in read_store(root / "b.svem")}
        for image_id in va:
            assert np.allclose(va[image_id], vb[image_id], atol=1e-5)

    def test_duplicate_manifest_ids_rejected(self, tmp_path):
        manifest = make_fixture(tmp_path, {"sceneA": 2})
        line = manifest.read_text()
        manifest.write_text(line + line.replace('"scene_id": "sceneA"', '"scene_id": "sceneC"'))
        with pytest.raises(ExportError, match="duplicate image id"):
            export_embeddings(job_for(tmp_path, manifest))


class TestVerifyMismatch:
    def test_missing_and_extra_ids_reported(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        ids = [image_id for _s, image_id in manifest_images(manifest)]
        vectors = np.random.default_rng(1).standard_normal((len(ids), 8)).astype(np.float32)
        swapped = ["rogue_id"] + ids[1:]
        write_svem(root / "bad.svem", swapped, vectors)
        report = verify_store(root / "bad.svem", manifest)
        assert not report.ok
        assert report.missing_ids == [ids[0]]
        assert report.extra_ids == ["rogue_id"]


class TestCli:
    def test_export_then_verify(self, ten_image_fixture, capsys):
        root, manifest = ten_image_fixture
        out = root / "out" / "store.svem"
        assert main(["export", "--manifest", str(manifest), "--images", str(root / "images"),
                     "--backbone", "toy-cnn", "--out", str(out), "--batch", "4"]) == 0
        assert "wrote 10 embeddings of dim 32" in capsys.readouterr().out
        assert main(["verify", "--store", str(out), "--manifest", str(manifest)]) == 0

    def test_verify_mismatch_exit_nonzero(self, ten_image_fixture, capsys):
        root, manifest = ten_image_fixture
        ids = [image_id for _s, image_id in manifest_images(manifest)][:-1] + ["rogue"]
        vectors = np.zeros((len(ids), 4), dtype=np.float32) + 1.0
        write_svem(root / "bad.svem", ids, vectors)
        assert main(["verify", "--store", str(root / "bad.svem"), "--manifest", str(manifest)]) == 1
        captured = capsys.readouterr().out
        assert "extra in store: rogue" in captured

    def test_export_missing_image_exit_2(self, ten_image_fixture):
        root, manifest = ten_image_fixture
        (root / "images" / "sceneA" / "sceneA_im0.jpg").unlink()
        assert main(["export", "--manifest", str(manifest), "--images", str(root / "images"),
                     "--out", str(root / "out.svem")]) == 2
