"""Street-view time series: data model, segment assignment, pair labeling, splits.

A series is an ordered run of street-level captures of one scene. Change
points are 1-based indices into that run; index c means image c deviates
from everything before it. Two images get pair label 1 exactly when a
change point falls between them (strictly after the earlier, at or before
the later).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreetImage:
    """One street-view capture: identity, time, and camera geometry."""

    image_id: str
    timestamp: date
    panoid: str
    heading: float  # degrees clockwise from north, [0, 360)
    capture_point: tuple[float, float]  # (lat, lon), WGS84 degrees

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be nonempty")
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"heading {self.heading} outside [0, 360)")
        lat, lon = self.capture_point
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} outside [-180, 180]")


@dataclass(frozen=True)
class StreetViewSeries:
    """Chronological images of one scene plus optional change-point labels.

    Images are re-sorted on construction by (timestamp, image_id) so the
    ordering invariant holds by construction. Change points are 1-based
    indices into the sorted list; each must be >= 2, since the first image
    has nothing to deviate from.
    """

    scene_id: str
    target_point: tuple[float, float]
    images: tuple[StreetImage, ...]
    change_points: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.scene_id:
            raise ValueError("scene_id must be nonempty")
        if len(self.images) < 1:
            raise ValueError(f"series {self.scene_id!r} has no images")
        ordered = tuple(sorted(self.images, key=lambda im: (im.timestamp.isoformat(), im.image_id)))
        object.__setattr__(self, "images", ordered)
        object.__setattr__(self, "change_points", tuple(int(c) for c in self.change_points))
        ids = [im.image_id for im in ordered]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"series {self.scene_id!r} has duplicate image ids: {dupes}")
        n = len(ordered)
        prev = 1
        for c in self.change_points:
            if not 2 <= c <= n:
                raise ValueError(
                    f"series {self.scene_id!r}: change point {c} outside [2, {n}]"
                )
            if c <= prev:
                raise ValueError(f"series {self.scene_id!r}: change points not strictly increasing")
            prev = c

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class PairSample:
    """Chronologically ordered image pair with a binary change label."""

    scene_id: str
    earlier_id: str
    later_id: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class DatasetSplit:
    """Scene-granular partition into test/train/val; no scene straddles splits."""

    test_scene_ids: frozenset[str]
    train_scene_ids: frozenset[str]
    val_scene_ids: frozenset[str]
    seed: int

    def __post_init__(self):
        if (self.test_scene_ids & self.train_scene_ids
                or self.test_scene_ids & self.val_scene_ids
                or self.train_scene_ids & self.val_scene_ids):
            raise ValueError("split sets must be disjoint")


def assign_segments(series: StreetViewSeries) -> list[int]:
    """Segment index for each image: 1 + number of change points at or before it.

    The result is non-decreasing, starts at 1, and ends at q+1 for q change
    points. A series with no change points is all ones.
    """
    out = []
    for j in range(1, len(series) + 1):
        out.append(1 + sum(1 for c in series.change_points if c <= j))
    return out


def generate_pairs(series: StreetViewSeries) -> list[PairSample]:
    """All C(n,2) chronological pairs; label 1 iff the two segments differ."""
    n = len(series)
    if n < 2:
        logger.warning("series %s has %d image(s); no pairs generated", series.scene_id, n)
        return []
    seg = assign_segments(series)
    pairs = []
    for a in range(n):
        for b in range(a + 1, n):
            pairs.append(PairSample(
                scene_id=series.scene_id,
                earlier_id=series.images[a].image_id,
                later_id=series.images[b].image_id,
                label=int(seg[a] != seg[b]),
            ))
    return pairs


def split_dataset(
    scenes: list[StreetViewSeries],
    test_frac: float = 0.5,
    val_frac_of_rest: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle scenes with the given seed and cut test/val/train by floor counts.

    Test takes floor(test_frac * n); of the remainder, val takes
    floor(val_frac_of_rest * rest) and train keeps the leftover, so no scene
    is dropped and the same seed always yields the same partition.
    """
    if not 0.0 < test_frac < 1.0:
        raise ConfigError(f"test_frac must be in (0, 1), got {test_frac}")
    if not 0.0 < val_frac_of_rest < 1.0:
        raise ConfigError(f"val_frac_of_rest must be in (0, 1), got {val_frac_of_rest}")
    ids = sorted(s.scene_id for s in scenes)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate scene_ids in input")
    if len(ids) < 3:
        raise ConfigError(f"need at least 3 scenes to split, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_test = int(test_frac * len(ids))
    rest = ids[n_test:]
    n_val = int(val_frac_of_rest * len(rest))
    return DatasetSplit(
        test_scene_ids=frozenset(ids[:n_test]),
        val_scene_ids=frozenset(rest[:n_val]),
        train_scene_ids=frozenset(rest[n_val:]),
        seed=seed,
    )


def sample_pairwise_mode(series: StreetViewSeries, seed: int = 0) -> PairSample | None:
    """Draw one uniformly random chronological pair from the series.

    The draw is keyed by (seed, scene_id) so a batch run over many scenes
    with one seed still picks independently per scene, yet reruns are
    reproducible. Returns None for series too short to pair.
    """
    n = len(series)
    if n < 2:
        logger.warning("series %s has %d image(s); cannot sample a pair", series.scene_id, n)
        return None
    key = hashlib.sha256(f"{seed}|{series.scene_id}".encode()).digest()
    rng = random.Random(int.from_bytes(key[:8], "big"))
    total = n * (n - 1) // 2
    k = rng.randrange(total)
    # Unrank k into the (a, b) pair enumerated in generate_pairs order.
    a = 0
    row = n - 1
    while k >= row:
        k -= row
        a += 1
        row -= 1
    b = a + 1 + k
    seg = assign_segments(series)
    return PairSample(
        scene_id=series.scene_id,
        earlier_id=series.images[a].image_id,
        later_id=series.images[b].image_id,
        label=int(seg[a] != seg[b]),
    )


# --- manifest and pairs file formats ---------------------------------------

def series_to_record(series: StreetViewSeries) -> dict:
    lat, lon = series.target_point
    return {
        "scene_id": series.scene_id,
        "lat": lat,
        "lon": lon,
        "images": [
            {
                "image_id": im.image_id,
                "timestamp": im.timestamp.isoformat(),
                "panoid": im.panoid,
                "heading": im.heading,
                "cap_lat": im.capture_point[0],
                "cap_lon": im.capture_point[1],
            }
            for im in series.images
        ],
        "change_points": list(series.change_points),
    }


def series_from_record(rec: dict) -> StreetViewSeries:
    try:
        images = tuple(
            StreetImage(
                image_id=im["image_id"],
                timestamp=date.fromisoformat(im["timestamp"]),
                panoid=im["panoid"],
                heading=float(im["heading"]),
                capture_point=(float(im["cap_lat"]), float(im["cap_lon"])),
            )
            for im in rec["images"]
        )
        return StreetViewSeries(
            scene_id=rec["scene_id"],
            target_point=(float(rec["lat"]), float(rec["lon"])),
            images=images,
            change_points=tuple(rec.get("change_points", [])),
        )
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed series record: {exc!r}") from exc


def write_manifest(scenes: list[StreetViewSeries], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(series_to_record(s), separators=(",", ":")) + "\n")


def load_manifest(path: str | Path) -> list[StreetViewSeries]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            scenes.append(series_from_record(rec))
    seen: set[str] = set()
    for s in scenes:
        if s.scene_id in seen:
            raise DataFormatError(f"{path}: duplicate scene_id {s.scene_id!r}")
        seen.add(s.scene_id)
    return scenes


PAIRS_HEADER = ["scene_id", "earlier_id", "later_id", "label"]


def write_pairs(pairs: list[PairSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PAIRS_HEADER)
        for p in pairs:
            writer.writerow([p.scene_id, p.earlier_id, p.later_id, p.label])


def load_pairs(path: str | Path) -> list[PairSample]:
    pairs = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PAIRS_HEADER:
            raise DataFormatError(f"{path}: expected header {PAIRS_HEADER}, got {header}")
        for row in reader:
            if len(row) != 4:
                raise DataFormatError(f"{path}: malformed row {row!r}")
            pairs.append(PairSample(row[0], row[1], row[2], int(row[3])))
    return pairs
