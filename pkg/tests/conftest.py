from __future__ import annotations

import json
import random
from datetime import date, timedelta

import pytest

from streetchange.embeddings import SyntheticSceneParams, synthetic_records, write_store
from streetchange.timeseries import StreetImage, StreetViewSeries, write_manifest


def make_series(
    scene_id: str,
    n: int,
    change_points: tuple[int, ...] = (),
    target: tuple[float, float] = (47.6, -122.3),
) -> StreetViewSeries:
    """Series with evenly spaced yearly timestamps and globally unique image ids."""
    images = tuple(
        StreetImage(
            image_id=f"{scene_id}_img{k:03d}",
            timestamp=date(2007, 6, 1) + timedelta(days=365 * k),
            panoid=f"{scene_id}_pano{k:03d}",
            heading=90.0,
            capture_point=(target[0] + 1e-4, target[1] + 1e-4),
        )
        for k in range(n)
    )
    return StreetViewSeries(
        scene_id=scene_id, target_point=target, images=images, change_points=change_points
    )


def random_change_points(rng: random.Random, n: int, max_q: int = 3) -> tuple[int, ...]:
    if n < 2:
        return ()
    q = rng.randint(0, min(max_q, n - 1))
    return tuple(sorted(rng.sample(range(2, n + 1), q)))


def crosses_change(a: int, b: int, change_points: tuple[int, ...]) -> bool:
    """Independent pair-label oracle: a pair crosses iff some c has a < c <= b."""
    return any(a < c <= b for c in change_points)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


# Status lines from the acceptance suite, echoed after the run so they stay
# visible under pytest's output capture.
ACCEPTANCE_REPORT: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and report.failed and "test_acceptance" in report.nodeid:
        ACCEPTANCE_REPORT.append(f"FAIL  {report.nodeid.split('::')[-1]}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_REPORT:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)


def build_workspace(tmp_path, n_tracts: int = 4, scenes_per_tract: int = 10, n_images: int = 6):
    """Populate a directory with every external input the pipeline needs."""
    ws = tmp_path
    out = ws / "out"
    out.mkdir(exist_ok=True)

    scenes = []
    for t in range(n_tracts):
        changed = round(t * scenes_per_tract / 3)  # change share rises with tract index
        for k in range(scenes_per_tract):
            # tract t spans lon [10+t, 11+t]
            target = (0.5, 10.0 + t + (k + 1) / (scenes_per_tract + 1))
            cps = (4,) if k < changed else ()
            scenes.append(make_series(f"scene_t{t}_{k}", n_images, cps, target=target))
    write_manifest(scenes, ws / "manifest.jsonl")

    params = SyntheticSceneParams(dimension=8, inter_segment_distance=8.0, noise_sigma=1.0, seed=11)
    write_store(synthetic_records(scenes, params), ws / "embeddings.svem")

    features = []
    for t in range(n_tracts):
        ring = [[10.0 + t, 0.0], [11.0 + t, 0.0], [11.0 + t, 1.0], [10.0 + t, 1.0], [10.0 + t, 0.0]]
        features.append({
            "type": "Feature",
            "properties": {"geoid": f"00{t + 1}"},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        })
    (ws / "tracts.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": features}))

    permit_rows = ["permit_id,issue_date,category,estimated_cost,lat,lon"]
    for t in range(n_tracts):
        lon = 10.5 + t
        permit_rows.append(f"pm{t}a,2015-04-01,new,{120000 + 10000 * t},0.5,{lon}")
        permit_rows.append(f"pm{t}b,2016-06-01,alteration,40000,0.5,{lon}")
        permit_rows.append(f"pm{t}d,2016-06-01,demolition,500000,0.5,{lon}")
        for extra in range(t):  # tract-to-tract variation so correlations are defined
            permit_rows.append(f"pm{t}x{extra},2017-02-01,new,15000,0.6,{lon}")
    (ws / "permits.csv").write_text("\n".join(permit_rows) + "\n")

    acs_rows = ["geoid,variable,year,value"]
    for t in range(n_tracts):
        income0, income1 = 50_000.0, 50_000.0 * (1 + 0.05 * t) + 1000 * (t % 2)
        pop0, pop1 = 4000.0, 4000.0 * (1 + 0.08 * t) - 50 * (t % 2)
        acs_rows.append(f"00{t + 1},median_household_income,2009,{income0}")
        acs_rows.append(f"00{t + 1},median_household_income,2021,{income1}")
        acs_rows.append(f"00{t + 1},population,2009,{pop0}")
        acs_rows.append(f"00{t + 1},population,2021,{pop1}")
    (ws / "acs.csv").write_text("\n".join(acs_rows) + "\n")

    (ws / "pipeline.toml").write_text(
        """
[paths]
manifest = "manifest.jsonl"
embeddings = "embeddings.svem"
tracts = "tracts.geojson"
permits = "permits.csv"
acs = "acs.csv"
output_dir = "out"

[train]
learning_rate = 0.01
epochs = 60
seed = 7

[split]
seed = 5
"""
    )
    return ws, scenes
