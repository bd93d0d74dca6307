"""Scene sampling geometry: footprint centroids, bearings, panorama selection.

Coordinates are (lat, lon) WGS84 degrees throughout. Centroids are computed
on a local equirectangular projection about the ring's vertex mean, which
keeps the shoelace formula honest at high latitude; distances use the
spherical earth with R = 6,371,000 m.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import DataFormatError, GeometryError, MetadataClientError
from .timeseries import StreetImage, StreetViewSeries

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0

GeoPoint = tuple[float, float]


@dataclass(frozen=True)
class FootprintPolygon:
    """A building footprint: closed exterior ring, holes ignored for centroids."""

    building_id: str
    exterior: tuple[GeoPoint, ...]
    holes: tuple[tuple[GeoPoint, ...], ...] = ()

    def __post_init__(self):
        _validate_ring(self.exterior)


@dataclass(frozen=True)
class PanoMetadata:
    panoid: str
    location: GeoPoint
    capture_date: str  # "YYYY-MM"

    def __post_init__(self):
        lat, lon = self.location
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise ValueError(f"panorama {self.panoid!r} has invalid location {self.location}")
        if not re.fullmatch(r"\d{4}-\d{2}", self.capture_date):
            raise ValueError(f"capture_date {self.capture_date!r} is not YYYY-MM")

    def year_month(self) -> tuple[int, int]:
        y, m = self.capture_date.split("-")
        return int(y), int(m)


def _validate_ring(ring: tuple[GeoPoint, ...]) -> None:
    if len(ring) < 4 or ring[0] != ring[-1]:
        raise GeometryError("ring must be closed (first vertex equals last) with >= 3 vertices")
    if len({(round(p[0], 12), round(p[1], 12)) for p in ring[:-1]}) < 3:
        raise GeometryError("ring needs at least 3 distinct vertices")


@dataclass(frozen=True)
class Centroid:
    point: GeoPoint
    degenerate: bool = False


def polygon_centroid(ring: tuple[GeoPoint, ...] | list[GeoPoint]) -> Centroid:
    """Area-weighted centroid of a closed ring via the shoelace formula.

    Runs on a local equirectangular projection about the vertex mean, then
    projects back. Rings with vanishing area fall back to the vertex mean
    and are flagged degenerate.
    """
    ring = tuple(ring)
    _validate_ring(ring)
    verts = ring[:-1]
    lat0 = sum(p[0] for p in verts) / len(verts)
    lon0 = sum(p[1] for p in verts) / len(verts)
    k = math.cos(math.radians(lat0))
    if abs(k) < 1e-9:  # ring at a pole: projection collapses
        return Centroid((lat0, lon0), degenerate=True)
    xs = [(p[1] - lon0) * k for p in verts]
    ys = [p[0] - lat0 for p in verts]
    area2 = 0.0
    cx = cy = 0.0
    for i in range(len(verts)):
        j = (i + 1) % len(verts)
        cross = xs[i] * ys[j] - xs[j] * ys[i]
        area2 += cross
        cx += (xs[i] + xs[j]) * cross
        cy += (ys[i] + ys[j]) * cross
    if abs(area2 / 2.0) < 1e-12:
        return Centroid((lat0, lon0), degenerate=True)
    cx /= 3.0 * area2
    cy /= 3.0 * area2
    return Centroid((cy + lat0, cx / k + lon0), degenerate=False)


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def initial_bearing(origin: GeoPoint, target: GeoPoint) -> float:
    """Initial great-circle bearing origin -> target, degrees in [0, 360)."""
    if origin == target:
        raise GeometryError("bearing undefined for coincident points")
    lat1, lon1 = map(math.radians, origin)
    lat2, lon2 = map(math.radians, target)
    dlon = lon2 - lon1
    x = math.sin(dlon) * math.cos(lat2)
    y = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    return math.degrees(math.atan2(x, y)) % 360.0


def nearest_panorama(target: GeoPoint, candidates: list[PanoMetadata]) -> PanoMetadata:
    """Closest candidate by haversine distance; ties break on panoid ascending."""
    if not candidates:
        raise ValueError("no panorama candidates")
    return min(candidates, key=lambda p: (haversine_distance(target, p.location), p.panoid))


# --- metadata clients --------------------------------------------------------

class MetadataClient:
    """Interface to a historical panorama metadata backend."""

    def query(self, point: GeoPoint, radius_m: float) -> list[PanoMetadata]:
        raise NotImplementedError


class FixtureMetadataClient(MetadataClient):
    """Serves canned query results from a JSON-lines fixture file.

    Each line: {query_lat, query_lon, results: [{panoid, lat, lon, date}]}.
    A query must land within ``tolerance_deg`` of a fixture row; anything
    else is treated as a backend failure, not an empty result.
    """

    def __init__(self, path: str | Path, tolerance_deg: float = 1e-6):
        self._rows: list[tuple[GeoPoint, list[PanoMetadata]]] = []
        self._tolerance = tolerance_deg
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    point = (float(rec["query_lat"]), float(rec["query_lon"]))
                    panos = [
                        PanoMetadata(r["panoid"], (float(r["lat"]), float(r["lon"])), r["date"])
                        for r in rec["results"]
                    ]
                except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                    raise DataFormatError(f"{path}: line {lineno}: bad fixture row: {exc!r}") from exc
                self._rows.append((point, panos))

    def query(self, point: GeoPoint, radius_m: float) -> list[PanoMetadata]:
        for qpoint, panos in self._rows:
            if abs(qpoint[0] - point[0]) <= self._tolerance and abs(qpoint[1] - point[1]) <= self._tolerance:
                return [p for p in panos if haversine_distance(point, p.location) <= radius_m]
        raise MetadataClientError(f"no fixture entry for query point {point}")


class HttpMetadataClient(MetadataClient):
    """Thin adapter over an HTTP metadata endpoint.

    Expects GET <base_url>?lat=..&lon=..&radius=..&key=.. to return
    {"results": [{panoid, lat, lon, date}, ...]}. The API key comes from the
    environment (see cli); the base URL override exists for testing.
    """

    def __init__(self, base_url: str, api_key: str = "", timeout_s: float = 10.0):
        self.base_url = base_url
        self.api_key = api_key
        self.timeout_s = timeout_s

    def query(self, point: GeoPoint, radius_m: float) -> list[PanoMetadata]:
        import requests

        params = {"lat": point[0], "lon": point[1], "radius": radius_m}
        if self.api_key:
            params["key"] = self.api_key
        try:
            resp = requests.get(self.base_url, params=params, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise MetadataClientError(f"metadata request failed: {exc}") from exc
        if resp.status_code != 200:
            raise MetadataClientError(f"metadata backend returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            return [
                PanoMetadata(r["panoid"], (float(r["lat"]), float(r["lon"])), r["date"])
                for r in body["results"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise MetadataClientError(f"malformed metadata response: {exc!r}") from exc


# --- series assembly ---------------------------------------------------------

def build_series_from_point(
    scene_id: str,
    scene_point: GeoPoint,
    client: MetadataClient,
    radius_m: float = 50.0,
) -> StreetViewSeries | None:
    """Assemble the unlabeled series for one scene point, or None when no coverage.

    Per available capture month the nearest panorama wins and its heading
    faces the scene point. Repeated panoids are collapsed to their first
    capture month so each retained timestamp carries exactly one image.
    """
    from datetime import date

    candidates = client.query(scene_point, radius_m)
    if not candidates:
        logger.warning("scene %s: no panoramas within %.0f m", scene_id, radius_m)
        return None
    seen_panoids: set[str] = set()
    by_month: dict[tuple[int, int], list[PanoMetadata]] = {}
    for pano in sorted(candidates, key=lambda p: (p.capture_date, p.panoid)):
        if pano.panoid in seen_panoids:
            continue
        seen_panoids.add(pano.panoid)
        by_month.setdefault(pano.year_month(), []).append(pano)
    images = []
    for (year, month), panos in sorted(by_month.items()):
        pano = nearest_panorama(scene_point, panos)
        if pano.location == scene_point:
            logger.warning("panorama %s coincides with scene point; heading set to 0", pano.panoid)
            heading = 0.0
        else:
            heading = initial_bearing(pano.location, scene_point)
        images.append(
            StreetImage(
                image_id=pano.panoid,
                timestamp=date(year, month, 1),
                panoid=pano.panoid,
                heading=heading,
                capture_point=pano.location,
            )
        )
    return StreetViewSeries(
        scene_id=scene_id,
        target_point=scene_point,
        images=tuple(images),
        change_points=(),
    )


def build_scene_series(
    building: FootprintPolygon,
    client: MetadataClient,
    radius_m: float = 50.0,
) -> StreetViewSeries | None:
    """Series for one building footprint: centroid the ring, then assemble."""
    centroid = polygon_centroid(building.exterior)
    return build_series_from_point(building.building_id, centroid.point, client, radius_m)


# --- GeoJSON ingestion -------------------------------------------------------

def _ring_from_coords(coords: list) -> tuple[GeoPoint, ...]:
    # GeoJSON positions are [lon, lat]
    return tuple((float(pt[1]), float(pt[0])) for pt in coords)


def _local_ring_area(ring: tuple[GeoPoint, ...]) -> float:
    verts = ring[:-1]
    lat0 = sum(p[0] for p in verts) / len(verts)
    lon0 = sum(p[1] for p in verts) / len(verts)
    k = math.cos(math.radians(lat0))
    area2 = 0.0
    for i in range(len(verts)):
        j = (i + 1) % len(verts)
        area2 += ((ring[i][1] - lon0) * k) * (ring[j][0] - lat0) - ((ring[j][1] - lon0) * k) * (ring[i][0] - lat0)
    return abs(area2 / 2.0)


def load_footprints(path: str | Path) -> list[FootprintPolygon]:
    """Read a GeoJSON FeatureCollection of building footprints.

    MultiPolygon features contribute their largest-area part. The building
    id comes from properties.building_id, then properties.id, then the
    feature id, then the feature index.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid GeoJSON: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise DataFormatError(f"{path}: expected a FeatureCollection, got {doc.get('type')!r}")
    footprints = []
    for i, feature in enumerate(doc.get("features", [])):
        props = feature.get("properties") or {}
        building_id = str(
            props.get("building_id") or props.get("id") or feature.get("id") or f"footprint_{i}"
        )
        geom = feature.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            rings = geom["coordinates"]
        elif gtype == "MultiPolygon":
            rings = max(geom["coordinates"], key=lambda part: _local_ring_area(_ring_from_coords(part[0])))
        else:
            raise DataFormatError(f"{path}: feature {building_id!r} has unsupported geometry {gtype!r}")
        exterior = _ring_from_coords(rings[0])
        holes = tuple(_ring_from_coords(r) for r in rings[1:])
        footprints.append(FootprintPolygon(building_id=building_id, exterior=exterior, holes=holes))
    return footprints
