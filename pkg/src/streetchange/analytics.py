"""Census-tract aggregation of detected change, permit filtering, correlation.

Detected series are binned into tracts by ray-casting their scene point
against tract polygons; construction permits are filtered to the
change-like categories and a high-value subset; tract-level change share
is then correlated against socio-demographic percentage deltas with a
hand-rolled Pearson r and Student-t p-value (regularized incomplete beta).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataFormatError, UndefinedStatisticError
from .fileio import atomic_write_text
from .geo import GeoPoint

logger = logging.getLogger(__name__)

CHANGE_CATEGORIES = ("new", "alteration", "addition")
HIGHVALUE_THRESHOLD_USD = 100_000.0
LOCATION_GROUP_DECIMALS = 5  # ~1 m at mid latitudes


Ring = tuple[GeoPoint, ...]


@dataclass(frozen=True)
class TractPolygon:
    """One census tract: possibly multi-part, each part exterior + holes.

    ``geometry`` keeps the raw GeoJSON geometry so reports can re-emit it.
    """

    geoid: str
    parts: tuple[tuple[Ring, ...], ...]
    geometry: dict | None = None

    def contains(self, point: GeoPoint) -> bool:
        """Even-odd containment; boundary points count as inside."""
        for part in self.parts:
            for ring in part:
                if _point_on_ring(point, ring):
                    return True
            crossings = sum(_ray_crossings(point, ring) for ring in part)
            if crossings % 2 == 1:
                return True
        return False


def _point_on_ring(point: GeoPoint, ring: Ring, eps: float = 1e-12) -> bool:
    y, x = point  # lat -> y, lon -> x
    for i in range(len(ring) - 1):
        y1, x1 = ring[i]
        y2, x2 = ring[i + 1]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if abs(cross) <= eps:
            if min(x1, x2) - eps <= x <= max(x1, x2) + eps and min(y1, y2) - eps <= y <= max(y1, y2) + eps:
                return True
    return False


def _ray_crossings(point: GeoPoint, ring: Ring) -> int:
    y, x = point
    count = 0
    for i in range(len(ring) - 1):
        y1, x1 = ring[i]
        y2, x2 = ring[i + 1]
        if (y1 > y) != (y2 > y):
            x_int = (x2 - x1) * (y - y1) / (y2 - y1) + x1
            if x < x_int:
                count += 1
    return count


def assign_tract(point: GeoPoint, tracts: Sequence[TractPolygon]) -> str | None:
    """Geoid of the tract containing the point, or None when outside all.

    Tracts are probed in ascending geoid order, so a point on a shared
    boundary lands in the lowest geoid deterministically.
    """
    for tract in sorted(tracts, key=lambda t: t.geoid):
        if tract.contains(point):
            return tract.geoid
    return None


def load_tracts(path: str | Path) -> list[TractPolygon]:
    """Read tract polygons from GeoJSON; each feature needs a geoid property."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid GeoJSON: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise DataFormatError(f"{path}: expected a FeatureCollection, got {doc.get('type')!r}")
    tracts = []
    seen: set[str] = set()
    for feature in doc.get("features", []):
        props = feature.get("properties") or {}
        geoid = props.get("geoid") or props.get("GEOID") or feature.get("id")
        if geoid is None:
            raise DataFormatError(f"{path}: tract feature missing a geoid property")
        geoid = str(geoid)
        if geoid in seen:
            raise DataFormatError(f"{path}: duplicate tract geoid {geoid!r}")
        seen.add(geoid)
        geom = feature.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise DataFormatError(f"{path}: tract {geoid!r} has unsupported geometry {gtype!r}")
        parts = tuple(
            tuple(tuple((float(pt[1]), float(pt[0])) for pt in ring) for ring in poly)
            for poly in polys
        )
        tracts.append(TractPolygon(geoid=geoid, parts=parts, geometry=geom))
    return tracts


# --- tract-level aggregation -------------------------------------------------

@dataclass
class TractStats:
    geoid: str
    series_total: int = 0
    series_changed: int = 0
    change_share: float | None = None
    permits_all: int = 0
    permits_highvalue: int = 0
    income_pct_change: float | None = None
    population_pct_change: float | None = None


def aggregate_change(
    detections: Iterable[Mapping],
    scene_points: Mapping[str, GeoPoint],
    tracts: Sequence[TractPolygon],
) -> tuple[list[TractStats], int]:
    """Count series and changed series per tract.

    ``detections`` are detection records (scene_id + change_points);
    ``scene_points`` maps every detected scene to its target point. Returns
    stats for every tract (zero-series tracts keep a null share) plus the
    count of series falling outside all tracts.
    """
    stats = {t.geoid: TractStats(geoid=t.geoid) for t in tracts}
    unassigned = 0
    for det in detections:
        scene_id = det["scene_id"]
        if scene_id not in scene_points:
            raise ValueError(f"detection for scene {scene_id!r} has no scene point")
        geoid = assign_tract(scene_points[scene_id], tracts)
        if geoid is None:
            unassigned += 1
            continue
        entry = stats[geoid]
        entry.series_total += 1
        if det["change_points"]:
            entry.series_changed += 1
    for entry in stats.values():
        if entry.series_total > 0:
            entry.change_share = entry.series_changed / entry.series_total
    return [stats[g] for g in sorted(stats)], unassigned


# --- construction permits ----------------------------------------------------

@dataclass(frozen=True)
class PermitRecord:
    permit_id: str
    issue_date: date
    category: str
    estimated_cost: float
    location: GeoPoint

    def __post_init__(self):
        if self.estimated_cost < 0:
            raise ValueError(f"permit {self.permit_id!r} has negative cost")


def load_permits(path: str | Path) -> tuple[list[PermitRecord], int]:
    """Parse the permits CSV; malformed rows are skipped and counted."""
    records = []
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"permit_id", "issue_date", "category", "estimated_cost", "lat", "lon"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: permits CSV must have columns {sorted(expected)}")
        for row in reader:
            try:
                records.append(
                    PermitRecord(
                        permit_id=row["permit_id"],
                        issue_date=date.fromisoformat(row["issue_date"]),
                        category=row["category"],
                        estimated_cost=float(row["estimated_cost"]),
                        location=(float(row["lat"]), float(row["lon"])),
                    )
                )
            except (KeyError, TypeError, ValueError):
                skipped += 1
    if skipped:
        logger.warning("%s: skipped %d unparseable permit rows", path, skipped)
    return records, skipped


def filter_permits(
    records: Iterable[PermitRecord],
    categories: Sequence[str] = CHANGE_CATEGORIES,
    highvalue_threshold: float = HIGHVALUE_THRESHOLD_USD,
) -> tuple[list[PermitRecord], list[PermitRecord]]:
    """Keep change-like categories; pull out the high-value subset.

    High value means the summed estimated cost of permits sharing a
    location (rounded to 1e-5 degrees) and calendar year strictly exceeds
    the threshold; every permit of a qualifying group is included.
    """
    wanted = {c.casefold() for c in categories}
    all_kept = [r for r in records if r.category.casefold() in wanted]
    groups: dict[tuple[float, float, int], float] = {}
    for r in all_kept:
        key = (
            round(r.location[0], LOCATION_GROUP_DECIMALS),
            round(r.location[1], LOCATION_GROUP_DECIMALS),
            r.issue_date.year,
        )
        groups[key] = groups.get(key, 0.0) + r.estimated_cost
    highvalue = [
        r
        for r in all_kept
        if groups[(
            round(r.location[0], LOCATION_GROUP_DECIMALS),
            round(r.location[1], LOCATION_GROUP_DECIMALS),
            r.issue_date.year,
        )] > highvalue_threshold
    ]
    return all_kept, highvalue


def count_permits_by_tract(
    permits: Iterable[PermitRecord], tracts: Sequence[TractPolygon]
) -> dict[str, int]:
    counts: dict[str, int] = {}
    for permit in permits:
        geoid = assign_tract(permit.location, tracts)
        if geoid is not None:
            counts[geoid] = counts.get(geoid, 0) + 1
    return counts


# --- socio-demographic deltas ------------------------------------------------

def pct_change(v_start: float, v_end: float) -> float:
    """Relative percentage change; undefined for a zero base."""
    if v_start == 0:
        raise UndefinedStatisticError("percentage change undefined for zero base value")
    return 100.0 * (v_end - v_start) / v_start


def load_acs(path: str | Path) -> dict[tuple[str, str, int], float]:
    """ACS long CSV (geoid,variable,year,value) -> lookup dict."""
    out: dict[tuple[str, str, int], float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"geoid", "variable", "year", "value"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: ACS CSV must have columns {sorted(expected)}")
        for row in reader:
            try:
                out[(row["geoid"], row["variable"], int(row["year"]))] = float(row["value"])
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: bad ACS row {row!r}: {exc}") from exc
    return out


def acs_pct_changes(
    acs: Mapping[tuple[str, str, int], float],
    variable: str,
    start_year: int,
    end_year: int,
) -> dict[str, float]:
    """Per-geoid percentage change of one variable; zero-base tracts dropped."""
    geoids = {g for (g, v, _y) in acs if v == variable}
    out: dict[str, float] = {}
    for geoid in sorted(geoids):
        start = acs.get((geoid, variable, start_year))
        end = acs.get((geoid, variable, end_year))
        if start is None or end is None:
            logger.warning("tract %s: %s missing for %d or %d; dropped", geoid, variable, start_year, end_year)
            continue
        try:
            out[geoid] = pct_change(start, end)
        except UndefinedStatisticError:
            logger.warning("tract %s: %s has zero base in %d; dropped", geoid, variable, start_year)
    return out


# --- correlation -------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationResult:
    r: float
    r_squared: float
    p_value: float
    n: int


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction failed to converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via I_x(df/2, 1/2)."""
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Pearson r with the two-sided Student-t p-value.

    Needs n >= 3 and nonzero variance in both variables; |r| = 1 yields
    p = 0 exactly.
    """
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 3:
        raise UndefinedStatisticError(f"need at least 3 samples for a p-value, got {n}")
    mx = sum(x) / n
    my = sum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = sum(v * v for v in dx)
    syy = sum(v * v for v in dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatisticError("correlation undefined for zero-variance input")
    sxy = sum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if 1.0 - r * r <= 0.0:
        p = 0.0
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
        p = student_t_sf_two_sided(t, df)
    return CorrelationResult(r=r, r_squared=r * r, p_value=p, n=n)


# --- report writers ----------------------------------------------------------

TRACT_STATS_HEADER = [
    "geoid", "series_total", "series_changed", "change_share",
    "permits_all", "permits_highvalue", "income_pct_change", "population_pct_change",
]


def write_tract_stats(stats: list[TractStats], path: str | Path) -> None:
    def fmt(v: float | None) -> str:
        return "" if v is None else repr(v)

    lines = [",".join(TRACT_STATS_HEADER)]
    for s in stats:
        lines.append(",".join([
            s.geoid, str(s.series_total), str(s.series_changed), fmt(s.change_share),
            str(s.permits_all), str(s.permits_highvalue),
            fmt(s.income_pct_change), fmt(s.population_pct_change),
        ]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_tract_stats(path: str | Path) -> list[TractStats]:
    stats = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACT_STATS_HEADER:
            raise DataFormatError(f"{path}: expected header {TRACT_STATS_HEADER}")
        for row in reader:
            stats.append(TractStats(
                geoid=row["geoid"],
                series_total=int(row["series_total"]),
                series_changed=int(row["series_changed"]),
                change_share=float(row["change_share"]) if row["change_share"] else None,
                permits_all=int(row["permits_all"]),
                permits_highvalue=int(row["permits_highvalue"]),
                income_pct_change=float(row["income_pct_change"]) if row["income_pct_change"] else None,
                population_pct_change=float(row["population_pct_change"]) if row["population_pct_change"] else None,
            ))
    return stats


def write_correlation_report(entries: list[dict], path: str | Path) -> None:
    atomic_write_text(path, json.dumps(entries, indent=2, sort_keys=True) + "\n")


def write_choropleth(
    stats: list[TractStats], tracts: Sequence[TractPolygon], path: str | Path
) -> None:
    """GeoJSON of tract geometries carrying their change_share property."""
    by_geoid = {s.geoid: s for s in stats}
    features = []
    for tract in sorted(tracts, key=lambda t: t.geoid):
        entry = by_geoid.get(tract.geoid)
        features.append({
            "type": "Feature",
            "properties": {
                "geoid": tract.geoid,
                "change_share": None if entry is None else entry.change_share,
                "series_total": 0 if entry is None else entry.series_total,
                "series_changed": 0 if entry is None else entry.series_changed,
            },
            "geometry": tract.geometry,
        })
    doc = {"type": "FeatureCollection", "features": features}
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")
