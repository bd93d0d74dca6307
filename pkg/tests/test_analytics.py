import json
import math
import random
from datetime import date

import numpy as np
import pytest
from scipy import integrate

from streetchange.analytics import (
    CorrelationResult,
    PermitRecord,
    TractPolygon,
    TractStats,
    acs_pct_changes,
    aggregate_change,
    assign_tract,
    count_permits_by_tract,
    filter_permits,
    load_acs,
    load_permits,
    load_tract_stats,
    load_tracts,
    pct_change,
    pearson,
    regularized_incomplete_beta,
    student_t_sf_two_sided,
    write_choropleth,
    write_tract_stats,
)
from streetchange.errors import DataFormatError, UndefinedStatisticError


def square_tract(geoid: str, lat0: float, lon0: float, size: float = 1.0) -> TractPolygon:
    ring = (
        (lat0, lon0), (lat0, lon0 + size), (lat0 + size, lon0 + size),
        (lat0 + size, lon0), (lat0, lon0),
    )
    return TractPolygon(geoid, ((ring,),))


def t_density(u: float, df: int) -> float:
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + u * u / df) ** (-(df + 1) / 2)


def two_sided_p_oracle(t: float, df: int) -> float:
    """Brute-force numerical integration of the t density."""
    tail, _err = integrate.quad(t_density, abs(t), np.inf, args=(df,), epsabs=1e-13, epsrel=1e-13)
    return min(1.0, 2.0 * tail)


class TestAssignTract:
    def setup_method(self):
        self.tracts = [square_tract("002", 0.0, 1.0), square_tract("001", 0.0, 0.0)]

    def test_center_point(self):
        assert assign_tract((0.5, 0.5), self.tracts) == "001"
        assert assign_tract((0.5, 1.5), self.tracts) == "002"

    def test_outside_all(self):
        assert assign_tract((5.0, 5.0), self.tracts) is None

    def test_shared_edge_goes_to_lower_geoid(self):
        assert assign_tract((0.5, 1.0), self.tracts) == "001"

    def test_vertex_point_inside(self):
        assert assign_tract((0.0, 0.0), self.tracts) == "001"

    def test_hole_excluded(self):
        outer = ((0.0, 0.0), (0.0, 10.0), (10.0, 10.0), (10.0, 0.0), (0.0, 0.0))
        hole = ((4.0, 4.0), (4.0, 6.0), (6.0, 6.0), (6.0, 4.0), (4.0, 4.0))
        tract = TractPolygon("h", ((outer, hole),))
        assert tract.contains((2.0, 2.0))
        assert not tract.contains((5.0, 5.0))
        assert tract.contains((5.0, 4.0))  # hole boundary still counts as tract

    def test_multipart(self):
        tract = TractPolygon("m", (
            (((0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0), (0.0, 0.0)),),
            (((5.0, 5.0), (5.0, 6.0), (6.0, 6.0), (6.0, 5.0), (5.0, 5.0)),),
        ))
        assert tract.contains((0.5, 0.5))
        assert tract.contains((5.5, 5.5))
        assert not tract.contains((3.0, 3.0))


class TestAggregateChange:
    def test_share_arithmetic(self):
        tracts = [square_tract("001", 0.0, 0.0)]
        detections = [
            {"scene_id": f"s{i}", "change_points": [2] if i < 2 else []} for i in range(10)
        ]
        points = {f"s{i}": (0.5, 0.5) for i in range(10)}
        stats, unassigned = aggregate_change(detections, points, tracts)
        assert unassigned == 0
        assert stats[0].series_total == 10
        assert stats[0].series_changed == 2
        assert stats[0].change_share == pytest.approx(0.2)

    def test_conservation_with_unassigned(self):
        tracts = [square_tract("001", 0.0, 0.0), square_tract("002", 0.0, 1.0)]
        rng = random.Random(5)
        detections = []
        points = {}
        for i in range(60):
            sid = f"s{i}"
            detections.append({"scene_id": sid, "change_points": [2] if rng.random() < 0.3 else []})
            points[sid] = (rng.uniform(0, 1), rng.uniform(0, 3))  # lon can exceed tracts
        stats, unassigned = aggregate_change(detections, points, tracts)
        assert sum(s.series_total for s in stats) + unassigned == 60

    def test_zero_series_tract_has_null_share(self):
        tracts = [square_tract("001", 0.0, 0.0), square_tract("002", 0.0, 1.0)]
        stats, _ = aggregate_change(
            [{"scene_id": "a", "change_points": []}], {"a": (0.5, 0.5)}, tracts
        )
        by_geoid = {s.geoid: s in stats and s for s in stats}
        assert by_geoid["002"].series_total == 0
        assert by_geoid["002"].change_share is None

    def test_missing_scene_point_rejected(self):
        with pytest.raises(ValueError, match="no scene point"):
            aggregate_change([{"scene_id": "ghost", "change_points": []}], {}, [])


def permit(pid, day, cat, cost, lat=47.6, lon=-122.3):
    return PermitRecord(pid, day, cat, cost, (lat, lon))


class TestFilterPermits:
    def test_category_exclusion(self):
        records = [
            permit("p1", date(2015, 1, 1), "Demolition", 50_000.0),
            permit("p2", date(2015, 1, 1), "New", 50_000.0),
            permit("p3", date(2015, 1, 1), "ALTERATION", 50_000.0),
            permit("p4", date(2015, 1, 1), "addition", 50_000.0),
        ]
        kept, _ = filter_permits(records)
        assert [r.permit_id for r in kept] == ["p2", "p3", "p4"]

    def test_strict_threshold_boundary(self):
        kept, high = filter_permits([permit("p", date(2015, 1, 1), "new", 99_999.0)])
        assert [r.permit_id for r in kept] == ["p"]
        assert high == []
        kept, high = filter_permits([permit("p", date(2015, 1, 1), "new", 100_000.0)])
        assert high == []  # "exceeding" is strict
        _, high = filter_permits([permit("p", date(2015, 1, 1), "new", 100_000.01)])
        assert [r.permit_id for r in high] == ["p"]

    def test_same_location_same_year_grouped(self):
        records = [
            permit("p1", date(2015, 3, 1), "alteration", 60_000.0),
            permit("p2", date(2015, 9, 1), "alteration", 50_000.0),
        ]
        _, high = filter_permits(records)
        assert [r.permit_id for r in high] == ["p1", "p2"]

    def test_different_years_not_grouped(self):
        records = [
            permit("p1", date(2015, 3, 1), "alteration", 60_000.0),
            permit("p2", date(2016, 3, 1), "alteration", 50_000.0),
        ]
        _, high = filter_permits(records)
        assert high == []

    def test_different_locations_not_grouped(self):
        records = [
            permit("p1", date(2015, 3, 1), "new", 60_000.0, lat=47.6),
            permit("p2", date(2015, 3, 1), "new", 50_000.0, lat=47.7),
        ]
        _, high = filter_permits(records)
        assert high == []

    def test_highvalue_subset_of_kept_random(self):
        rng = random.Random(99)
        cats = ["new", "alteration", "addition", "demolition", "electrical", "NEW"]
        records = [
            permit(
                f"p{i}",
                date(rng.randint(2009, 2021), rng.randint(1, 12), 1),
                rng.choice(cats),
                rng.uniform(0, 150_000),
                lat=47.6 + rng.randint(0, 300) * 1e-4,
                lon=-122.3 - rng.randint(0, 5) * 1e-4,
            )
            for i in range(1000)
        ]
        kept, high = filter_permits(records)
        kept_ids = {r.permit_id for r in kept}
        high_ids = {r.permit_id for r in high}
        assert high_ids <= kept_ids
        assert 0 < len(high_ids) < len(kept_ids)
        assert all(r.category.casefold() in ("new", "alteration", "addition") for r in kept)

    def test_loader_skips_malformed_rows(self, tmp_path):
        path = tmp_path / "permits.csv"
        path.write_text(
            "permit_id,issue_date,category,estimated_cost,lat,lon\n"
            "p1,2015-01-02,new,120000,47.6,-122.3\n"
            "p2,not-a-date,new,1000,47.6,-122.3\n"
            "p3,2016-02-03,addition,abc,47.6,-122.3\n"
        )
        records, skipped = load_permits(path)
        assert [r.permit_id for r in records] == ["p1"]
        assert skipped == 2

    def test_loader_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "permits.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataFormatError, match="columns"):
            load_permits(path)


class TestPctChange:
    def test_plus_fifty(self):
        assert pct_change(100.0, 150.0) == pytest.approx(50.0)

    def test_minus_fifty(self):
        assert pct_change(200.0, 100.0) == pytest.approx(-50.0)

    def test_zero_base_undefined(self):
        with pytest.raises(UndefinedStatisticError, match="zero base"):
            pct_change(0.0, 50.0)

    def test_acs_join_drops_zero_base(self, caplog):
        acs = {
            ("g1", "population", 2009): 100.0,
            ("g1", "population", 2021): 150.0,
            ("g2", "population", 2009): 0.0,
            ("g2", "population", 2021): 50.0,
            ("g3", "population", 2009): 80.0,  # missing end year
        }
        with caplog.at_level("WARNING"):
            out = acs_pct_changes(acs, "population", 2009, 2021)
        assert out == {"g1": pytest.approx(50.0)}
        assert "zero base" in caplog.text
        assert "missing" in caplog.text


class TestIncompleteBeta:
    def test_matches_quadrature_on_grid(self):
        # oracle: direct numerical integration of the t density
        for df in (1, 2, 3, 5, 10, 30, 100):
            for t in (0.0, 0.31, 1.0, 1.96, 2.5, 4.0, 7.5):
                mine = student_t_sf_two_sided(t, df)
                oracle = two_sided_p_oracle(t, df)
                assert abs(mine - oracle) < 1e-9, (t, df)

    def test_beta_bounds(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
        for x in np.linspace(0.01, 0.99, 21):
            v = regularized_incomplete_beta(2.5, 0.5, float(x))
            assert 0.0 <= v <= 1.0

    def test_beta_symmetry_identity(self):
        # I_x(a,b) = 1 - I_{1-x}(b,a)
        for a, b, x in [(2.0, 3.0, 0.3), (0.5, 5.0, 0.7), (4.5, 0.5, 0.9)]:
            lhs = regularized_incomplete_beta(a, b, x)
            rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestPearson:
    def test_hand_computed_fixture(self):
        # sum dx*dy = 8, sum dx^2 = sum dy^2 = 10 -> r = 8/10
        res = pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
        assert res.r == pytest.approx(0.8, abs=1e-12)
        assert res.r_squared == pytest.approx(0.64, abs=1e-12)
        assert res.n == 5

    def test_exact_linear(self):
        res = pearson([1, 2, 3, 4], [3, 5, 7, 9])
        assert res.r == pytest.approx(1.0, abs=1e-15)
        assert res.p_value == 0.0

    def test_zero_correlation_p_one(self):
        res = pearson([1.0, 2.0, 3.0], [0.0, 1.0, 0.0])
        assert res.r == pytest.approx(0.0, abs=1e-15)
        assert res.p_value == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force_oracle_random(self):
        rng = np.random.default_rng(55)
        for _ in range(100):
            n = int(rng.integers(3, 40))
            x = rng.standard_normal(n)
            y = rng.standard_normal(n) + 0.5 * x
            res = pearson(list(x), list(y))
            dx, dy = x - x.mean(), y - y.mean()
            r_oracle = float(np.sum(dx * dy) / math.sqrt(np.sum(dx**2) * np.sum(dy**2)))
            assert abs(res.r - r_oracle) < 1e-12
            t = r_oracle * math.sqrt((n - 2) / (1 - r_oracle**2))
            assert abs(res.p_value - two_sided_p_oracle(t, n - 2)) < 1e-9

    def test_affine_invariance(self):
        rng = np.random.default_rng(60)
        x = list(rng.standard_normal(25))
        y = list(rng.standard_normal(25))
        base = pearson(x, y)
        shifted = pearson([3.5 * v + 11.0 for v in x], y)
        assert abs(base.r - shifted.r) < 1e-12
        negated = pearson([-v for v in x], y)
        assert negated.r == pytest.approx(-base.r, abs=1e-12)

    def test_p_monotone_in_abs_r(self):
        # synthesize fixed-n datasets with increasing |r|
        n = 20
        rng = np.random.default_rng(42)
        x = rng.standard_normal(n)
        noise = rng.standard_normal(n)
        ps = []
        for w in (0.0, 0.3, 0.7, 1.5, 4.0):
            y = w * x + noise
            ps.append(pearson(list(x), list(y)).p_value)
        assert all(a >= b - 1e-12 for a, b in zip(ps, ps[1:]))

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedStatisticError, match="zero-variance"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_samples_rejected(self):
        with pytest.raises(UndefinedStatisticError, match="at least 3"):
            pearson([1.0, 2.0], [1.0, 2.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            pearson([1.0, 2.0, 3.0], [1.0, 2.0])


class TestTractIO:
    def test_load_tracts_geojson(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "properties": {"geoid": "53033000100"},
                "geometry": {"type": "Polygon", "coordinates": [
                    [[-122.3, 47.6], [-122.2, 47.6], [-122.2, 47.7], [-122.3, 47.7], [-122.3, 47.6]]
                ]},
            }],
        }
        path = tmp_path / "tracts.geojson"
        path.write_text(json.dumps(doc))
        tracts = load_tracts(path)
        assert tracts[0].geoid == "53033000100"
        assert tracts[0].contains((47.65, -122.25))

    def test_tract_stats_round_trip(self, tmp_path):
        stats = [
            TractStats("001", 10, 2, 0.2, 5, 1, 12.5, -3.0),
            TractStats("002", 0, 0, None, 0, 0, None, None),
        ]
        path = tmp_path / "stats.csv"
        write_tract_stats(stats, path)
        assert load_tract_stats(path) == stats

    def test_choropleth_carries_change_share(self, tmp_path):
        tracts = [square_tract("001", 0.0, 0.0), square_tract("002", 0.0, 1.0),
                  square_tract("003", 0.0, 2.0)]
        for t in tracts:
            object.__setattr__(t, "geometry", {"type": "Polygon", "coordinates": []})
        stats = [TractStats("001", 4, 1, 0.25), TractStats("002", 2, 0, 0.0),
                 TractStats("003", 0, 0, None)]
        path = tmp_path / "choropleth.geojson"
        write_choropleth(stats, tracts, path)
        doc = json.loads(path.read_text())
        assert len(doc["features"]) == 3
        shares = {f["properties"]["geoid"]: f["properties"]["change_share"] for f in doc["features"]}
        assert shares == {"001": 0.25, "002": 0.0, "003": None}

    def test_acs_loader(self, tmp_path):
        path = tmp_path / "acs.csv"
        path.write_text(
            "geoid,variable,year,value\n"
            "g1,population,2009,1000\n"
            "g1,population,2021,1200\n"
        )
        acs = load_acs(path)
        assert acs[("g1", "population", 2021)] == 1200.0

    def test_correlation_result_invariant(self):
        res = CorrelationResult(r=-0.5, r_squared=0.25, p_value=0.1, n=10)
        assert res.r_squared == pytest.approx(res.r ** 2, abs=1e-12)
