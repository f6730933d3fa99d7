import csv
import json
from datetime import date, datetime
from zoneinfo import ZoneInfo

import numpy as np
import pytest

from src.models import (
    AbsentReference,
    Cluster,
    ClusterVerdict,
    CountStats,
    DbscanParams,
    GeoPoint,
    OutlierClass,
    OutlierReport,
    Post,
    ReferenceCluster,
    SlotPattern,
    ThreadSlotScore,
    ThreadSummary,
    TimeSlotKey,
    VerdictKind,
)
from src.rank import DayScores, RankedThread
from src.reports import (
    RELEVANCE_COLUMNS,
    THREAD_COLUMNS,
    FeatureCollection,
    report_geojson,
    slot_summary,
    top_k_markdown,
    top_k_payload,
    write_relevance_csv,
    write_slot_report,
    write_threads_csv,
    write_threads_json,
)

DAY = date(2016, 1, 23)
KEY = TimeSlotKey(weekday=5, slot=35)
T = datetime(2016, 1, 23, 17, 40, tzinfo=ZoneInfo("America/New_York"))
SQUARE = [(40.7570, -73.9870), (40.7570, -73.9860), (40.7580, -73.9860), (40.7580, -73.9870), (40.7575, -73.9865)]


@pytest.fixture
def posts():
    return [Post(id=f"p{i}", t=T, loc=GeoPoint(lat=lat, lon=lon), text="x") for i, (lat, lon) in enumerate(SQUARE)]


@pytest.fixture
def pattern():
    stats = CountStats.from_quartiles(4, 5, 6)
    refs = [
        ReferenceCluster(id=0, points=[GeoPoint(lat=40.7575, lon=-73.9865)], stats=stats, support=4),
        ReferenceCluster(id=1, points=[GeoPoint(lat=40.7700, lon=-73.9800)], stats=stats, support=1),
    ]
    return SlotPattern(key=KEY, params=DbscanParams(eps=50, min_points=4), references=refs, match_eps=50, days=4)


@pytest.fixture
def report():
    cluster = Cluster(id=0, members=[0, 1, 2, 3, 4], size=5, centroid=GeoPoint(lat=40.7575, lon=-73.9865))
    verdict = ClusterVerdict(
        cluster=cluster,
        post_ids=[f"p{i}" for i in range(5)],
        kind=VerdictKind.MATCHED,
        matched_ref=0,
        dist=3.5,
        count=5,
        outlier_class=OutlierClass.NORMAL,
    )
    absent = AbsentReference(ref_id=1, outlier_class=OutlierClass.EXTREME_LOW, expected=5, low_confidence=True)
    return OutlierReport(key=KEY, date=DAY, match_eps=50, n_posts=7, n_noise=2, verdicts=[verdict], absent_refs=[absent])


class TestFeatureCollection:
    def test_hull_polygon(self):
        """Test a spread cluster becomes a closed convex polygon in lon/lat order"""
        fc = FeatureCollection()
        fc.add_cluster(np.array(SQUARE), {"cluster_id": 0})
        geometry = fc.features[0]["geometry"]
        assert geometry["type"] == "Polygon"
        ring = geometry["coordinates"][0]
        assert ring[0] == ring[-1]
        assert len(ring) == 5
        assert [-73.9865, 40.7575] not in ring
        assert all(lon < 0 < lat for lon, lat in ring)

    def test_collinear_falls_back(self):
        """Test a degenerate hull is written as a MultiPoint"""
        fc = FeatureCollection()
        fc.add_cluster(np.array([(40.0, -73.0), (40.1, -73.0), (40.2, -73.0)]), {"cluster_id": 1})
        assert fc.features[0]["geometry"]["type"] == "MultiPoint"

    def test_two_points(self):
        """Test clusters under three points skip the hull"""
        fc = FeatureCollection()
        fc.add_cluster(np.array([(40.0, -73.0), (40.1, -73.1)]), {})
        assert fc.features[0]["geometry"] == {"type": "MultiPoint", "coordinates": [[-73.0, 40.0], [-73.1, 40.1]]}

    def test_save(self, tmp_path):
        """Test the collection is written as JSON"""
        fc = FeatureCollection({"slot": "Sat 17:30"})
        fc.add_point(40.0, -73.0, {"a": 1})
        path = tmp_path / "out.geojson"
        fc.save(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["type"] == "FeatureCollection"
        assert data["features"][0]["geometry"]["coordinates"] == [-73.0, 40.0]


class TestSlotReports:
    def test_geojson_with_absent_reference(self, report, posts, pattern):
        """Test live clusters and absent references both become features"""
        data = report_geojson(report, posts, pattern)
        kinds = [f["properties"]["kind"] for f in data["features"]]
        assert kinds == ["matched", "absent"]
        assert data["features"][0]["properties"]["class"] == "normal"
        absent = data["features"][1]
        assert absent["geometry"]["coordinates"] == [-73.98, 40.77]
        assert absent["properties"]["low_confidence"] is True

    def test_geojson_without_pattern(self, report, posts):
        """Test absent references are skipped without the slot pattern"""
        assert len(report_geojson(report, posts)["features"]) == 1

    def test_write_slot_report(self, report, posts, pattern, tmp_path):
        """Test a slot writes a JSON report and a GeoJSON map"""
        json_path, geo_path = write_slot_report(report, posts, pattern, tmp_path)
        assert json_path.name == "2016-01-23_35.json"
        assert geo_path.name == "2016-01-23_35.geojson"
        assert OutlierReport.model_validate_json(json_path.read_text(encoding="utf-8")) == report

    def test_summary(self, report, pattern):
        """Test the slot summary lists anomalies and quiet references"""
        summary = slot_summary(report, pattern)
        assert summary["anomalies"] == []
        assert summary["absent_low"] == [1]
        assert summary["clustered_total"] == 5
        assert summary["expected_total"] == 10


class TestThreadFiles:
    @pytest.fixture
    def summaries(self):
        return [
            ThreadSummary(id=0, size=3, first_t=T, last_t=T, representative_text="snow, storm", member_ids=["a", "b", "c"]),
            ThreadSummary(id=1, size=1, first_t=T, last_t=T, representative_text="#nycc ✨"),
        ]

    def test_csv(self, summaries, tmp_path):
        """Test the thread CSV header and rows"""
        path = tmp_path / "threads.csv"
        assert write_threads_csv(summaries, path) == 2
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == THREAD_COLUMNS
        assert rows[1][4] == "snow, storm"

    def test_json(self, summaries, tmp_path):
        """Test the thread JSON keeps members and unicode text"""
        path = tmp_path / "threads.json"
        write_threads_json(summaries, path)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data[0]["member_ids"] == ["a", "b", "c"]
        assert data[1]["representative_text"] == "#nycc ✨"


class TestRankFiles:
    def test_relevance_csv(self, tmp_path):
        """Test the relevance CSV columns and the unclustered class"""
        scores = [
            ThreadSlotScore(thread_id=0, date=DAY, key=KEY, n_slot=4, concentration=1.0,
                            outlier_class=OutlierClass.EXTREME_HIGH, kind=VerdictKind.MATCHED, weight=3, relevance=12),
            ThreadSlotScore(thread_id=1, date=DAY, key=KEY, n_slot=2, concentration=0.0, weight=0, relevance=0),
        ]
        path = tmp_path / "relevance.csv"
        assert write_relevance_csv(scores, path) == 2
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == RELEVANCE_COLUMNS
        assert rows[0]["class"] == "extreme_high"
        assert float(rows[0]["relevance"]) == 12
        assert rows[1]["class"] == "unclustered"

    def test_top_k_markdown(self):
        """Test the top-k report escapes table cells"""
        day = DayScores(date=DAY, slots=[35], scores=[], sites=[], site_series={})
        ranked = [RankedThread(1, 4, 120.0, 40, T, "chewbacca | #nycc")]
        payload = top_k_payload(day, ranked, {35: ranked}, {})
        text = top_k_markdown(payload)
        assert "| 1 | 4 | 120.0 | 40 | chewbacca \\| #nycc |" in text
        assert "## 17:30" in text
        assert payload["slots"][0]["top_site"] is None
