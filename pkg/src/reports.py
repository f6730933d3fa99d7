"""
Output writers: outlier reports as JSON and GeoJSON, thread dumps, relevance
CSV and the top-k report.
"""
import csv
import json
import logging
from datetime import date
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .models import (
    OutlierClass,
    OutlierReport,
    Post,
    SlotPattern,
    ThreadSlotScore,
    ThreadSummary,
    TimeSlotKey,
)
from .rank import AreaRow, ClusterDigest, DayScores, RankedThread

logger = logging.getLogger(__name__)

THREAD_COLUMNS = ["thread_id", "size", "first_t", "last_t", "representative_text"]
RELEVANCE_COLUMNS = ["thread_id", "date", "slot", "relevance", "concentration", "class"]


class FeatureCollection:
    """GeoJSON writer; positions are emitted as [lon, lat]."""

    def __init__(self, properties: Optional[Dict[str, Any]] = None):
        self.features: List[Dict[str, Any]] = []
        self.properties = properties or {}

    def _add(self, geometry: Dict[str, Any], properties: Dict[str, Any]) -> None:
        self.features.append({"type": "Feature", "geometry": geometry, "properties": properties})

    def add_point(self, lat: float, lon: float, properties: Dict[str, Any]) -> None:
        self._add({"type": "Point", "coordinates": [lon, lat]}, properties)

    def add_multipoint(self, latlons: np.ndarray, properties: Dict[str, Any]) -> None:
        self._add({"type": "MultiPoint", "coordinates": [[lon, lat] for lat, lon in latlons.tolist()]}, properties)

    def add_polygon(self, ring: np.ndarray, properties: Dict[str, Any]) -> None:
        coords = [[lon, lat] for lat, lon in ring.tolist()]
        coords.append(coords[0])
        self._add({"type": "Polygon", "coordinates": [coords]}, properties)

    def add_cluster(self, latlons: np.ndarray, properties: Dict[str, Any]) -> None:
        """Convex hull polygon of the members, or a MultiPoint when the hull is degenerate."""
        if len(latlons) >= 3:
            try:
                hull = ConvexHull(latlons[:, ::-1])
                self.add_polygon(latlons[hull.vertices], properties)
                return
            except QhullError:
                logger.debug("Degenerate hull for cluster %s", properties.get("cluster_id"))
        self.add_multipoint(latlons, properties)

    def as_dict(self) -> Dict[str, Any]:
        return {"type": "FeatureCollection", "properties": self.properties, "features": self.features}

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.as_dict(), indent=1) + "\n", encoding="utf-8")


def report_geojson(
    report: OutlierReport,
    posts: Sequence[Post],
    pattern: Optional[SlotPattern] = None,
) -> Dict[str, Any]:
    """
    FeatureCollection of one slot: a feature per live cluster, and a Point
    per absent reference when the slot pattern is given.
    """
    coords = {p.id: (p.loc.lat, p.loc.lon) for p in posts}
    fc = FeatureCollection({"slot": report.key.label, "date": report.date.isoformat()})
    for verdict in report.verdicts:
        latlons = np.array([coords[pid] for pid in verdict.post_ids if pid in coords], dtype=np.float64)
        properties = {
            "cluster_id": verdict.cluster.id,
            "kind": verdict.kind.value,
            "class": verdict.outlier_class.value,
            "size": verdict.cluster.size,
            "count": verdict.count,
            "matched_ref": verdict.matched_ref,
            "dist_m": verdict.dist,
            "low_confidence": verdict.low_confidence,
        }
        if len(latlons):
            fc.add_cluster(latlons, properties)
        else:
            fc.add_point(verdict.cluster.centroid.lat, verdict.cluster.centroid.lon, properties)

    if pattern is not None:
        refs = {r.id: r for r in pattern.references}
        for absent in report.absent_refs:
            centre = refs[absent.ref_id].centroid
            fc.add_point(
                centre.lat,
                centre.lon,
                {
                    "ref_id": absent.ref_id,
                    "kind": "absent",
                    "class": absent.outlier_class.value,
                    "expected": absent.expected,
                    "low_confidence": absent.low_confidence,
                },
            )
    return fc.as_dict()


def slot_stem(day: date, key: TimeSlotKey) -> str:
    return f"{day.isoformat()}_{key.slot:02d}"


def write_slot_report(
    report: OutlierReport,
    posts: Sequence[Post],
    pattern: Optional[SlotPattern],
    output_dir: Path,
) -> Tuple[Path, Path]:
    """report JSON and GeoJSON for one slot."""
    stem = slot_stem(report.date, report.key)
    json_path = output_dir / f"{stem}.json"
    geo_path = output_dir / f"{stem}.geojson"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    geo_path.write_text(json.dumps(report_geojson(report, posts, pattern), indent=1) + "\n", encoding="utf-8")
    return json_path, geo_path


def slot_summary(report: OutlierReport, pattern: Optional[SlotPattern]) -> Dict[str, Any]:
    """Counts per slot, including the references that went quiet."""
    live = sum(v.cluster.size for v in report.verdicts)
    expected = sum(r.stats.q2 for r in pattern.references) if pattern is not None else None
    low = [
        a.ref_id for a in report.absent_refs
        if a.outlier_class in (OutlierClass.MILD_LOW, OutlierClass.EXTREME_LOW)
    ]
    return {
        "date": report.date.isoformat(),
        "slot": report.key.label,
        "n_posts": report.n_posts,
        "n_noise": report.n_noise,
        "clusters": len(report.verdicts),
        "anomalies": [
            {"cluster_id": v.cluster.id, "kind": v.kind.value, "class": v.outlier_class.value, "count": v.count}
            for v in report.anomalies()
        ],
        "absent_low": low,
        "clustered_total": live,
        "expected_total": expected,
    }


def detect_summary(
    reports: Sequence[OutlierReport],
    patterns: Mapping[TimeSlotKey, SlotPattern],
    uncovered: Iterable[Tuple[date, TimeSlotKey]],
) -> Dict[str, Any]:
    return {
        "slots": [slot_summary(r, patterns.get(r.key)) for r in reports],
        "uncovered": [{"date": d.isoformat(), "slot": k.label} for d, k in uncovered],
    }


# ==================== THREADS ====================

def write_threads_csv(summaries: Iterable[ThreadSummary], path: Path) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(THREAD_COLUMNS)
        for s in summaries:
            writer.writerow([s.id, s.size, s.first_t.isoformat(), s.last_t.isoformat(), s.representative_text])
            count += 1
    return count


def write_threads_json(summaries: Iterable[ThreadSummary], path: Path) -> None:
    payload = [s.model_dump(mode="json") for s in summaries]
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ==================== RANK ====================

def write_relevance_csv(scores: Iterable[ThreadSlotScore], path: Path) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(RELEVANCE_COLUMNS)
        for s in scores:
            writer.writerow([
                s.thread_id,
                s.date.isoformat(),
                s.key.slot,
                f"{s.relevance:.6f}",
                f"{s.concentration:.6f}",
                s.outlier_class.value if s.outlier_class else "unclustered",
            ])
            count += 1
    return count


def top_k_payload(
    day: DayScores,
    ranked: Sequence[RankedThread],
    per_slot: Mapping[int, Sequence[RankedThread]],
    digests: Mapping[int, Sequence[ClusterDigest]],
) -> Dict[str, Any]:
    def thread_rows(rows: Sequence[RankedThread]) -> List[Dict[str, Any]]:
        return [
            {
                "rank": r.rank,
                "thread_id": r.thread_id,
                "relevance": r.relevance,
                "size": r.size,
                "first_t": r.first_t.isoformat(),
                "representative_text": r.representative_text,
            }
            for r in rows
        ]

    slots = []
    for slot in day.slots:
        top_site = day.top_site(slot)
        slots.append({
            "slot": slot,
            "top_threads": thread_rows(per_slot.get(slot, [])),
            "top_site": {"site_id": top_site[0], "relevance": top_site[1]} if top_site else None,
            "clusters": [
                {
                    "cluster_id": d.cluster_id,
                    "n_points": d.n_points,
                    "class": d.outlier_class.value if d.outlier_class else None,
                    "kind": d.kind.value if d.kind else None,
                    "top": [{"thread_id": tid, "posts": n} for tid, n in d.top],
                }
                for d in digests.get(slot, [])
            ],
        })
    return {
        "date": day.date.isoformat(),
        "top_threads": thread_rows(ranked),
        "sites": [
            {
                "site_id": site.id,
                "centroid": [site.centroid.lat, site.centroid.lon],
                "series": day.site_series[site.id].values,
            }
            for site in day.sites
        ],
        "slots": slots,
    }


def _cell(text: str) -> str:
    return text.replace("|", "\\|").replace("\n", " ")


def top_k_markdown(payload: Dict[str, Any]) -> str:
    lines = [f"# Top threads, {payload['date']}", "", "| # | thread | relevance | size | text |", "|---|---|---|---|---|"]
    for row in payload["top_threads"]:
        lines.append(
            f"| {row['rank']} | {row['thread_id']} | {row['relevance']:.1f} | {row['size']} | {_cell(row['representative_text'])} |"
        )
    for slot in payload["slots"]:
        if not slot["top_threads"]:
            continue
        key = slot["slot"]
        lines += ["", f"## {key // 2:02d}:{30 * (key % 2):02d}"]
        if slot["top_site"]:
            lines.append(f"Most relevant site: {slot['top_site']['site_id']} ({slot['top_site']['relevance']:.1f})")
        for row in slot["top_threads"]:
            lines.append(f"- {row['rank']}. [{row['relevance']:.1f}] {_cell(row['representative_text'])}")
    return "\n".join(lines) + "\n"


def area_markdown(rows: Sequence[AreaRow]) -> str:
    lines = ["| threshold | area | # | size | text |", "|---|---|---|---|---|"]
    for row in rows:
        where = "inside" if row.inside else "outside"
        lines.append(f"| {row.threshold:.2f} | {where} | {row.rank} | {row.size} | {_cell(row.representative_text)} |")
    return "\n".join(lines) + "\n"


def area_payload(rows: Sequence[AreaRow]) -> List[Dict[str, Any]]:
    return [row._asdict() for row in rows]
