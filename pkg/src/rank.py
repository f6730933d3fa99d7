"""
Thread and cluster relevance.

A thread scores in a slot by how many of its posts fall there, how
concentrated they are in one live cluster, and how anomalous that cluster
is. Live clusters are linked across the day into sites, each with its own
relevance series.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .config import RelevanceWeights
from .geo import haversine
from .ingest import bucket_by_slot, geofence_filter, local_time
from .models import (
    ClusterVerdict,
    Geofence,
    GeoPoint,
    OutlierClass,
    OutlierReport,
    Post,
    RelevanceSeries,
    ThreadSlotScore,
    ThreadSummary,
    VerdictKind,
)
from .threads import ThreadStore, discover_threads

logger = logging.getLogger(__name__)

DEFAULT_SITE_LINK_M = 300.0


def severity_weight(verdict: Optional[ClusterVerdict], weights: RelevanceWeights) -> float:
    """Weight of the cluster a thread concentrates in; None means unclustered."""
    if verdict is None:
        return weights.unclustered
    if verdict.kind == VerdictKind.UNEXPECTED_LOCATION:
        return weights.unexpected
    if verdict.outlier_class == OutlierClass.EXTREME_HIGH:
        return weights.extreme_high
    if verdict.outlier_class == OutlierClass.MILD_HIGH:
        return weights.mild_high
    if verdict.outlier_class == OutlierClass.NORMAL:
        return weights.normal
    return weights.low


def post_clusters(report: OutlierReport) -> Dict[str, ClusterVerdict]:
    """Post id -> verdict of the live cluster holding it."""
    return {pid: verdict for verdict in report.verdicts for pid in verdict.post_ids}


def thread_slot_relevance(
    thread_id: int,
    member_ids: Sequence[str],
    report: OutlierReport,
    weights: RelevanceWeights = RelevanceWeights(),
    clusters_of: Optional[Mapping[str, ClusterVerdict]] = None,
) -> ThreadSlotScore:
    """
    relevance = n_slot * concentration * w.

    concentration is the largest share of the thread's slot posts inside a
    single live cluster; w is that cluster's severity weight. When several
    clusters hold the same largest share, the heavier one wins, then the
    lower cluster id.
    """
    clusters_of = post_clusters(report) if clusters_of is None else clusters_of
    n_slot = len(member_ids)
    counts: Counter = Counter()
    by_cluster: Dict[int, ClusterVerdict] = {}
    for pid in member_ids:
        verdict = clusters_of.get(pid)
        if verdict is not None:
            counts[verdict.cluster.id] += 1
            by_cluster[verdict.cluster.id] = verdict

    holder: Optional[ClusterVerdict] = None
    concentration = 0.0
    if counts:
        top = max(counts.values())
        holder = min(
            (by_cluster[cid] for cid, n in counts.items() if n == top),
            key=lambda v: (-severity_weight(v, weights), v.cluster.id),
        )
        concentration = top / n_slot

    weight = severity_weight(holder, weights)
    return ThreadSlotScore(
        thread_id=thread_id,
        date=report.date,
        key=report.key,
        n_slot=n_slot,
        in_cluster_counts=dict(sorted(counts.items())),
        concentration=concentration,
        outlier_class=holder.outlier_class if holder else None,
        kind=holder.kind if holder else None,
        weight=weight,
        relevance=n_slot * concentration * weight,
    )


# ==================== SITES ====================

@dataclass
class Site:
    """A place where live clusters recur over the day; clusters per slot by cluster id."""
    id: int
    centroid: GeoPoint
    clusters: Dict[int, List[int]] = field(default_factory=dict)

    def verdicts(self, report: OutlierReport) -> List[ClusterVerdict]:
        wanted = set(self.clusters.get(report.key.slot, []))
        return [v for v in report.verdicts if v.cluster.id in wanted]


def link_sites(reports: Sequence[OutlierReport], site_link_m: float = DEFAULT_SITE_LINK_M) -> List[Site]:
    """
    Chain the live clusters of one day's slots into sites.

    Slots are visited in order; a cluster joins the site whose latest
    centroid is nearest and within site_link_m, otherwise it opens a new
    site. Several clusters of one slot may join the same site.
    """
    sites: List[Site] = []
    for report in sorted(reports, key=lambda r: r.key.slot):
        joined: Dict[int, List[ClusterVerdict]] = defaultdict(list)
        for verdict in report.verdicts:
            best: Optional[Tuple[float, int]] = None
            for site in sites:
                d = haversine(site.centroid, verdict.cluster.centroid)
                if d <= site_link_m and (best is None or d < best[0]):
                    best = (d, site.id)
            if best is None:
                site = Site(id=len(sites), centroid=verdict.cluster.centroid)
                sites.append(site)
                site_id = site.id
            else:
                site_id = best[1]
            joined[site_id].append(verdict)
            sites[site_id].clusters.setdefault(report.key.slot, []).append(verdict.cluster.id)

        # move each touched site to the size-weighted centroid of this slot's clusters
        for site_id, verdicts in joined.items():
            total = sum(v.cluster.size for v in verdicts)
            sites[site_id].centroid = GeoPoint(
                lat=sum(v.cluster.centroid.lat * v.cluster.size for v in verdicts) / total,
                lon=sum(v.cluster.centroid.lon * v.cluster.size for v in verdicts) / total,
            )
    return sites


def cluster_relevance(
    verdicts: Sequence[ClusterVerdict],
    assignments: Mapping[str, int],
    weights: RelevanceWeights = RelevanceWeights(),
) -> float:
    """
    Slot relevance of a set of clusters: for every thread, its members inside
    the clusters times their severity weight. Splitting a thread leaves it unchanged.
    """
    total = 0.0
    for verdict in verdicts:
        w = severity_weight(verdict, weights)
        threaded = sum(1 for pid in verdict.post_ids if pid in assignments)
        total += threaded * w
    return total


# ==================== DAY ====================

class RankedThread(NamedTuple):
    rank: int
    thread_id: int
    relevance: float
    size: int
    first_t: datetime
    representative_text: str


@dataclass
class DayScores:
    """Everything scored for one local date."""
    date: date
    slots: List[int]
    scores: List[ThreadSlotScore]
    sites: List[Site]
    site_series: Dict[int, RelevanceSeries]

    def thread_series(self, thread_id: int) -> RelevanceSeries:
        values = {s.key.slot: s.relevance for s in self.scores if s.thread_id == thread_id}
        return RelevanceSeries(
            subject=f"thread {thread_id}",
            date=self.date,
            slots=list(self.slots),
            values=[values.get(slot, 0.0) for slot in self.slots],
        )

    def thread_totals(self, slot: Optional[int] = None) -> Dict[int, float]:
        """
        Relevance per thread: at one slot, or over the day as the peak slot value.
        """
        totals: Dict[int, float] = {}
        for score in self.scores:
            if slot is not None and score.key.slot != slot:
                continue
            totals[score.thread_id] = max(totals.get(score.thread_id, 0.0), score.relevance)
        return totals

    def top_site(self, slot: int) -> Optional[Tuple[int, float]]:
        """Most relevant site at a slot; ties go to the lower site id."""
        best: Optional[Tuple[int, float]] = None
        for site_id in sorted(self.site_series):
            value = self.site_series[site_id].at(slot)
            if value > 0 and (best is None or value > best[1]):
                best = (site_id, value)
        return best


def score_day(
    posts: Sequence[Post],
    reports: Sequence[OutlierReport],
    assignments: Mapping[str, int],
    timezone: str,
    weights: RelevanceWeights = RelevanceWeights(),
    site_link_m: float = DEFAULT_SITE_LINK_M,
) -> DayScores:
    """
    Score every thread in every evaluated slot of a single day.

    Args:
        posts: The day's posts
        reports: One OutlierReport per evaluated slot, all on the same date
        assignments: Post id -> thread id; posts without a thread are ignored
        timezone: Civil timezone the reports were bucketed in
    """
    dates = {r.date for r in reports}
    if len(dates) > 1:
        raise ValueError(f"score_day expects one date, got {sorted(dates)}")
    day = dates.pop() if dates else (local_time(posts[0].t, timezone).date() if posts else date.min)
    buckets = bucket_by_slot(posts, timezone)

    scores: List[ThreadSlotScore] = []
    ordered = sorted(reports, key=lambda r: r.key.slot)
    for report in ordered:
        slot_posts = buckets.get(report.key, {}).get(report.date, [])
        members: Dict[int, List[str]] = defaultdict(list)
        for post in slot_posts:
            tid = assignments.get(post.id)
            if tid is not None:
                members[tid].append(post.id)
        clusters_of = post_clusters(report)
        for tid in sorted(members):
            scores.append(thread_slot_relevance(tid, members[tid], report, weights, clusters_of))

    slots = [r.key.slot for r in ordered]
    sites = link_sites(ordered, site_link_m)
    site_series = {}
    for site in sites:
        site_series[site.id] = RelevanceSeries(
            subject=f"site {site.id}",
            date=day,
            slots=slots,
            values=[cluster_relevance(site.verdicts(r), assignments, weights) for r in ordered],
        )
    logger.info("Scored %s: %d slots, %d thread-slot scores, %d sites", day, len(slots), len(scores), len(sites))
    return DayScores(date=day, slots=slots, scores=scores, sites=sites, site_series=site_series)


def rank_threads(
    relevance: Mapping[int, float],
    threads: Mapping[int, ThreadSummary],
    k: int,
) -> List[RankedThread]:
    """
    Top-k threads: relevance descending, then size descending, then earlier
    first_t, then lower id. Threads without a score rank with relevance 0.
    """
    if k <= 0:
        return []
    order = sorted(
        threads.values(),
        key=lambda t: (-relevance.get(t.id, 0.0), -t.size, t.first_t, t.id),
    )
    return [
        RankedThread(i + 1, t.id, relevance.get(t.id, 0.0), t.size, t.first_t, t.representative_text)
        for i, t in enumerate(order[:k])
    ]


# ==================== DIGESTS ====================

class ClusterDigest(NamedTuple):
    cluster_id: Optional[int]
    n_points: int
    outlier_class: Optional[OutlierClass]
    kind: Optional[VerdictKind]
    top: List[Tuple[int, int]]


def _top_threads(post_ids: Sequence[str], assignments: Mapping[str, int], k: int) -> List[Tuple[int, int]]:
    counts = Counter(assignments[pid] for pid in post_ids if pid in assignments)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:k]


def cluster_threads(
    report: OutlierReport,
    slot_posts: Sequence[Post],
    assignments: Mapping[str, int],
    k: int = 3,
) -> List[ClusterDigest]:
    """Top threads of every live cluster of a slot, then of its unclustered posts."""
    digests = [
        ClusterDigest(v.cluster.id, v.cluster.size, v.outlier_class, v.kind, _top_threads(v.post_ids, assignments, k))
        for v in report.verdicts
    ]
    clustered = set(post_clusters(report))
    loose = [p.id for p in slot_posts if p.id not in clustered]
    digests.append(ClusterDigest(None, len(loose), None, None, _top_threads(loose, assignments, k)))
    return digests


class AreaRow(NamedTuple):
    threshold: float
    inside: bool
    rank: int
    size: int
    representative_text: str


def area_comparison(
    posts: Sequence[Post],
    area: Geofence,
    thresholds: Sequence[float],
    make_store: Callable[[float], ThreadStore],
    k: int = 3,
) -> List[AreaRow]:
    """
    Largest threads among posts inside a sub-area and among those outside it,
    discovered separately for every threshold.
    """
    inside = geofence_filter(posts, area)
    inside_ids = {p.id for p in inside}
    outside = [p for p in posts if p.id not in inside_ids]
    rows: List[AreaRow] = []
    for threshold in thresholds:
        for is_inside, subset in ((True, inside), (False, outside)):
            store = discover_threads(subset, make_store(threshold))
            largest = sorted(store.threads.values(), key=lambda t: (-t.size, t.first_t, t.id))[:k]
            rows.extend(
                AreaRow(threshold, is_inside, i + 1, t.size, t.representative_text)
                for i, t in enumerate(largest)
            )
    return rows
