"""
Detection phase: cluster a live slot, match its clusters to the trained
reference clusters and grade crowd counts against the boxplot bounds.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import date
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from .errors import ContractViolation, PatternMissing
from .geo import PointsLike, as_array, dbscan, pairwise_haversine
from .ingest import DEFAULT_TIMEZONE, bucket_by_slot, local_time, post_points
from .models import (
    AbsentReference,
    CityPattern,
    ClusterVerdict,
    CountStats,
    OutlierClass,
    OutlierReport,
    Post,
    ReferenceCluster,
    SlotPattern,
    TimeSlotKey,
    VerdictKind,
)

logger = logging.getLogger(__name__)

# Distances closer than this are treated as ties and go to the lower reference id.
TIE_TOLERANCE_M = 1e-9

T = TypeVar("T")
R = TypeVar("R")


class RefPoints(NamedTuple):
    id: int
    points: np.ndarray


class Match(NamedTuple):
    ref_id: int
    dist: float


class DayDetection(NamedTuple):
    reports: List[OutlierReport]
    uncovered: List[Tuple[date, TimeSlotKey]]


def map_jobs(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """Apply fn to items, in a process pool when jobs > 1. Result order follows items."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def ref_points(references: Iterable[Union[ReferenceCluster, RefPoints]]) -> List[RefPoints]:
    out = []
    for ref in references:
        if isinstance(ref, RefPoints):
            out.append(ref)
        else:
            out.append(RefPoints(ref.id, as_array(ref.points)))
    return out


def mean_min_distance(cluster_points: PointsLike, reference_points: PointsLike) -> float:
    """
    Mean, over the live cluster's points, of each point's distance to the
    nearest reference point. Not symmetric.
    """
    c = as_array(cluster_points)
    p = as_array(reference_points)
    if len(c) == 0 or len(p) == 0:
        raise ContractViolation("mean_min_distance needs a non-empty cluster and reference")
    return float(pairwise_haversine(c, p).min(axis=1).mean())


def match_cluster(
    cluster_points: PointsLike,
    references: Sequence[Union[ReferenceCluster, RefPoints]],
    match_eps: float,
) -> Optional[Match]:
    """
    Reference with the smallest mean-of-minima distance, if that distance is
    within match_eps. Ties go to the lowest reference id.
    """
    best: Optional[Match] = None
    for ref in sorted(ref_points(references), key=lambda r: r.id):
        d = mean_min_distance(cluster_points, ref.points)
        if best is None or d < best.dist - TIE_TOLERANCE_M:
            best = Match(ref.id, d)
    if best is None or best.dist > match_eps:
        return None
    return best


def classify(count: int, stats: CountStats) -> OutlierClass:
    """Grade a count; bounds are exclusive, so a count equal to a bound stays inside it."""
    if count > stats.extreme_high:
        return OutlierClass.EXTREME_HIGH
    if count > stats.mild_high:
        return OutlierClass.MILD_HIGH
    if count < stats.extreme_low:
        return OutlierClass.EXTREME_LOW
    if count < stats.mild_low:
        return OutlierClass.MILD_LOW
    return OutlierClass.NORMAL


def detect_slot(
    posts: Sequence[Post],
    pattern: SlotPattern,
    day: Optional[date] = None,
    timezone: str = DEFAULT_TIMEZONE,
) -> OutlierReport:
    """
    Cluster one live slot with the trained parameters and grade every crowd.

    Clusters matching the same reference share it; their sizes are summed for
    that reference's classification. Unmatched clusters are unexpected
    locations. References nobody matched are graded against a count of 0.

    Without `day` the date is the local civil date of the first post in
    `timezone`; an empty slot needs `day`.
    """
    if day is None:
        if not posts:
            raise ContractViolation(f"{pattern.key.label}: an empty slot needs an explicit date")
        day = local_time(posts[0].t, timezone).date()
    points = post_points(posts)
    clustering = dbscan(points, pattern.params)
    refs = ref_points(pattern.references)
    by_id: Dict[int, ReferenceCluster] = {r.id: r for r in pattern.references}

    matches: List[Optional[Match]] = []
    claimed: Dict[int, int] = {}
    for cluster in clustering.clusters:
        match = match_cluster(points[cluster.members], refs, pattern.match_eps)
        matches.append(match)
        if match is not None:
            claimed[match.ref_id] = claimed.get(match.ref_id, 0) + cluster.size

    verdicts = []
    for cluster, match in zip(clustering.clusters, matches):
        post_ids = [posts[i].id for i in cluster.members]
        if match is None:
            grade = (
                OutlierClass.EXTREME_HIGH
                if cluster.size >= pattern.params.min_points
                else OutlierClass.NORMAL
            )
            verdicts.append(
                ClusterVerdict(
                    cluster=cluster,
                    post_ids=post_ids,
                    kind=VerdictKind.UNEXPECTED_LOCATION,
                    count=cluster.size,
                    outlier_class=grade,
                )
            )
            continue
        ref = by_id[match.ref_id]
        count = claimed[match.ref_id]
        verdicts.append(
            ClusterVerdict(
                cluster=cluster,
                post_ids=post_ids,
                kind=VerdictKind.MATCHED,
                matched_ref=match.ref_id,
                dist=match.dist,
                count=count,
                outlier_class=classify(count, ref.stats),
                low_confidence=ref.low_confidence,
            )
        )

    absent = [
        AbsentReference(
            ref_id=ref.id,
            outlier_class=classify(0, ref.stats),
            expected=ref.stats.q2,
            low_confidence=ref.low_confidence,
        )
        for ref in pattern.references
        if ref.id not in claimed
    ]

    report = OutlierReport(
        key=pattern.key,
        date=day,
        match_eps=pattern.match_eps,
        n_posts=len(posts),
        n_noise=len(clustering.noise),
        verdicts=verdicts,
        absent_refs=absent,
    )
    anomalies = report.anomalies()
    if anomalies:
        logger.info(
            "%s %s: %d clusters, %d anomalous, %d absent references",
            day, pattern.key.label, len(verdicts), len(anomalies), len(absent),
        )
    return report


def _detect_job(args: Tuple[List[Post], SlotPattern, date]) -> OutlierReport:
    posts, pattern, day = args
    return detect_slot(posts, pattern, day)


def detect_day(posts: Sequence[Post], city: CityPattern, jobs: int = 1) -> DayDetection:
    """
    Run detect_slot over every (date, slot) present in posts. Slots without a
    trained pattern are returned as uncovered instead of failing the run.

    Every trained slot of a date seen in the input is evaluated, including
    slots that received no posts at all, so their references are graded
    against a count of 0.
    """
    buckets = bucket_by_slot(posts, city.timezone)
    work = []
    uncovered = []
    for key in sorted(buckets, key=TimeSlotKey.sort_key):
        for day, slot_posts in sorted(buckets[key].items()):
            try:
                pattern = city.slot(key)
            except PatternMissing:
                logger.warning("No pattern for %s on %s; slot left uncovered", key.label, day)
                uncovered.append((day, key))
                continue
            work.append((slot_posts, pattern, day))

    days = sorted({day for by_date in buckets.values() for day in by_date})
    for day in days:
        for pattern in city.slots:
            if pattern.key.weekday != day.weekday() or day in buckets.get(pattern.key, {}):
                continue
            logger.debug("%s %s: no posts, grading references against 0", day, pattern.key.label)
            work.append(([], pattern, day))

    reports = map_jobs(_detect_job, work, jobs)
    reports.sort(key=lambda r: (r.date, r.key.sort_key()))
    return DayDetection(reports, uncovered)
