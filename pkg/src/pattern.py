"""
Training phase: reference clusters per (weekday, slot), their count
statistics, and the versioned JSON pattern file.
"""
import json
import logging
from collections import defaultdict
from datetime import date
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Set, TextIO, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .detect import RefPoints, map_jobs, match_cluster
from .errors import InsufficientData, PatternFormatError
from .geo import PointsLike, as_array, dbscan, estimate_params
from .ingest import bucket_by_slot, post_points
from .models import (
    PATTERN_FORMAT_VERSION,
    CityPattern,
    CountStats,
    DbscanParams,
    Geofence,
    GeoPoint,
    Post,
    ReferenceCluster,
    SlotPattern,
    TimeSlotKey,
)

logger = logging.getLogger(__name__)


class SlotDiagnostic(NamedTuple):
    key: TimeSlotKey
    reason: str


class TrainingResult(NamedTuple):
    pattern: CityPattern
    diagnostics: List[SlotDiagnostic]


def quartiles(counts: Sequence[float]) -> CountStats:
    """
    Q1, median and Q3 by linear interpolation at positions (n-1)*p of the
    sorted sample, plus the mild (1.5 IQR) and extreme (3 IQR) bounds.
    """
    if len(counts) == 0:
        raise InsufficientData("quartiles of an empty sample")
    q1, q2, q3 = np.percentile(np.asarray(counts, dtype=np.float64), [25, 50, 75], method="linear")
    return CountStats.from_quartiles(float(q1), float(q2), float(q3))


def train_slot(
    key: TimeSlotKey,
    daily_points: Mapping[date, PointsLike],
    params: DbscanParams,
    match_eps: Optional[float] = None,
) -> SlotPattern:
    """
    Build the SlotPattern of one (weekday, slot).

    Each day is clustered on its own, then all days together; the joint
    clusters become the references. Every per-day cluster is matched to its
    nearest reference, and a reference's daily count is the summed size of
    the clusters that matched it that day (0 when none did).

    Args:
        key: Slot being trained
        daily_points: Points of this slot for every training date, empty dates included
        params: DBSCAN parameters shared by training and detection
        match_eps: Matching cutoff in meters; defaults to params.eps
    """
    if len(daily_points) < 2:
        raise InsufficientData(
            f"{key.label}: need at least 2 training dates, got {len(daily_points)}", key=key
        )
    match_eps = params.eps if match_eps is None else match_eps
    days = sorted(daily_points)
    arrays = [as_array(daily_points[d]) for d in days]

    union = np.concatenate(arrays) if arrays else np.empty((0, 2))
    joint = dbscan(union, params)
    refs = [RefPoints(cluster.id, union[cluster.members]) for cluster in joint.clusters]

    daily_counts: Dict[int, List[int]] = {c.id: [0] * len(days) for c in joint.clusters}
    for day_index, arr in enumerate(arrays):
        if len(arr) == 0 or not refs:
            continue
        for cluster in dbscan(arr, params).clusters:
            match = match_cluster(arr[cluster.members], refs, match_eps)
            if match is not None:
                daily_counts[match.ref_id][day_index] += cluster.size

    references = []
    for cluster in joint.clusters:
        counts = daily_counts[cluster.id]
        references.append(
            ReferenceCluster(
                id=cluster.id,
                points=[GeoPoint(lat=float(lat), lon=float(lon)) for lat, lon in union[cluster.members]],
                stats=quartiles(counts),
                support=sum(1 for c in counts if c > 0),
                counts=counts,
            )
        )

    return SlotPattern(
        key=key,
        params=params,
        references=references,
        match_eps=match_eps,
        days=len(days),
    )


def slot_params(
    daily_points: Mapping[date, PointsLike],
    k: int,
    override: Optional[DbscanParams] = None,
) -> DbscanParams:
    """Configured parameters, or the median of the per-day knee estimates."""
    if override is not None:
        return override
    estimates = []
    for points in daily_points.values():
        arr = as_array(points)
        if len(arr) <= k:
            continue
        try:
            estimates.append(estimate_params(arr, k).eps)
        except InsufficientData:
            continue
    if not estimates:
        raise InsufficientData(f"no training day has more than k={k} points")
    return DbscanParams(eps=float(np.median(estimates)), min_points=k)


_TrainJob = Tuple[TimeSlotKey, Dict[date, np.ndarray], int, Optional[DbscanParams], Optional[float]]


def _train_job(job: _TrainJob) -> Union[SlotPattern, SlotDiagnostic]:
    key, daily, k, override, match_eps = job
    try:
        params = slot_params(daily, k, override)
        return train_slot(key, daily, params, match_eps)
    except InsufficientData as e:
        return SlotDiagnostic(key, str(e))


def train_city(
    posts: Sequence[Post],
    timezone: str,
    geofence: Geofence,
    k: int = 4,
    params: Optional[DbscanParams] = None,
    match_eps: Optional[float] = None,
    jobs: int = 1,
) -> TrainingResult:
    """
    Train every populated (weekday, slot).

    A slot's training dates are all dates of its weekday seen anywhere in the
    input, so a date with no posts in that slot still counts (as zero).
    Slots that cannot be trained come back as diagnostics.
    """
    buckets = bucket_by_slot(posts, timezone)
    dates_by_weekday: Dict[int, Set[date]] = defaultdict(set)
    for key, by_date in buckets.items():
        dates_by_weekday[key.weekday].update(by_date)

    jobs_list: List[_TrainJob] = []
    for key in sorted(buckets, key=TimeSlotKey.sort_key):
        daily = {
            d: post_points(buckets[key].get(d, []))
            for d in sorted(dates_by_weekday[key.weekday])
        }
        jobs_list.append((key, daily, k, params, match_eps))

    results = map_jobs(_train_job, jobs_list, jobs)
    slots = [r for r in results if isinstance(r, SlotPattern)]
    diagnostics = [r for r in results if isinstance(r, SlotDiagnostic)]
    for pattern in slots:
        logger.info(
            "Trained %s: eps=%.1fm min_points=%d, %d references over %d days",
            pattern.key.label, pattern.params.eps, pattern.params.min_points,
            len(pattern.references), pattern.days,
        )
    for diag in diagnostics:
        logger.warning("Slot %s not trained: %s", diag.key.label, diag.reason)
    return TrainingResult(CityPattern(timezone=timezone, geofence=geofence, slots=slots), diagnostics)


def dump_pattern(pattern: CityPattern) -> str:
    return pattern.model_dump_json(indent=2) + "\n"


def save_pattern(pattern: CityPattern, sink: Union[str, Path, TextIO]) -> None:
    """Write the pattern as versioned JSON."""
    text = dump_pattern(pattern)
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text, encoding="utf-8")
    else:
        sink.write(text)


def load_pattern(source: Union[str, Path, TextIO]) -> CityPattern:
    """
    Read a pattern file, failing closed.

    Raises:
        PatternFormatError: invalid JSON, unsupported format_version or a
            schema violation; `path` names the offending field.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise PatternFormatError("<root>", f"invalid or truncated JSON ({e})") from e
    if not isinstance(data, dict):
        raise PatternFormatError("<root>", "top level must be an object")
    version = data.get("format_version")
    if version != PATTERN_FORMAT_VERSION:
        raise PatternFormatError(
            "format_version", f"unsupported version {version!r}, expected {PATTERN_FORMAT_VERSION}"
        )
    try:
        return CityPattern.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise PatternFormatError(path, err["msg"]) from e
