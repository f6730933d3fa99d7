"""
Parse, validate, geofence and time-bucket raw post streams.
"""
import json
import logging
from collections import defaultdict
from datetime import date, datetime
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, TextIO, Union
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import numpy as np
from pydantic import ValidationError

from .errors import ConfigError
from .geo import haversine_many
from .models import Geofence, GeoPoint, Post, PostRecord, RejectRecord, TimeSlotKey

logger = logging.getLogger(__name__)

DEFAULT_TIMEZONE = "America/New_York"

SlotBuckets = Dict[TimeSlotKey, Dict[date, List[Post]]]


class ParseResult(NamedTuple):
    posts: List[Post]
    rejects: List[RejectRecord]


@lru_cache(maxsize=64)
def resolve_timezone(name: str) -> ZoneInfo:
    """IANA zone for `name`; unknown ids are configuration errors."""
    try:
        return ZoneInfo(name)
    except (ZoneInfoNotFoundError, ValueError) as e:
        raise ConfigError(f"unknown timezone {name!r}") from e


def _reject_reason(error: ValidationError) -> str:
    err = error.errors()[0]
    field = str(err["loc"][0]) if err["loc"] else "record"
    kind = err["type"]
    if kind == "json_invalid":
        return "malformed JSON"
    if kind == "model_type":
        return "record is not an object"
    if kind in ("greater_than_equal", "less_than_equal", "finite_number"):
        return f"{field} out of range"
    if kind == "missing":
        return f"{field} missing"
    if kind in ("timezone_aware",):
        return f"{field} lacks a UTC offset"
    return f"{field}: {err['msg']}"


def parse_line(line: str) -> Union[Post, str]:
    """A Post, or the reason the line was rejected."""
    if not line.strip():
        return "empty line"
    try:
        record = PostRecord.model_validate_json(line)
    except ValidationError as e:
        return _reject_reason(e)
    return Post(
        id=record.id,
        t=record.t,
        loc=GeoPoint(lat=record.lat, lon=record.lon),
        text=record.text or "",
        author=record.user or "",
    )


def parse_posts(stream: Iterable[Union[str, bytes]], timezone: str = DEFAULT_TIMEZONE) -> ParseResult:
    """
    Parse newline-delimited records into Posts.

    Every well-formed line yields one Post; every other line yields a
    RejectRecord with its 1-based line number. Repeated ids are rejected as
    "duplicate". Nothing here aborts the run except an I/O error on the stream.

    Args:
        stream: Lines as str or UTF-8 bytes
        timezone: Civil timezone the run is configured with

    Returns:
        ParseResult(posts, rejects)
    """
    resolve_timezone(timezone)
    posts: List[Post] = []
    rejects: List[RejectRecord] = []
    seen: set = set()

    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                rejects.append(RejectRecord(line_no=line_no, reason="invalid utf-8"))
                continue
        parsed = parse_line(raw.rstrip("\r\n"))
        if isinstance(parsed, str):
            logger.debug("line %d rejected: %s", line_no, parsed)
            rejects.append(RejectRecord(line_no=line_no, reason=parsed))
            continue
        if parsed.id in seen:
            rejects.append(RejectRecord(line_no=line_no, reason="duplicate"))
            continue
        seen.add(parsed.id)
        posts.append(parsed)

    if rejects:
        logger.info("Parsed %d posts, rejected %d lines", len(posts), len(rejects))
    return ParseResult(posts, rejects)


def read_posts(path: Union[str, Path], timezone: str = DEFAULT_TIMEZONE) -> ParseResult:
    """Parse a newline-delimited file. OSError propagates as a fatal I/O error."""
    with open(path, "rb") as f:
        return parse_posts(f, timezone)


def write_posts(posts: Iterable[Post], sink: TextIO) -> int:
    """Write posts in the input format, one JSON object per line."""
    count = 0
    for post in posts:
        record = {
            "id": post.id,
            "t": post.t.isoformat(),
            "lat": post.loc.lat,
            "lon": post.loc.lon,
            "text": post.text,
            "user": post.author,
        }
        sink.write(json.dumps(record, ensure_ascii=False) + "\n")
        count += 1
    return count


def geofence_filter(posts: Sequence[Post], fence: Geofence) -> List[Post]:
    """Posts within fence.radius_m of the fence centre, boundary included, order kept."""
    if not posts:
        return []
    lats = np.fromiter((p.loc.lat for p in posts), dtype=np.float64, count=len(posts))
    lons = np.fromiter((p.loc.lon for p in posts), dtype=np.float64, count=len(posts))
    inside = haversine_many(fence.center.lat, fence.center.lon, lats, lons) <= fence.radius_m
    return [p for p, keep in zip(posts, inside.tolist()) if keep]


def local_time(t: datetime, timezone: str) -> datetime:
    return t.astimezone(resolve_timezone(timezone))


def slot_key(t: datetime, timezone: str = DEFAULT_TIMEZONE) -> TimeSlotKey:
    """Weekday and half-hour slot of `t` in the given civil timezone."""
    local = local_time(t, timezone)
    return TimeSlotKey(weekday=local.weekday(), slot=2 * local.hour + (1 if local.minute >= 30 else 0))


def bucket_by_slot(posts: Iterable[Post], timezone: str = DEFAULT_TIMEZONE) -> SlotBuckets:
    """
    Group posts by TimeSlotKey, then by local calendar date.

    Every post lands in exactly one (key, date) bucket; input order is kept
    inside each bucket.
    """
    buckets: SlotBuckets = defaultdict(lambda: defaultdict(list))
    for post in posts:
        local = local_time(post.t, timezone)
        key = TimeSlotKey(weekday=local.weekday(), slot=2 * local.hour + (1 if local.minute >= 30 else 0))
        buckets[key][local.date()].append(post)
    return {key: dict(by_date) for key, by_date in buckets.items()}


def post_points(posts: Sequence[Post]) -> np.ndarray:
    """(n, 2) lat/lon array in post order."""
    return np.array([(p.loc.lat, p.loc.lon) for p in posts], dtype=np.float64).reshape(-1, 2)
