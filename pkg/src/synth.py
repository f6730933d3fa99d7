"""
Seeded synthetic city: Poisson crowds around hotspots, a uniform background
and planted events with ground-truth labels.
"""
import hashlib
import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from .errors import ConfigError, ContractViolation
from .geo import EARTH_RADIUS_M
from .ingest import resolve_timezone
from .models import SLOTS_PER_DAY, CityConfig, EventSpec, GeoPoint, Post

logger = logging.getLogger(__name__)

BACKGROUND = "background"
SLOT_SECONDS = 1800


@dataclass
class SyntheticDay:
    """Posts of one generated day plus their ground truth."""
    date: date
    posts: List[Post] = field(default_factory=list)
    sources: Dict[str, str] = field(default_factory=dict)
    slots: Dict[str, int] = field(default_factory=dict)
    labels: Dict[str, str] = field(default_factory=dict)
    removed: Dict[str, List[str]] = field(default_factory=dict)

    def labeled(self, event_id: str) -> List[Post]:
        return [p for p in self.posts if self.labels.get(p.id) == event_id]

    def in_slot(self, slot: int) -> List[Post]:
        return [p for p in self.posts if self.slots[p.id] == slot]

    def sort(self) -> None:
        self.posts.sort(key=lambda p: (p.t, p.id))


def load_city_config(path: Union[str, Path]) -> CityConfig:
    """Read a CityConfig from .toml or .json."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            data = json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    try:
        config = CityConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{path}: invalid city config at {where}: {err['msg']}") from e
    resolve_timezone(config.timezone)
    return config


def scatter(rng: np.random.Generator, center: GeoPoint, sigma_m: float, n: int) -> np.ndarray:
    """
    n Gaussian points around center; sigma_m is the RMS distance, so each
    axis gets sigma_m / sqrt(2).
    """
    offsets = rng.normal(0.0, sigma_m / math.sqrt(2.0), size=(n, 2))
    distances = np.hypot(offsets[:, 0], offsets[:, 1])
    bearings = np.arctan2(offsets[:, 1], offsets[:, 0])
    return destination(center, distances, bearings)


def uniform_disk(rng: np.random.Generator, center: GeoPoint, radius_m: float, n: int) -> np.ndarray:
    """n points uniform over the disk of radius_m around center."""
    u = rng.random(n)
    bearings = rng.random(n) * 2.0 * math.pi
    # stay strictly inside so rounding never pushes a point over the fence
    distances = radius_m * (1.0 - 1e-9) * np.sqrt(u)
    return destination(center, distances, bearings)


def destination(origin: GeoPoint, distances: np.ndarray, bearings: np.ndarray) -> np.ndarray:
    """Great-circle destinations (lat, lon) from origin; bearings in radians from north."""
    lat1 = math.radians(origin.lat)
    lon1 = math.radians(origin.lon)
    delta = np.asarray(distances) / EARTH_RADIUS_M
    lat2 = np.arcsin(np.sin(lat1) * np.cos(delta) + np.cos(lat1) * np.sin(delta) * np.cos(bearings))
    lon2 = lon1 + np.arctan2(
        np.sin(bearings) * np.sin(delta) * np.cos(lat1),
        np.cos(delta) - np.sin(lat1) * np.sin(lat2),
    )
    lon2 = (lon2 + math.pi) % (2.0 * math.pi) - math.pi
    return np.column_stack([np.degrees(lat2), np.degrees(lon2)])


def caption(rng: np.random.Generator, vocabulary: Sequence[str], tokens: tuple) -> str:
    low, high = tokens
    n = int(rng.integers(low, high + 1))
    return " ".join(vocabulary[int(i)] for i in rng.integers(0, len(vocabulary), size=n))


def slot_times(rng: np.random.Generator, day: date, slot: int, timezone: str, n: int) -> List[datetime]:
    """n instants uniform within the local half hour, whole seconds."""
    start = datetime.combine(day, time(slot // 2, 30 * (slot % 2)), tzinfo=resolve_timezone(timezone))
    offsets = sorted(int(s) for s in rng.integers(0, SLOT_SECONDS, size=n))
    return [start + timedelta(seconds=s) for s in offsets]


def _emit(
    day: SyntheticDay,
    rng: np.random.Generator,
    config: CityConfig,
    slot: int,
    source: str,
    points: np.ndarray,
    vocabulary: Sequence[str],
    label: Optional[str] = None,
) -> None:
    times = slot_times(rng, day.date, slot, config.timezone, len(points))
    for i, ((lat, lon), t) in enumerate(zip(points.tolist(), times)):
        post_id = f"{day.date.isoformat()}-{slot:02d}-{source}-{i}"
        day.posts.append(
            Post(
                id=post_id,
                t=t,
                loc=GeoPoint(lat=lat, lon=lon),
                text=caption(rng, vocabulary, config.caption_tokens),
                author=f"user-{int(rng.integers(0, 1_000_000))}",
            )
        )
        day.sources[post_id] = source
        day.slots[post_id] = slot
        if label is not None:
            day.labels[post_id] = label


def _day_rng(config: CityConfig, day: date, seed: Optional[int], *extra: int) -> np.random.Generator:
    base = config.seed if seed is None else seed
    return np.random.default_rng([base, day.toordinal(), *extra])


def generate_day(config: CityConfig, day: date, seed: Optional[int] = None, with_events: bool = True) -> SyntheticDay:
    """
    One day of posts: per slot, Poisson(rate) posts around every hotspot and
    Poisson(background_rate) posts uniform over the geofence. Events of the
    config dated on this day are planted afterwards.
    """
    rng = _day_rng(config, day, seed)
    out = SyntheticDay(date=day)
    fence = config.geofence
    for slot in range(SLOTS_PER_DAY):
        for hotspot in config.hotspots:
            n = int(rng.poisson(hotspot.rate_at(slot)))
            if n:
                points = scatter(rng, hotspot.center, hotspot.sigma_m, n)
                _emit(out, rng, config, slot, hotspot.id, points, config.vocabularies[hotspot.vocabulary])
        n = int(rng.poisson(config.background_rate))
        if n:
            points = uniform_disk(rng, fence.center, fence.radius_m, n)
            _emit(out, rng, config, slot, BACKGROUND, points, config.vocabularies[config.background_vocabulary])

    if with_events:
        for event in config.events:
            if event.date == day:
                out = plant_event(out, event, config, seed)
    out.sort()
    return out


def _event_salt(event_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(event_id.encode("utf-8"), digest_size=4).digest(), "little")


def plant_event(day: SyntheticDay, spec: EventSpec, config: CityConfig, seed: Optional[int] = None) -> SyntheticDay:
    """
    Apply one event to a generated day and label what it adds.

    multiplier >= 1 adds Poisson((m - 1) * rate) posts per slot at the
    target; multiplier < 1 thins the target's posts (hotspot posts, or every
    post for a city-wide event) keeping each with probability m. An absolute
    rate adds Poisson(rate) posts at the hotspot, the new location, or
    uniformly over the fence when the event has no target.

    Raises:
        ContractViolation: the event is dated on another day, or would thin
            posts already labeled by an earlier event.
    """
    if spec.date != day.date:
        raise ContractViolation(f"event {spec.id} is dated {spec.date}, not {day.date}")
    if spec.id in day.removed or any(label == spec.id for label in day.labels.values()):
        raise ContractViolation(f"event {spec.id} was already planted")

    rng = _day_rng(config, day.date, seed, _event_salt(spec.id))
    out = SyntheticDay(
        date=day.date,
        posts=list(day.posts),
        sources=dict(day.sources),
        slots=dict(day.slots),
        labels=dict(day.labels),
        removed={k: list(v) for k, v in day.removed.items()},
    )
    hotspot = config.hotspot(spec.hotspot) if spec.hotspot is not None else None
    if spec.vocabulary is not None:
        vocabulary = config.vocabularies[spec.vocabulary]
    elif hotspot is not None:
        vocabulary = config.vocabularies[hotspot.vocabulary]
    else:
        vocabulary = config.vocabularies[config.background_vocabulary]

    if spec.multiplier is not None and spec.multiplier < 1.0:
        targets = [
            p for p in out.posts
            if out.slots[p.id] in spec.slots and (hotspot is None or out.sources[p.id] == hotspot.id)
        ]
        clash = [p.id for p in targets if p.id in out.labels]
        if clash:
            raise ContractViolation(f"event {spec.id} overlaps posts labeled by another event: {clash[:3]}")
        keep = rng.random(len(targets)) < spec.multiplier
        dropped = {p.id for p, k in zip(targets, keep.tolist()) if not k}
        out.posts = [p for p in out.posts if p.id not in dropped]
        for post_id in dropped:
            out.sources.pop(post_id)
            out.slots.pop(post_id)
        out.removed[spec.id] = sorted(dropped)
        logger.info("Event %s thinned %d of %d posts", spec.id, len(dropped), len(targets))
        return out

    added = 0
    for slot in spec.slots:
        if spec.rate is not None:
            rate = spec.rate
        elif hotspot is not None:
            rate = (spec.multiplier - 1.0) * hotspot.rate_at(slot)
        else:
            rate = (spec.multiplier - 1.0) * config.background_rate
        n = int(rng.poisson(rate))
        if n == 0:
            continue
        if hotspot is not None:
            points = scatter(rng, hotspot.center, hotspot.sigma_m, n)
        elif spec.location is not None:
            points = scatter(rng, spec.location, spec.sigma_m, n)
        else:
            points = uniform_disk(rng, config.geofence.center, config.geofence.radius_m, n)
        _emit(out, rng, config, slot, spec.id, points, vocabulary, label=spec.id)
        added += n
    out.sort()
    logger.info("Event %s added %d posts over slots %d-%d", spec.id, added, spec.slot_start, spec.slot_end)
    return out


def generate_days(
    config: CityConfig,
    start: date,
    count: int,
    step_days: int = 7,
    seed: Optional[int] = None,
) -> List[SyntheticDay]:
    """`count` days from `start`, every `step_days` days (weekly by default)."""
    return [generate_day(config, start + timedelta(days=i * step_days), seed) for i in range(count)]
