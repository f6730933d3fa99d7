import math
from datetime import date as Date, datetime
from enum import Enum
from typing import Annotated, Dict, List, Optional, Tuple

from pydantic import (
    AwareDatetime,
    BaseModel,
    ConfigDict,
    Field,
    StrictStr,
    field_validator,
    model_validator,
)

from .errors import PatternMissing

WEEKDAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
SLOTS_PER_DAY = 48
MAX_SLOT_PATTERNS = 7 * SLOTS_PER_DAY

Latitude = Annotated[float, Field(ge=-90.0, le=90.0, allow_inf_nan=False)]
Longitude = Annotated[float, Field(ge=-180.0, le=180.0, allow_inf_nan=False)]


# ==================== INGEST ====================

class GeoPoint(BaseModel):
    """A WGS84 position in decimal degrees."""
    model_config = ConfigDict(frozen=True)

    lat: Latitude
    lon: Longitude


class PostRecord(BaseModel):
    """One line of the input format, exactly as it arrives."""
    model_config = ConfigDict(extra="ignore")

    id: StrictStr = Field(min_length=1)
    t: AwareDatetime = Field(strict=True)
    lat: Annotated[float, Field(strict=True, ge=-90.0, le=90.0, allow_inf_nan=False)]
    lon: Annotated[float, Field(strict=True, ge=-180.0, le=180.0, allow_inf_nan=False)]
    text: Optional[StrictStr] = None
    user: Optional[StrictStr] = None


class Post(BaseModel):
    """Canonical geo-tagged post. `t` keeps the offset it was published with."""
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    t: AwareDatetime
    loc: GeoPoint
    text: str = ""
    author: str = ""


class RejectRecord(BaseModel):
    """Response model for a line that could not become a Post."""
    line_no: int = Field(ge=1)
    reason: str


class TimeSlotKey(BaseModel):
    """(weekday, half-hour slot) of local civil time. Monday = 0."""
    model_config = ConfigDict(frozen=True)

    weekday: int = Field(ge=0, le=6)
    slot: int = Field(ge=0, lt=SLOTS_PER_DAY)

    @property
    def label(self) -> str:
        return f"{WEEKDAY_NAMES[self.weekday]} {self.slot // 2:02d}:{30 * (self.slot % 2):02d}"

    def sort_key(self) -> Tuple[int, int]:
        return (self.weekday, self.slot)


class Geofence(BaseModel):
    """Circular analysis area."""
    model_config = ConfigDict(frozen=True)

    center: GeoPoint
    radius_m: float = Field(gt=0, allow_inf_nan=False)


# ==================== GEO ====================

class DbscanParams(BaseModel):
    """DBSCAN radius (meters, Haversine) and minimum neighbourhood size."""
    model_config = ConfigDict(frozen=True)

    eps: float = Field(gt=0, allow_inf_nan=False)
    min_points: int = Field(ge=2)


class Cluster(BaseModel):
    id: int = Field(ge=0)
    members: List[int]
    size: int = Field(ge=1)
    centroid: GeoPoint

    @model_validator(mode="after")
    def _size_matches_members(self) -> "Cluster":
        if self.size != len(self.members):
            raise ValueError("size must equal the number of members")
        return self


class Clustering(BaseModel):
    """Output of one DBSCAN run over `n_points` indexed points."""
    n_points: int = Field(ge=0)
    clusters: List[Cluster] = Field(default_factory=list)
    noise: List[int] = Field(default_factory=list)
    core: List[int] = Field(default_factory=list)

    def labels(self) -> List[int]:
        """Per-point cluster id, -1 for noise."""
        out = [-1] * self.n_points
        for cluster in self.clusters:
            for i in cluster.members:
                out[i] = cluster.id
        return out


# ==================== PATTERN ====================

class CountStats(BaseModel):
    """Boxplot summary of a reference's daily crowd counts."""
    q1: float
    q2: float
    q3: float
    iqr: float = Field(ge=0)
    mild_low: float
    mild_high: float
    extreme_low: float
    extreme_high: float

    @classmethod
    def from_quartiles(cls, q1: float, q2: float, q3: float) -> "CountStats":
        iqr = q3 - q1
        return cls(
            q1=q1,
            q2=q2,
            q3=q3,
            iqr=iqr,
            mild_low=q1 - 1.5 * iqr,
            mild_high=q3 + 1.5 * iqr,
            extreme_low=q1 - 3.0 * iqr,
            extreme_high=q3 + 3.0 * iqr,
        )

    @model_validator(mode="after")
    def _bound_algebra(self) -> "CountStats":
        if not (self.q1 <= self.q2 <= self.q3):
            raise ValueError("quartiles must satisfy q1 <= q2 <= q3")
        if not _close(self.iqr, self.q3 - self.q1):
            raise ValueError("iqr must equal q3 - q1")
        if not (
            _close(self.mild_low, self.q1 - 1.5 * self.iqr)
            and _close(self.mild_high, self.q3 + 1.5 * self.iqr)
            and _close(self.extreme_low, self.q1 - 3.0 * self.iqr)
            and _close(self.extreme_high, self.q3 + 3.0 * self.iqr)
        ):
            raise ValueError("outlier bounds do not follow q1/q3 and iqr")
        return self


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-9)


class ReferenceCluster(BaseModel):
    """A trained crowd location for one (weekday, slot)."""
    id: int = Field(ge=0)
    points: List[GeoPoint] = Field(min_length=1)
    stats: CountStats
    support: int = Field(ge=0)
    counts: List[int] = Field(default_factory=list)

    @property
    def low_confidence(self) -> bool:
        return self.support < 2

    @property
    def centroid(self) -> GeoPoint:
        n = len(self.points)
        return GeoPoint(
            lat=sum(p.lat for p in self.points) / n,
            lon=sum(p.lon for p in self.points) / n,
        )


class SlotPattern(BaseModel):
    key: TimeSlotKey
    params: DbscanParams
    references: List[ReferenceCluster] = Field(default_factory=list)
    match_eps: float = Field(gt=0, allow_inf_nan=False)
    days: int = Field(ge=0)


PATTERN_FORMAT_VERSION = 1


class CityPattern(BaseModel):
    """Trained patterns of the city, one SlotPattern per populated (weekday, slot)."""
    format_version: int = PATTERN_FORMAT_VERSION
    timezone: str
    geofence: Geofence
    slots: List[SlotPattern] = Field(default_factory=list, max_length=MAX_SLOT_PATTERNS)

    @field_validator("slots")
    @classmethod
    def _unique_keys(cls, slots: List[SlotPattern]) -> List[SlotPattern]:
        keys = [s.key for s in slots]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate slot keys")
        return slots

    def slot(self, key: TimeSlotKey) -> SlotPattern:
        for pattern in self.slots:
            if pattern.key == key:
                return pattern
        raise PatternMissing(f"no pattern trained for {key.label}")

    def keys(self) -> List[TimeSlotKey]:
        return [s.key for s in self.slots]


# ==================== DETECT ====================

class OutlierClass(str, Enum):
    EXTREME_LOW = "extreme_low"
    MILD_LOW = "mild_low"
    NORMAL = "normal"
    MILD_HIGH = "mild_high"
    EXTREME_HIGH = "extreme_high"

    @property
    def rank(self) -> int:
        return _CLASS_ORDER.index(self)


_CLASS_ORDER = [
    OutlierClass.EXTREME_LOW,
    OutlierClass.MILD_LOW,
    OutlierClass.NORMAL,
    OutlierClass.MILD_HIGH,
    OutlierClass.EXTREME_HIGH,
]


class VerdictKind(str, Enum):
    MATCHED = "matched"
    UNEXPECTED_LOCATION = "unexpected_location"


class ClusterVerdict(BaseModel):
    cluster: Cluster
    post_ids: List[str] = Field(default_factory=list)
    kind: VerdictKind
    matched_ref: Optional[int] = None
    dist: Optional[float] = None
    count: int = Field(ge=0)
    outlier_class: OutlierClass
    low_confidence: bool = False

    @model_validator(mode="after")
    def _kind_consistency(self) -> "ClusterVerdict":
        matched = self.kind == VerdictKind.MATCHED
        if matched != (self.matched_ref is not None) or matched != (self.dist is not None):
            raise ValueError("matched verdicts carry matched_ref and dist, unexpected ones neither")
        return self

    @property
    def is_anomaly(self) -> bool:
        return self.kind == VerdictKind.UNEXPECTED_LOCATION or self.outlier_class != OutlierClass.NORMAL


class AbsentReference(BaseModel):
    ref_id: int
    outlier_class: OutlierClass
    expected: float
    low_confidence: bool = False


class OutlierReport(BaseModel):
    key: TimeSlotKey
    date: Date
    match_eps: float
    n_posts: int = Field(ge=0)
    n_noise: int = Field(ge=0)
    verdicts: List[ClusterVerdict] = Field(default_factory=list)
    absent_refs: List[AbsentReference] = Field(default_factory=list)

    def anomalies(self) -> List[ClusterVerdict]:
        return [v for v in self.verdicts if v.is_anomaly]


# ==================== THREADS ====================

class ThreadSummary(BaseModel):
    """Serializable view of one story thread."""
    id: int
    size: int = Field(ge=1)
    first_t: datetime
    last_t: datetime
    representative_text: str
    member_ids: List[str] = Field(default_factory=list)


# ==================== RANK ====================

class ThreadSlotScore(BaseModel):
    thread_id: int
    date: Date
    key: TimeSlotKey
    n_slot: int = Field(ge=0)
    in_cluster_counts: Dict[int, int] = Field(default_factory=dict)
    concentration: float = Field(ge=0.0, le=1.0)
    outlier_class: Optional[OutlierClass] = None
    kind: Optional[VerdictKind] = None
    weight: float = Field(ge=0.0)
    relevance: float = Field(ge=0.0)


class RelevanceSeries(BaseModel):
    subject: str
    date: Date
    slots: List[int] = Field(default_factory=list)
    values: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _aligned(self) -> "RelevanceSeries":
        if len(self.slots) != len(self.values):
            raise ValueError("slots and values must have the same length")
        if any(b <= a for a, b in zip(self.slots, self.slots[1:])):
            raise ValueError("slots must be strictly increasing")
        if any(v < 0 for v in self.values):
            raise ValueError("relevance values must be non-negative")
        return self

    def at(self, slot: int) -> float:
        try:
            return self.values[self.slots.index(slot)]
        except ValueError:
            return 0.0

    @property
    def peak(self) -> float:
        return max(self.values, default=0.0)


# ==================== SYNTH ====================

class Hotspot(BaseModel):
    id: str
    center: GeoPoint
    sigma_m: float = Field(gt=0, allow_inf_nan=False)
    rate: float = Field(default=0.0, ge=0)
    slot_rates: Optional[List[Annotated[float, Field(ge=0)]]] = None
    vocabulary: str

    @field_validator("slot_rates")
    @classmethod
    def _full_day(cls, rates: Optional[List[float]]) -> Optional[List[float]]:
        if rates is not None and len(rates) != SLOTS_PER_DAY:
            raise ValueError(f"slot_rates needs {SLOTS_PER_DAY} entries")
        return rates

    def rate_at(self, slot: int) -> float:
        return self.slot_rates[slot] if self.slot_rates is not None else self.rate


class EventSpec(BaseModel):
    """Planted anomaly. No hotspot and no location means a city-wide event."""
    id: str
    date: Date
    slot_start: int = Field(ge=0, lt=SLOTS_PER_DAY)
    slot_end: int = Field(ge=0, lt=SLOTS_PER_DAY)
    hotspot: Optional[str] = None
    location: Optional[GeoPoint] = None
    sigma_m: float = Field(default=60.0, gt=0)
    multiplier: Optional[float] = Field(default=None, gt=0)
    rate: Optional[float] = Field(default=None, ge=0)
    vocabulary: Optional[str] = None

    @model_validator(mode="after")
    def _target_and_amount(self) -> "EventSpec":
        if self.slot_start > self.slot_end:
            raise ValueError("slot_start must not exceed slot_end")
        if self.hotspot is not None and self.location is not None:
            raise ValueError("an event targets a hotspot or a location, not both")
        if (self.multiplier is None) == (self.rate is None):
            raise ValueError("exactly one of multiplier and rate is required")
        if self.location is not None and self.rate is None:
            raise ValueError("new-location events need an absolute rate")
        return self

    @property
    def slots(self) -> range:
        return range(self.slot_start, self.slot_end + 1)


class CityConfig(BaseModel):
    geofence: Geofence
    timezone: str = "America/New_York"
    hotspots: List[Hotspot] = Field(default_factory=list)
    background_rate: float = Field(default=0.0, ge=0)
    background_vocabulary: str = "background"
    vocabularies: Dict[str, List[str]] = Field(default_factory=dict)
    caption_tokens: Tuple[int, int] = (3, 6)
    seed: int = Field(default=0, ge=0)
    events: List[EventSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _vocabularies_exist(self) -> "CityConfig":
        wanted = {h.vocabulary for h in self.hotspots}
        wanted |= {e.vocabulary for e in self.events if e.vocabulary}
        if self.background_rate > 0:
            wanted.add(self.background_vocabulary)
        missing = sorted(v for v in wanted if not self.vocabularies.get(v))
        if missing:
            raise ValueError(f"unknown or empty vocabularies: {', '.join(missing)}")
        ids = [h.id for h in self.hotspots]
        if len(set(ids)) != len(ids):
            raise ValueError("hotspot ids must be unique")
        for event in self.events:
            if event.hotspot is not None and event.hotspot not in ids:
                raise ValueError(f"event {event.id} targets unknown hotspot {event.hotspot}")
        low, high = self.caption_tokens
        if not 1 <= low <= high:
            raise ValueError("caption_tokens must be (min, max) with 1 <= min <= max")
        return self

    def hotspot(self, hotspot_id: str) -> Hotspot:
        for hotspot in self.hotspots:
            if hotspot.id == hotspot_id:
                return hotspot
        raise KeyError(hotspot_id)
