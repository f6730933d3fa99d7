import io
import json
import math
from datetime import date, datetime, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np
import pytest

from src.errors import InsufficientData, PatternFormatError, PatternMissing
from src.geo import EARTH_RADIUS_M
from src.models import (
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
from src.pattern import (
    dump_pattern,
    load_pattern,
    quartiles,
    save_pattern,
    slot_params,
    train_city,
    train_slot,
)

NYC = "America/New_York"
CENTER = GeoPoint(lat=40.756667, lon=-73.986389)
FENCE = Geofence(center=CENTER, radius_m=5000)
KEY = TimeSlotKey(weekday=5, slot=35)
PARAMS = DbscanParams(eps=50, min_points=4)


def disk(rng, center, radius_m, n):
    r = radius_m * np.sqrt(rng.random(n))
    theta = rng.random(n) * 2 * np.pi
    dlat = np.degrees(r * np.cos(theta) / EARTH_RADIUS_M)
    dlon = np.degrees(r * np.sin(theta) / (EARTH_RADIUS_M * math.cos(math.radians(center.lat))))
    return np.column_stack([center.lat + dlat, center.lon + dlon])


def north_of(point, meters):
    return GeoPoint(lat=point.lat + math.degrees(meters / EARTH_RADIUS_M), lon=point.lon)


SATURDAYS = [date(2015, 11, 28) + timedelta(days=7 * i) for i in range(8)]


def hand_quantile(values, p):
    v = sorted(values)
    pos = (len(v) - 1) * p
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


class TestQuartiles:
    def test_constant_sample(self):
        """Test a constant sample collapses every bound"""
        stats = quartiles([5, 5, 5, 5])
        assert (stats.q1, stats.q2, stats.q3, stats.iqr) == (5, 5, 5, 0)
        assert (stats.mild_low, stats.mild_high) == (5, 5)

    def test_hand_computed(self):
        """Test [5,7,8,9,30] against hand computation"""
        stats = quartiles([5, 7, 8, 9, 30])
        assert stats.q1 == 7
        assert stats.q2 == 8
        assert stats.q3 == 9
        assert stats.iqr == 2
        assert stats.mild_high == 12
        assert stats.extreme_high == 15
        assert stats.mild_low == 4
        assert stats.extreme_low == 1

    def test_random_samples_match_oracle(self):
        """Test random count vectors against an independent interpolation"""
        rng = np.random.default_rng(4)
        for _ in range(1000):
            counts = rng.integers(0, 60, size=int(rng.integers(1, 40))).tolist()
            stats = quartiles(counts)
            assert stats.q1 == hand_quantile(counts, 0.25)
            assert stats.q2 == hand_quantile(counts, 0.5)
            assert stats.q3 == hand_quantile(counts, 0.75)

    def test_empty(self):
        """Test an empty sample raises InsufficientData"""
        with pytest.raises(InsufficientData):
            quartiles([])

    def test_bound_algebra_enforced(self):
        """Test inconsistent bounds are refused"""
        with pytest.raises(ValueError):
            CountStats(q1=1, q2=2, q3=3, iqr=2, mild_low=0, mild_high=6, extreme_low=-5, extreme_high=9)


class TestTrainSlot:
    def test_steady_hotspot(self):
        """Test a hotspot emitting 30 points a day gives one reference with collapsed stats"""
        rng = np.random.default_rng(1)
        daily = {d: disk(rng, CENTER, 20, 30) for d in SATURDAYS}
        pattern = train_slot(KEY, daily, PARAMS)
        assert len(pattern.references) == 1
        ref = pattern.references[0]
        assert ref.counts == [30] * 8
        assert (ref.stats.q1, ref.stats.q2, ref.stats.q3, ref.stats.iqr) == (30, 30, 30, 0)
        assert ref.support == 8
        assert not ref.low_confidence
        assert pattern.match_eps == PARAMS.eps
        assert pattern.days == 8

    def test_growing_counts(self):
        """Test per-day counts feed the quartiles"""
        rng = np.random.default_rng(2)
        sizes = [20, 22, 24, 26, 28, 30, 32, 34]
        daily = {d: disk(rng, CENTER, 20, n) for d, n in zip(SATURDAYS, sizes)}
        pattern = train_slot(KEY, daily, PARAMS)
        ref = pattern.references[0]
        assert ref.counts == sizes
        assert ref.stats == quartiles(sizes)

    def test_two_hotspots(self):
        """Test two hotspots 3 km apart give two references without cross-matches"""
        rng = np.random.default_rng(3)
        other = north_of(CENTER, 3000)
        sizes_a = [30, 31, 29, 30, 32, 28, 30, 31]
        sizes_b = [12, 10, 11, 13, 12, 10, 11, 12]
        daily = {
            d: np.vstack([disk(rng, CENTER, 20, a), disk(rng, other, 20, b)])
            for d, a, b in zip(SATURDAYS, sizes_a, sizes_b)
        }
        pattern = train_slot(KEY, daily, PARAMS)
        assert len(pattern.references) == 2
        first, second = pattern.references
        assert first.centroid.lat == pytest.approx(CENTER.lat, abs=1e-3)
        assert second.centroid.lat == pytest.approx(other.lat, abs=1e-3)
        assert first.counts == sizes_a
        assert second.counts == sizes_b

    def test_missing_days_count_zero(self):
        """Test dates without posts pad the counts with zeros"""
        rng = np.random.default_rng(4)
        daily = {d: disk(rng, CENTER, 20, 25) for d in SATURDAYS[:3]}
        daily[SATURDAYS[3]] = np.empty((0, 2))
        pattern = train_slot(KEY, daily, PARAMS)
        ref = pattern.references[0]
        assert ref.counts == [25, 25, 25, 0]
        assert ref.support == 3

    def test_single_supporting_day_is_low_confidence(self):
        """Test a reference seen on one day only is flagged"""
        rng = np.random.default_rng(5)
        daily = {SATURDAYS[0]: disk(rng, CENTER, 20, 25), SATURDAYS[1]: np.empty((0, 2))}
        ref = train_slot(KEY, daily, PARAMS).references[0]
        assert ref.support == 1
        assert ref.low_confidence

    def test_one_date_is_not_enough(self):
        """Test fewer than two dates raise InsufficientData"""
        rng = np.random.default_rng(6)
        with pytest.raises(InsufficientData):
            train_slot(KEY, {SATURDAYS[0]: disk(rng, CENTER, 20, 25)}, PARAMS)

    def test_deterministic(self):
        """Test identical inputs give identical patterns"""
        rng = np.random.default_rng(7)
        daily = {d: disk(rng, CENTER, 40, 30) for d in SATURDAYS}
        assert train_slot(KEY, daily, PARAMS) == train_slot(KEY, daily, PARAMS)


class TestSlotParams:
    def test_override_wins(self):
        """Test configured parameters bypass estimation"""
        assert slot_params({}, 4, PARAMS) == PARAMS

    def test_median_of_daily_estimates(self):
        """Test the estimate is positive and uses k as min_points"""
        rng = np.random.default_rng(8)
        daily = {d: disk(rng, CENTER, 100, 60) for d in SATURDAYS[:3]}
        params = slot_params(daily, 4)
        assert params.min_points == 4
        assert 0 < params.eps < 200

    def test_too_sparse(self):
        """Test days with at most k points cannot estimate parameters"""
        rng = np.random.default_rng(9)
        daily = {d: disk(rng, CENTER, 100, 3) for d in SATURDAYS[:3]}
        with pytest.raises(InsufficientData):
            slot_params(daily, 4)


class TestTrainCity:
    @pytest.fixture
    def posts(self):
        rng = np.random.default_rng(10)
        tz = ZoneInfo(NYC)
        out = []
        for d in SATURDAYS[:4]:
            for i, (lat, lon) in enumerate(disk(rng, CENTER, 20, 12)):
                t = datetime.combine(d, datetime.min.time(), tzinfo=tz) + timedelta(hours=17, minutes=31 + i)
                out.append(Post(id=f"{d}-a-{i}", t=t, loc=GeoPoint(lat=lat, lon=lon)))
        # 18:00 slot only on the first two Saturdays
        for d in SATURDAYS[:2]:
            for i, (lat, lon) in enumerate(disk(rng, CENTER, 20, 10)):
                t = datetime.combine(d, datetime.min.time(), tzinfo=tz) + timedelta(hours=18, minutes=1 + i)
                out.append(Post(id=f"{d}-b-{i}", t=t, loc=GeoPoint(lat=lat, lon=lon)))
        return out

    def test_slots_trained(self, posts):
        """Test every populated slot gets a pattern"""
        result = train_city(posts, NYC, FENCE, params=PARAMS)
        assert result.diagnostics == []
        assert result.pattern.keys() == [TimeSlotKey(weekday=5, slot=35), TimeSlotKey(weekday=5, slot=36)]

    def test_weekday_dates_padded(self, posts):
        """Test a slot missing on some dates of its weekday counts zeros there"""
        result = train_city(posts, NYC, FENCE, params=PARAMS)
        later = result.pattern.slot(TimeSlotKey(weekday=5, slot=36))
        assert later.days == 4
        assert later.references[0].counts == [10, 10, 0, 0]

    def test_parallel_matches_serial(self, posts):
        """Test the process pool gives the same pattern"""
        serial = train_city(posts, NYC, FENCE, params=PARAMS)
        parallel = train_city(posts, NYC, FENCE, params=PARAMS, jobs=2)
        assert dump_pattern(serial.pattern) == dump_pattern(parallel.pattern)

    def test_single_date_diagnosed(self, posts):
        """Test a weekday seen on one date only is reported, not trained"""
        first_day = [p for p in posts if p.id.startswith(str(SATURDAYS[0]))]
        result = train_city(first_day, NYC, FENCE, params=PARAMS)
        assert result.pattern.slots == []
        assert {d.key.slot for d in result.diagnostics} == {35, 36}

    def test_missing_slot_lookup(self, posts):
        """Test asking for an untrained slot raises PatternMissing"""
        result = train_city(posts, NYC, FENCE, params=PARAMS)
        with pytest.raises(PatternMissing):
            result.pattern.slot(TimeSlotKey(weekday=0, slot=0))


def full_pattern():
    stats = CountStats.from_quartiles(3.0, 5.5, 8.25)
    slots = []
    for weekday in range(7):
        for slot in range(48):
            ref = ReferenceCluster(
                id=0,
                points=[GeoPoint(lat=40.75 + slot * 1e-4, lon=-73.98 - weekday * 1e-4)],
                stats=stats,
                support=3,
                counts=[3, 5, 9],
            )
            slots.append(
                SlotPattern(
                    key=TimeSlotKey(weekday=weekday, slot=slot),
                    params=DbscanParams(eps=37.5 + slot / 3, min_points=4),
                    references=[ref],
                    match_eps=40.1,
                    days=3,
                )
            )
    return CityPattern(timezone=NYC, geofence=FENCE, slots=slots)


class TestPatternFile:
    def test_empty_round_trip(self):
        """Test an empty pattern round-trips"""
        empty = CityPattern(timezone=NYC, geofence=FENCE)
        assert load_pattern(io.StringIO(dump_pattern(empty))) == empty

    def test_full_pattern_byte_stable(self, tmp_path):
        """Test a 336-slot pattern re-saves to identical bytes"""
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        save_pattern(full_pattern(), first)
        save_pattern(load_pattern(first), second)
        assert first.read_bytes() == second.read_bytes()
        assert len(load_pattern(second).slots) == 336

    def test_truncated_file(self):
        """Test a truncated file fails closed"""
        text = dump_pattern(full_pattern())
        with pytest.raises(PatternFormatError) as exc:
            load_pattern(io.StringIO(text[: len(text) // 2]))
        assert exc.value.path == "<root>"

    def test_unsupported_version(self):
        """Test a different format_version is refused"""
        data = json.loads(dump_pattern(CityPattern(timezone=NYC, geofence=FENCE)))
        data["format_version"] = 2
        with pytest.raises(PatternFormatError) as exc:
            load_pattern(io.StringIO(json.dumps(data)))
        assert exc.value.path == "format_version"

    def test_schema_violation_names_field(self):
        """Test a schema violation reports the offending field path"""
        data = json.loads(dump_pattern(full_pattern()))
        data["slots"][3]["params"]["eps"] = -1
        with pytest.raises(PatternFormatError) as exc:
            load_pattern(io.StringIO(json.dumps(data)))
        assert exc.value.path == "slots.3.params.eps"

    def test_duplicate_keys_refused(self):
        """Test two patterns for one slot are refused"""
        data = json.loads(dump_pattern(full_pattern()))
        data["slots"][1]["key"] = data["slots"][0]["key"]
        with pytest.raises(PatternFormatError):
            load_pattern(io.StringIO(json.dumps(data)))

    def test_documented_example_loads(self):
        """Test the pattern example in the README is a valid pattern file"""
        readme = (Path(__file__).resolve().parents[1] / "README.md").read_text(encoding="utf-8")
        section = readme.split("## Archivo de patrón", 1)[1]
        example = section.split("```json", 1)[1].split("```", 1)[0]
        pattern = load_pattern(io.StringIO(example))
        slot = pattern.slot(TimeSlotKey(weekday=5, slot=35))
        reference = slot.references[0]
        assert reference.stats == quartiles(reference.counts)
        assert len(reference.counts) == slot.days
