"""
geopulse command line: synth, train, detect, threads, rank, bench, report.

Exit codes: 0 success, 1 runtime or I/O error, 2 invalid input or configuration.
"""
import argparse
import json
import logging
import os
import statistics
import sys
import time
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from . import __version__
from .config import LOG_LEVEL_ENV_VAR, UNBOUNDED, RunConfig, load_run_config, write_config_echo
from .detect import detect_day
from .errors import ConfigError, GeoPulseError, InsufficientData, PatternFormatError
from .ingest import bucket_by_slot, geofence_filter, read_posts, write_posts
from .models import Geofence, Post
from .pattern import load_pattern, save_pattern, train_city
from .rank import area_comparison, cluster_threads, rank_threads, score_day
from .reports import (
    area_markdown,
    area_payload,
    detect_summary,
    top_k_markdown,
    top_k_payload,
    write_relevance_csv,
    write_slot_report,
    write_threads_csv,
    write_threads_json,
)
from .synth import generate_days, load_city_config
from .threads import ThreadStore, create_thread_store, discover_threads, threshold_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_THRESHOLDS = "0.60,0.65,0.70,0.75"


# ==================== ARGUMENTS ====================

def _latlon(text: str) -> Dict[str, float]:
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lat,lon, got {text!r}")
    return {"lat": lat, "lon": lon}


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}")


def _verbosity(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    group.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration; flags override it.")
    common.add_argument("--timezone", help="IANA timezone of the city (default America/New_York).")
    common.add_argument("--center", type=_latlon, help="Geofence centre as lat,lon.")
    common.add_argument("--radius-m", type=float, help="Geofence radius in meters.")
    common.add_argument("--seed", type=int, help="Random seed (falls back to GEOPULSE_SEED).")
    common.add_argument("--jobs", type=int, help="Worker processes for per-slot work.")
    _verbosity(common)
    return common


def _input(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-i", "--input", "--posts",
        dest="input",
        type=Path,
        action="append",
        required=True,
        help="Newline-delimited post file. Repeat for several files.",
    )


def _dbscan_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps-m", type=float, help="Fixed DBSCAN radius in meters.")
    parser.add_argument("--min-points", type=int, help="Fixed DBSCAN minimum neighbourhood.")
    parser.add_argument("--k", type=int, help="Neighbour rank for the k-distance estimate.")
    parser.add_argument("--match-eps-m", type=float, help="Cluster-to-reference matching cutoff.")


def _thread_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold", type=float, help="Cosine similarity threshold (default 0.65).")
    parser.add_argument("--bands", type=int, help="LSH bands.")
    parser.add_argument("--rows", type=int, help="Hyperplanes per LSH band.")
    parser.add_argument("--bucket-cap", type=int, help="Posts per LSH bucket; 0 for unbounded.")
    parser.add_argument("--window-h", type=float, help="Hours a post stays in the LSH index; 0 for unbounded.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geopulse",
        description="Geo-temporal anomaly detection and story threads over geo-tagged posts.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("synth", help="Generate a synthetic city.")
    p.add_argument("--config", type=Path, required=True, help="City configuration (.json or .toml).")
    p.add_argument("--date", type=_date, required=True, help="First date to generate.")
    p.add_argument("--days", type=int, default=1, help="Number of dates.")
    p.add_argument("--step-days", type=int, default=7, help="Days between generated dates.")
    p.add_argument("--seed", type=int, help="Overrides the config seed.")
    p.add_argument("--out", type=Path, required=True, help="Output post file.")
    _verbosity(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="Train the city pattern.")
    _input(p)
    _dbscan_flags(p)
    p.add_argument("--out", type=Path, required=True, help="Pattern file to write.")
    p.add_argument("--allow-partial", action="store_true", help="Write the pattern even if some slots fail.")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="Detect crowd anomalies.")
    _input(p)
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("threads", parents=[common], help="Discover story threads.")
    _input(p)
    _thread_flags(p)
    p.add_argument("--exhaustive", action="store_true", help="Compare against every thread, no LSH.")
    p.add_argument("--sweep", type=_floats, help="Thresholds to sweep, e.g. 0.6,0.65,0.7,0.75.")
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    p.set_defaults(handler=cmd_threads)

    p = sub.add_parser("rank", parents=[common], help="Rank threads by geographic relevance.")
    _input(p)
    _thread_flags(p)
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--top-k", type=int, help="Threads per ranking (default 10).")
    p.add_argument("--site-link-m", type=float, help="Distance linking clusters across slots.")
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser("bench", parents=[common], help="Measure thread discovery throughput.")
    _input(p)
    _thread_flags(p)
    p.add_argument("--repeat", type=int, default=3, help="Timed runs.")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("report", parents=[common], help="Compare threads inside and outside a sub-area.")
    _input(p)
    _thread_flags(p)
    p.add_argument("--area", type=_latlon, required=True, help="Sub-area centre as lat,lon.")
    p.add_argument("--area-radius-m", type=float, required=True)
    p.add_argument("--thresholds", type=_floats, default=_floats(DEFAULT_THRESHOLDS))
    p.add_argument("--top-k", type=int, help="Threads per side and threshold (default 3).")
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    p.set_defaults(handler=cmd_report)
    return parser


def _level_names() -> dict:
    if hasattr(logging, "getLevelNamesMapping"):
        return logging.getLevelNamesMapping()
    return dict(logging._nameToLevel)  # Python < 3.11


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    default = os.environ.get(LOG_LEVEL_ENV_VAR, "INFO").upper()
    level = logging.DEBUG if verbose else logging.WARNING if quiet else _level_names().get(default, logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _bound(value: Optional[float]) -> Any:
    if value is None:
        return None
    return UNBOUNDED if value == 0 else value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < flags."""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    overrides = {
        "timezone": get("timezone"),
        "geofence.center": get("center"),
        "geofence.radius_m": get("radius_m"),
        "seed": get("seed"),
        "jobs": get("jobs"),
        "eps_m": get("eps_m"),
        "min_points": get("min_points"),
        "k": get("k"),
        "match_eps_m": get("match_eps_m"),
        "threshold": get("threshold"),
        "lsh.bands": get("bands"),
        "lsh.rows": get("rows"),
        "lsh.bucket_cap": _bound(get("bucket_cap")),
        "lsh.window_h": _bound(get("window_h")),
        "top_k": get("top_k"),
        "site_link_m": get("site_link_m"),
    }
    return load_run_config(get("config"), overrides)


# ==================== HELPERS ====================

def load_posts(paths: Sequence[Path], config: RunConfig) -> List[Post]:
    """Parse every input, drop posts outside the geofence, order by time."""
    posts: List[Post] = []
    rejected = 0
    for path in paths:
        result = read_posts(path, config.timezone)
        posts.extend(result.posts)
        rejected += len(result.rejects)
    inside = geofence_filter(posts, config.geofence)
    logger.info(
        "Loaded %d posts (%d rejected lines, %d outside the geofence)",
        len(posts), rejected, len(posts) - len(inside),
    )
    return sorted(inside, key=lambda p: p.t)


def make_store(config: RunConfig, threshold: Optional[float] = None, exhaustive: bool = False) -> ThreadStore:
    lsh = config.lsh
    return create_thread_store(
        threshold=config.threshold if threshold is None else threshold,
        bands=lsh.bands,
        rows=lsh.rows,
        bucket_cap=lsh.bucket_cap,
        window_h=lsh.window_h,
        seed=config.effective_seed(),
        dimension_bits=lsh.dimension_bits,
        exhaustive=exhaustive,
    )


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ==================== COMMANDS ====================

def cmd_synth(args: argparse.Namespace) -> int:
    city = load_city_config(args.config)
    days = generate_days(city, args.date, args.days, args.step_days, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        count = sum(write_posts(day.posts, f) for day in days)
    labels = {post_id: event for day in days for post_id, event in day.labels.items()}
    labels_path = args.out.with_suffix(".labels.json")
    _write_json(labels_path, labels)
    print(f"{count} posts over {len(days)} days -> {args.out} ({len(labels)} labeled)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    posts = load_posts(args.input, config)
    if not posts:
        raise InsufficientData("no posts to train on")
    result = train_city(
        posts,
        config.timezone,
        config.geofence,
        k=config.k,
        params=config.dbscan_override(),
        match_eps=config.match_eps_m,
        jobs=config.jobs,
    )
    for diag in result.diagnostics:
        print(f"untrained {diag.key.label}: {diag.reason}", file=sys.stderr)
    if not result.pattern.slots:
        raise InsufficientData("no slot could be trained")
    if result.diagnostics and not args.allow_partial:
        raise InsufficientData(f"{len(result.diagnostics)} slots could not be trained (use --allow-partial)")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_pattern(result.pattern, args.out)
    write_config_echo(config, args.out.parent)
    for slot in result.pattern.slots:
        supports = ",".join(str(r.support) for r in slot.references)
        print(f"{slot.key.label}: {len(slot.references)} clusters, support [{supports}]")
    print(f"{len(result.pattern.slots)} slot patterns -> {args.out}")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    city = load_pattern(args.pattern)
    if city.timezone != config.timezone:
        logger.warning("Pattern timezone %s overrides configured %s", city.timezone, config.timezone)
    config = config.model_copy(update={"timezone": city.timezone})
    posts = load_posts(args.input, config)
    detection = detect_day(posts, city, config.jobs)

    args.out.mkdir(parents=True, exist_ok=True)
    buckets = bucket_by_slot(posts, city.timezone)
    patterns = {slot.key: slot for slot in city.slots}
    for report in detection.reports:
        slot_posts = buckets.get(report.key, {}).get(report.date, [])
        write_slot_report(report, slot_posts, patterns[report.key], args.out)
    _write_json(args.out / "summary.json", detect_summary(detection.reports, patterns, detection.uncovered))
    write_config_echo(config, args.out)

    anomalous = sum(1 for r in detection.reports if r.anomalies())
    print(
        f"{len(detection.reports)} slots evaluated, {anomalous} with anomalies, "
        f"{len(detection.uncovered)} uncovered -> {args.out}"
    )
    return EXIT_OK


def cmd_threads(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    posts = load_posts(args.input, config)
    args.out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, args.out)

    if args.sweep:
        points = threshold_sweep(posts, args.sweep, lambda th: make_store(config, th, args.exhaustive))
        _write_json(args.out / "sweep.json", [p._asdict() for p in points])
        for point in points:
            print(f"threshold {point.threshold:.2f}: {point.n_threads} threads, largest {point.max_size}")
        return EXIT_OK

    store = discover_threads(posts, make_store(config, exhaustive=args.exhaustive))
    summaries = store.summaries()
    write_threads_csv(summaries, args.out / "threads.csv")
    write_threads_json(summaries, args.out / "threads.json")
    print(f"{store.processed} posts -> {len(summaries)} threads -> {args.out}")
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    city = load_pattern(args.pattern)
    config = config.model_copy(update={"timezone": city.timezone})
    posts = load_posts(args.input, config)
    detection = detect_day(posts, city, config.jobs)
    store = discover_threads(posts, make_store(config))
    summaries = {s.id: s for s in store.summaries(with_members=False)}
    assignments = store.assignments

    args.out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, args.out)
    buckets = bucket_by_slot(posts, city.timezone)
    reports_by_date: Dict[date, list] = {}
    for report in detection.reports:
        reports_by_date.setdefault(report.date, []).append(report)

    all_scores = []
    for day, reports in sorted(reports_by_date.items()):
        day_posts = [p for key in buckets for d, ps in buckets[key].items() if d == day for p in ps]
        scores = score_day(day_posts, reports, assignments, city.timezone, config.weights, config.site_link_m)
        all_scores.extend(scores.scores)
        present = {s.thread_id for s in scores.scores}
        day_threads = {tid: summaries[tid] for tid in present}
        ranked = rank_threads(scores.thread_totals(), day_threads, config.top_k)
        per_slot = {}
        digests = {}
        for report in reports:
            slot_scores = scores.thread_totals(report.key.slot)
            slot_threads = {tid: summaries[tid] for tid in slot_scores}
            per_slot[report.key.slot] = rank_threads(slot_scores, slot_threads, config.top_k)
            slot_posts = buckets.get(report.key, {}).get(report.date, [])
            digests[report.key.slot] = cluster_threads(report, slot_posts, assignments)
        payload = top_k_payload(scores, ranked, per_slot, digests)
        _write_json(args.out / f"top-{day.isoformat()}.json", payload)
        (args.out / f"top-{day.isoformat()}.md").write_text(top_k_markdown(payload), encoding="utf-8")
        if ranked:
            lead = ranked[0]
            print(f"{day}: #1 thread {lead.thread_id} ({lead.relevance:.1f}) {lead.representative_text}")
        else:
            print(f"{day}: no threads ranked")

    write_relevance_csv(all_scores, args.out / "relevance.csv")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    posts = load_posts(args.input, config)
    if not posts:
        raise InsufficientData("benchmark corpus is empty")
    rates = []
    for run in range(max(1, args.repeat)):
        started = time.perf_counter()
        store = discover_threads(posts, make_store(config))
        elapsed = time.perf_counter() - started
        rates.append(len(posts) / elapsed if elapsed > 0 else float("inf"))
        logger.info("Run %d: %d posts in %.2fs (%.0f posts/s), %d threads", run + 1, len(posts), elapsed, rates[-1], len(store.threads))
    median = statistics.median(rates)
    spread = (max(rates) - min(rates)) / median if median else 0.0
    print(f"{len(posts)} posts: median {median:.0f} posts/s over {len(rates)} runs (spread {spread:.1%})")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    posts = load_posts(args.input, config)
    try:
        area = Geofence.model_validate({"center": args.area, "radius_m": args.area_radius_m})
    except ValidationError as e:
        raise ConfigError(f"invalid sub-area: {e.errors()[0]['msg']}") from e
    k = args.top_k if args.top_k is not None else 3
    rows = area_comparison(posts, area, args.thresholds, lambda th: make_store(config, th), k)
    args.out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, args.out)
    _write_json(args.out / "area.json", area_payload(rows))
    (args.out / "area.md").write_text(area_markdown(rows), encoding="utf-8")
    print(area_markdown(rows), end="")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (ConfigError, InsufficientData, PatternFormatError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except (GeoPulseError, OSError) as e:
        logger.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
