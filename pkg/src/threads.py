"""
Streaming story-thread discovery.

Post text is tokenized (hashtags and mentions kept whole), hashed into a
2^18-dimensional TF-IDF vector, bucketed with random-hyperplane LSH, and
joined to the most similar thread centroid among its bucket-mates when the
cosine similarity reaches the threshold.
"""
import hashlib
import logging
import math
import re
import unicodedata
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from functools import lru_cache
from typing import Callable, Deque, Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .models import Post, ThreadSummary

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION_BITS = 18
DEFAULT_THRESHOLD = 0.65
# Rounding slack so exact duplicates still join at threshold 1.0.
SIMILARITY_TOLERANCE = 1e-9

_TOKEN_RE = re.compile(r"[#@]?\w+")


# ==================== TEXT ====================

def normalize(text: str) -> List[str]:
    """
    Lowercased NFKC tokens. A leading '#' or '@' stays glued to its token;
    punctuation and bare numbers are dropped. No stemming.
    """
    folded = unicodedata.normalize("NFKC", text).lower()
    tokens = []
    for token in _TOKEN_RE.findall(folded):
        tagged = token[0] in "#@"
        body = token[1:] if tagged else token
        if not body.strip("_"):
            continue
        if not tagged and body.isdigit():
            continue
        tokens.append(token)
    return tokens


@lru_cache(maxsize=1 << 17)
def token_index(token: str, dimension_bits: int = DEFAULT_DIMENSION_BITS) -> int:
    """Stable 64-bit blake2b hash of the token, reduced mod 2^dimension_bits."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << dimension_bits) - 1)


@dataclass(frozen=True)
class SparseVector:
    """Index -> weight map; L2 norm 1 unless empty."""
    entries: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def normalized(cls, weights: Dict[int, float]) -> "SparseVector":
        norm = math.sqrt(sum(w * w for w in weights.values()))
        if norm == 0:
            return cls({})
        return cls({i: w / norm for i, w in weights.items()})

    @property
    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.entries.values()))

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def dot(self, other: Dict[int, float]) -> float:
        small, large = (self.entries, other) if len(self.entries) <= len(other) else (other, self.entries)
        return sum(w * large.get(i, 0.0) for i, w in small.items())


def cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine of two normalized vectors, clamped to [0, 1]; 0 when either is empty."""
    if not a or not b:
        return 0.0
    return min(1.0, max(0.0, a.dot(b.entries)))


class Vectorizer:
    """
    Hashed TF-IDF with a running document-frequency table.

    idf = ln((1 + N) / (1 + df)) + 1. Once frozen the table stops changing,
    so equal texts always map to equal vectors.
    """

    def __init__(self, dimension_bits: int = DEFAULT_DIMENSION_BITS):
        self.dimension_bits = dimension_bits
        self.df: Counter = Counter()
        self.n_docs = 0
        self.frozen = False

    def indices(self, tokens: Iterable[str]) -> Counter:
        return Counter(token_index(t, self.dimension_bits) for t in tokens)

    def observe(self, tokens: Sequence[str]) -> None:
        if self.frozen:
            return
        self.df.update(set(self.indices(tokens)))
        self.n_docs += 1

    def fit(self, corpus: Iterable[Sequence[str]]) -> "Vectorizer":
        for tokens in corpus:
            self.observe(tokens)
        self.frozen = True
        return self

    def idf(self, index: int) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(index, 0))) + 1.0

    def transform(self, tokens: Sequence[str]) -> SparseVector:
        tf = self.indices(tokens)
        return SparseVector.normalized({i: n * self.idf(i) for i, n in tf.items()})

    def vectorize(self, tokens: Sequence[str]) -> SparseVector:
        """Count the document (unless frozen), then weight it."""
        self.observe(tokens)
        return self.transform(tokens)


# ==================== LSH ====================

class HyperplaneBank:
    """
    Random Gaussian hyperplanes over the hashed feature space.

    Column i (the i-th coordinate of every hyperplane) is drawn on first use
    from a generator seeded with (seed, i), so the bank never materializes
    the full dimension and is identical across runs with the same seed.
    """

    def __init__(self, n_planes: int, seed: int = 0):
        self.n_planes = n_planes
        self.seed = seed
        self._columns: Dict[int, np.ndarray] = {}

    def column(self, index: int) -> np.ndarray:
        col = self._columns.get(index)
        if col is None:
            col = np.random.default_rng([self.seed, index]).standard_normal(self.n_planes)
            self._columns[index] = col
        return col

    def project(self, vector: SparseVector) -> np.ndarray:
        out = np.zeros(self.n_planes)
        for i, w in vector.entries.items():
            out += w * self.column(i)
        return out


class LshIndex:
    """
    B bands of R sign bits. Each band maps a signature to a bounded FIFO of
    (post id, instant). Entries leave a bucket when it exceeds bucket_cap or
    when they are older than `window` relative to the newest instant seen.
    """

    def __init__(
        self,
        bands: int = 8,
        rows: int = 12,
        seed: int = 0,
        bucket_cap: Optional[int] = 64,
        window: Optional[timedelta] = timedelta(hours=24),
        on_evict: Optional[Callable[[str], None]] = None,
    ):
        self.bands = bands
        self.rows = rows
        self.bucket_cap = bucket_cap
        self.window = window
        self.on_evict = on_evict
        self.planes = HyperplaneBank(bands * rows, seed)
        self.buckets: List[Dict[int, Deque[Tuple[str, datetime]]]] = [{} for _ in range(bands)]
        self.refcount: Dict[str, int] = {}
        self.clock: Optional[datetime] = None
        self._bit_weights = 1 << np.arange(rows, dtype=np.int64)

    def signatures(self, vector: SparseVector) -> List[int]:
        bits = (self.planes.project(vector) > 0).reshape(self.bands, self.rows)
        return [int(s) for s in bits.astype(np.int64) @ self._bit_weights]

    def signature(self, vector: SparseVector, band: int) -> int:
        return self.signatures(vector)[band]

    def _release(self, post_id: str) -> None:
        left = self.refcount[post_id] - 1
        if left:
            self.refcount[post_id] = left
            return
        del self.refcount[post_id]
        if self.on_evict is not None:
            self.on_evict(post_id)

    def _expire(self, bucket: Deque[Tuple[str, datetime]]) -> None:
        if self.window is None or self.clock is None:
            return
        horizon = self.clock - self.window
        while bucket and bucket[0][1] < horizon:
            post_id, _ = bucket.popleft()
            self._release(post_id)

    def candidates(self, vector: SparseVector, signatures: Optional[List[int]] = None) -> Set[str]:
        """Union of the post ids sharing the vector's bucket in any band."""
        if not vector:
            return set()
        found: Set[str] = set()
        for band, sig in enumerate(signatures or self.signatures(vector)):
            bucket = self.buckets[band].get(sig)
            if bucket:
                self._expire(bucket)
                found.update(post_id for post_id, _ in bucket)
        return found

    def insert(self, post_id: str, vector: SparseVector, t: datetime, signatures: Optional[List[int]] = None) -> None:
        if not vector:
            return
        if self.clock is None or t > self.clock:
            self.clock = t
        for band, sig in enumerate(signatures or self.signatures(vector)):
            bucket = self.buckets[band].setdefault(sig, deque())
            self._expire(bucket)
            if self.bucket_cap is not None and len(bucket) >= self.bucket_cap:
                evicted, _ = bucket.popleft()
                self._release(evicted)
            bucket.append((post_id, t))
            self.refcount[post_id] = self.refcount.get(post_id, 0) + 1

    def __len__(self) -> int:
        return sum(len(b) for table in self.buckets for b in table.values())


# ==================== THREADS ====================

@dataclass
class Thread:
    """A story: members in arrival order and the running sum of their vectors."""
    id: int
    members: List[str]
    first_t: datetime
    last_t: datetime
    representative_text: str
    total: Dict[int, float] = field(default_factory=dict)
    total_sq: float = 0.0

    @property
    def size(self) -> int:
        return len(self.members)

    def similarity(self, vector: SparseVector) -> float:
        if self.total_sq <= 0 or not vector:
            return 0.0
        return min(1.0, max(0.0, vector.dot(self.total) / math.sqrt(self.total_sq)))

    def centroid(self) -> SparseVector:
        return SparseVector.normalized(self.total)

    def add(self, post: Post, vector: SparseVector) -> None:
        if vector:
            self.total_sq += 2.0 * vector.dot(self.total) + vector.norm ** 2
            for i, w in vector.entries.items():
                self.total[i] = self.total.get(i, 0.0) + w
        self.members.append(post.id)
        if post.t < self.first_t:
            self.first_t = post.t
            self.representative_text = post.text
        if post.t > self.last_t:
            self.last_t = post.t

    def summary(self, with_members: bool = True) -> ThreadSummary:
        return ThreadSummary(
            id=self.id,
            size=self.size,
            first_t=self.first_t,
            last_t=self.last_t,
            representative_text=self.representative_text,
            member_ids=list(self.members) if with_members else [],
        )


class ThreadStore:
    """
    Single-writer thread store. Posts must be added in arrival order; threads
    outlive the LSH entries of their members.
    """

    def __init__(
        self,
        threshold: float = DEFAULT_THRESHOLD,
        vectorizer: Optional[Vectorizer] = None,
        lsh: Optional[LshIndex] = None,
        exhaustive: bool = False,
    ):
        if not 0 < threshold <= 1:
            raise ValueError(f"threshold must be in (0, 1], got {threshold}")
        self.threshold = threshold
        self.vectorizer = vectorizer or Vectorizer()
        self.exhaustive = exhaustive
        self.lsh = lsh or LshIndex()
        self.lsh.on_evict = self._forget
        self.threads: Dict[int, Thread] = {}
        self.post_thread: Dict[str, int] = {}
        self.assignments: Dict[str, int] = {}
        self.skipped = 0

    def _forget(self, post_id: str) -> None:
        self.post_thread.pop(post_id, None)

    def _candidate_threads(self, vector: SparseVector, signatures: List[int]) -> Set[int]:
        if self.exhaustive:
            return {tid for tid, thread in self.threads.items() if thread.total_sq > 0}
        return {
            self.post_thread[pid]
            for pid in self.lsh.candidates(vector, signatures)
            if pid in self.post_thread
        }

    def assign(self, post: Post, vector: Optional[SparseVector] = None) -> int:
        """
        Put the post into the best candidate thread at or above the threshold,
        or into a new thread. Posts whose text yields no tokens always start
        a singleton thread.
        """
        if vector is None:
            vector = self.vectorizer.vectorize(normalize(post.text))

        best_id: Optional[int] = None
        best_sim = -1.0
        signatures: List[int] = []
        if vector:
            signatures = self.lsh.signatures(vector)
            for tid in sorted(self._candidate_threads(vector, signatures)):
                sim = self.threads[tid].similarity(vector)
                if sim > best_sim:
                    best_id, best_sim = tid, sim

        if best_id is not None and best_sim >= self.threshold - SIMILARITY_TOLERANCE:
            thread = self.threads[best_id]
            thread.add(post, vector)
        else:
            thread = Thread(
                id=len(self.threads),
                members=[],
                first_t=post.t,
                last_t=post.t,
                representative_text=post.text,
            )
            thread.add(post, vector)
            self.threads[thread.id] = thread

        self.assignments[post.id] = thread.id
        if vector:
            self.post_thread[post.id] = thread.id
            self.lsh.insert(post.id, vector, post.t, signatures)
        return thread.id

    def add(self, post: Post) -> Optional[int]:
        """Assign a post; posts without text are skipped and return None."""
        if not post.text.strip():
            self.skipped += 1
            return None
        return self.assign(post)

    def summaries(self, with_members: bool = True) -> List[ThreadSummary]:
        return [self.threads[tid].summary(with_members) for tid in sorted(self.threads)]

    @property
    def processed(self) -> int:
        return len(self.assignments)


class SweepPoint(NamedTuple):
    threshold: float
    n_threads: int
    max_size: int


def create_thread_store(
    threshold: float = DEFAULT_THRESHOLD,
    bands: int = 8,
    rows: int = 12,
    bucket_cap: Optional[int] = 64,
    window_h: Optional[float] = 24.0,
    seed: int = 0,
    dimension_bits: int = DEFAULT_DIMENSION_BITS,
    exhaustive: bool = False,
) -> ThreadStore:
    """Factory for a ThreadStore with its LSH index."""
    window = timedelta(hours=window_h) if window_h is not None else None
    lsh = LshIndex(bands=bands, rows=rows, seed=seed, bucket_cap=bucket_cap, window=window)
    return ThreadStore(threshold, Vectorizer(dimension_bits), lsh, exhaustive)


def discover_threads(
    posts: Sequence[Post],
    store: Optional[ThreadStore] = None,
    freeze_idf: bool = True,
) -> ThreadStore:
    """
    Run a batch of posts through a store in the given order.

    With freeze_idf the document frequencies are fitted on the whole batch
    first, which makes the run independent of where a text sits in it.
    """
    store = store or create_thread_store()
    texted = [p for p in posts if p.text.strip()]
    if freeze_idf and not store.vectorizer.frozen:
        store.vectorizer.fit(normalize(p.text) for p in texted)
    for post in posts:
        store.add(post)
    logger.info(
        "Threads: %d posts -> %d threads (threshold %.2f, %d skipped without text)",
        store.processed, len(store.threads), store.threshold, store.skipped,
    )
    return store


def threshold_sweep(
    posts: Sequence[Post],
    thresholds: Sequence[float],
    make_store: Callable[[float], ThreadStore],
) -> List[SweepPoint]:
    """Thread count and largest thread size for each similarity threshold."""
    points = []
    for threshold in thresholds:
        store = discover_threads(posts, make_store(threshold))
        sizes = [t.size for t in store.threads.values()]
        points.append(SweepPoint(threshold, len(sizes), max(sizes, default=0)))
    return points
