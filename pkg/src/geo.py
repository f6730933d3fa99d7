"""
Geodesic distance, grid-indexed DBSCAN and adaptive DBSCAN parameters.

Points are handled as an (n, 2) float array of (lat, lon) in decimal degrees.
Distances are great-circle meters on a sphere of radius EARTH_RADIUS_M.
"""
import logging
import math
from collections import defaultdict, deque
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.neighbors import BallTree

from .errors import ContractViolation, InsufficientData
from .models import Cluster, Clustering, DbscanParams, GeoPoint

logger = logging.getLogger(__name__)

# Earth's mean radius in meters
EARTH_RADIUS_M = 6_371_000.0

# Cells are widened by this factor so rounding never drops a neighbour sitting exactly at eps.
_CELL_SLACK = 1.0 + 1e-9

PointsLike = Union[np.ndarray, Sequence[GeoPoint]]


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def haversine_many(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized distances in meters from one point to arrays of points."""
    lat1 = np.radians(lat)
    lats2 = np.radians(lats)
    dlat = lats2 - lat1
    dlon = np.radians(lons - lon)
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lats2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def pairwise_haversine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) distance matrix in meters between two (n, 2) point arrays."""
    lat1 = np.radians(a[:, 0])[:, None]
    lat2 = np.radians(b[:, 0])[None, :]
    dlat = lat2 - lat1
    dlon = np.radians(b[:, 1][None, :] - a[:, 1][:, None])
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def as_array(points: PointsLike) -> np.ndarray:
    """Coerce GeoPoints or an array-like into an (n, 2) float64 array."""
    if isinstance(points, np.ndarray):
        arr = points.astype(np.float64, copy=False)
    elif len(points) and isinstance(points[0], GeoPoint):
        arr = np.array([(p.lat, p.lon) for p in points], dtype=np.float64)
    else:
        arr = np.asarray(points, dtype=np.float64)
    return arr.reshape(-1, 2)


def centroid(members: Sequence[int], points: PointsLike) -> GeoPoint:
    """Arithmetic mean of lat and lon; city-scale clusters need no antimeridian care."""
    if len(members) == 0:
        raise ContractViolation("centroid of an empty cluster")
    arr = as_array(points)[list(members)]
    return GeoPoint(lat=float(arr[:, 0].mean()), lon=float(arr[:, 1].mean()))


class GridIndex:
    """
    Uniform lat/lon grid whose cells are at least eps meters on each side.

    The longitude width is computed at the largest |lat| the index will see, so
    any pair within eps lies in the same or an adjacent cell.
    """

    def __init__(self, points: np.ndarray, eps: float, max_abs_lat: Optional[float] = None):
        self.points = points
        self.eps = eps
        if max_abs_lat is None:
            max_abs_lat = float(np.abs(points[:, 0]).max()) if len(points) else 0.0
        self.max_abs_lat = max_abs_lat

        angle = eps / EARTH_RADIUS_M
        self.lat_step = math.degrees(angle) * _CELL_SLACK
        cos_lat = math.cos(math.radians(max_abs_lat))
        ratio = math.sin(angle / 2) / cos_lat if cos_lat > 0 else math.inf
        if ratio >= 1.0:
            # Near the poles one column spans every longitude.
            self.lon_step = 360.0 * _CELL_SLACK
        else:
            self.lon_step = math.degrees(2 * math.asin(ratio)) * _CELL_SLACK

        self.cells: Dict[Tuple[int, int], List[int]] = defaultdict(list)
        if len(points):
            rows = np.floor(points[:, 0] / self.lat_step).astype(np.int64)
            cols = np.floor(points[:, 1] / self.lon_step).astype(np.int64)
            for i, (r, c) in enumerate(zip(rows.tolist(), cols.tolist())):
                self.cells[(r, c)].append(i)

    @classmethod
    def build(cls, points: PointsLike, eps: float, max_abs_lat: Optional[float] = None) -> "GridIndex":
        return cls(as_array(points), eps, max_abs_lat)

    def cell_of(self, lat: float, lon: float) -> Tuple[int, int]:
        return (math.floor(lat / self.lat_step), math.floor(lon / self.lon_step))

    def candidates(self, lat: float, lon: float) -> List[int]:
        r, c = self.cell_of(lat, lon)
        found: List[int] = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                bucket = self.cells.get((r + dr, c + dc))
                if bucket:
                    found.extend(bucket)
        found.sort()
        return found

    def region_query(self, i: int) -> np.ndarray:
        """Exact eps-neighbourhood of indexed point i, itself included, ascending."""
        lat, lon = self.points[i]
        cand = np.asarray(self.candidates(lat, lon), dtype=np.int64)
        d = haversine_many(lat, lon, self.points[cand, 0], self.points[cand, 1])
        return cand[d <= self.eps]


def grid_neighbors(index: GridIndex, point: GeoPoint, eps: Optional[float] = None) -> List[int]:
    """
    Candidate indices around `point`: a superset of its eps-neighbourhood.

    Exactness is restored by the caller with a final Haversine check.
    """
    if eps is not None and eps > index.eps:
        raise ContractViolation(f"grid built for eps={index.eps} cannot answer eps={eps}")
    return index.candidates(point.lat, point.lon)


def dbscan(points: PointsLike, params: DbscanParams, max_abs_lat: Optional[float] = None) -> Clustering:
    """
    DBSCAN under the Haversine metric.

    A point is core when at least min_points points (itself included) lie within
    eps. Seeds are visited in ascending index order and clusters grow
    breadth-first, so a border point joins the first cluster that reaches it.
    """
    arr = as_array(points)
    n = len(arr)
    if n == 0:
        return Clustering(n_points=0)

    index = GridIndex(arr, params.eps, max_abs_lat)
    unvisited, noise = -2, -1
    labels = np.full(n, unvisited, dtype=np.int64)
    is_core = np.zeros(n, dtype=bool)
    neighbourhoods: List[Optional[np.ndarray]] = [None] * n

    def neighbours(i: int) -> np.ndarray:
        hood = neighbourhoods[i]
        if hood is None:
            hood = index.region_query(i)
            neighbourhoods[i] = hood
            is_core[i] = len(hood) >= params.min_points
        return hood

    next_id = 0
    for i in range(n):
        if labels[i] != unvisited:
            continue
        hood = neighbours(i)
        if not is_core[i]:
            labels[i] = noise
            continue
        cluster_id = next_id
        next_id += 1
        labels[i] = cluster_id
        queue = deque(int(j) for j in hood if j != i)
        while queue:
            j = queue.popleft()
            if labels[j] == noise:
                labels[j] = cluster_id
                # noise points were already queried and found not core
                continue
            if labels[j] != unvisited:
                continue
            labels[j] = cluster_id
            hood_j = neighbours(j)
            if is_core[j]:
                queue.extend(int(m) for m in hood_j if labels[m] in (unvisited, noise))

    clusters = []
    for cid in range(next_id):
        members = np.flatnonzero(labels == cid).tolist()
        clusters.append(
            Cluster(id=cid, members=members, size=len(members), centroid=centroid(members, arr))
        )
    result = Clustering(
        n_points=n,
        clusters=clusters,
        noise=np.flatnonzero(labels == noise).tolist(),
        core=np.flatnonzero(is_core).tolist(),
    )
    logger.debug(
        "dbscan n=%d eps=%.1f min_points=%d -> %d clusters, %d noise",
        n, params.eps, params.min_points, len(clusters), len(result.noise),
    )
    return result


def k_distances(points: PointsLike, k: int) -> np.ndarray:
    """Distance in meters from every point to its k-th nearest other point, sorted ascending."""
    arr = as_array(points)
    if len(arr) <= k:
        raise InsufficientData(f"need more than k={k} points, got {len(arr)}")
    tree = BallTree(np.radians(arr), metric="haversine")
    # k + 1 because each point is its own nearest neighbour
    dist, _ = tree.query(np.radians(arr), k=k + 1)
    return np.sort(dist[:, k] * EARTH_RADIUS_M)


def knee_index(curve: np.ndarray) -> int:
    """
    Index of the knee of a monotone curve: the point farthest from the chord
    joining its ends, both axes scaled to [0, 1]. Ties resolve to the smallest index.
    """
    n = len(curve)
    if n < 3:
        return 0
    span = curve[-1] - curve[0]
    if span <= 0:
        return 0
    x = np.arange(n, dtype=np.float64) / (n - 1)
    y = (curve - curve[0]) / span
    # chord is y = x after scaling
    distance = np.abs(x - y) / math.sqrt(2.0)
    return int(np.argmax(distance))


def estimate_params(points: PointsLike, k: int) -> DbscanParams:
    """
    Adaptive DBSCAN parameters from the sorted k-distance curve.

    Args:
        points: Points to be clustered
        k: Neighbour rank; becomes min_points

    Returns:
        DbscanParams with min_points = k and eps = the k-distance at the knee
    """
    curve = k_distances(points, k)
    eps = float(curve[knee_index(curve)])
    if eps <= 0:
        # duplicated coordinates collapse the curve; fall back to the first positive distance
        positive = curve[curve > 0]
        if len(positive) == 0:
            raise InsufficientData("every k-distance is zero; points are all coincident")
        eps = float(positive[0])
    return DbscanParams(eps=eps, min_points=k)
