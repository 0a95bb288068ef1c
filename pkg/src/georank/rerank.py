"""Geographic cluster re-ranking of retrieved candidates.

Candidates are clustered with DBSCAN under the great-circle metric, the
largest cluster's spherical centroid becomes the reference position (or the
centroid of all candidates when everything is noise), and candidates are
re-ordered by their distance to that reference.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from georank.geo import EARTH, EarthModel, GpsCoordinate, haversine_km, haversine_matrix_rad, spherical_centroid
from georank.index import Candidate, CandidateSet

NOISE = -1


@dataclass(frozen=True)
class ClusterParams:
    eps_km: float = 5.0
    min_pts: int = 2
    earth: EarthModel = field(default_factory=EarthModel)

    def __post_init__(self) -> None:
        if not self.eps_km > 0:
            raise ValueError("eps_km must be positive")
        if self.min_pts < 2:
            raise ValueError("min_pts must be at least 2")

    @property
    def eps_rad(self) -> float:
        return self.eps_km / self.earth.radius_km


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]

    @property
    def cluster_sizes(self) -> dict[int, int]:
        return dict(sorted(Counter(label for label in self.labels if label != NOISE).items()))

    @property
    def has_clusters(self) -> bool:
        return any(label != NOISE for label in self.labels)


@dataclass(frozen=True)
class RerankResult:
    reference: GpsCoordinate
    distances_km: tuple[float, ...]
    permutation: tuple[int, ...]
    reranked: tuple[Candidate, ...]
    used_fallback: bool = False
    labels: tuple[int, ...] = ()

    @property
    def reranked_distances_km(self) -> tuple[float, ...]:
        return tuple(self.distances_km[i] for i in self.permutation)

    @property
    def top1(self) -> Candidate:
        return self.reranked[0]


def neighborhoods(points: Sequence[GpsCoordinate], params: ClusterParams) -> list[np.ndarray]:
    """For each point, the (sorted) indices within eps of it, itself included."""
    lat = np.radians([p.lat for p in points])
    lon = np.radians([p.lon for p in points])
    within = haversine_matrix_rad(lat, lon) <= params.eps_rad
    np.fill_diagonal(within, True)
    return [np.flatnonzero(row) for row in within]


def dbscan_haversine(points: Sequence[GpsCoordinate], params: ClusterParams = ClusterParams()) -> ClusterAssignment:
    """DBSCAN over coordinates with the haversine metric.

    Points are visited in index order; each unvisited core point seeds a new
    cluster that is expanded breadth-first. A border point joins the first
    cluster that reaches it.
    """
    n = len(points)
    if n == 0:
        raise ValueError("dbscan requires at least one point")
    hoods = neighborhoods(points, params)
    core = [len(h) >= params.min_pts for h in hoods]
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for nb in hoods[j]:
                if labels[nb] is None:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
                elif labels[nb] == NOISE:
                    # only non-core points are ever marked noise, so this is a border point
                    labels[nb] = cluster
    return ClusterAssignment(tuple(labels))


def select_reference(
    points: Sequence[GpsCoordinate], assignment: ClusterAssignment
) -> tuple[GpsCoordinate, bool]:
    """Centroid of the largest cluster (lowest id on ties), else of every point.

    Returns ``(reference, used_fallback)``.
    """
    if len(points) != len(assignment.labels):
        raise ValueError("points and labels differ in length")
    sizes = assignment.cluster_sizes
    if not sizes:
        return spherical_centroid(points), True
    main = min(sizes, key=lambda c: (-sizes[c], c))
    members = [p for p, label in zip(points, assignment.labels) if label == main]
    return spherical_centroid(members), False


def rerank(
    candidates: Sequence[Candidate], reference: GpsCoordinate, earth: EarthModel = EARTH
) -> RerankResult:
    """Stable ascending sort of candidates by great-circle distance to ``reference``."""
    if not candidates:
        raise ValueError("no candidates to re-rank")
    distances = [haversine_km(c.location, reference, earth) for c in candidates]
    perm = sorted(range(len(candidates)), key=distances.__getitem__)
    return RerankResult(
        reference=reference,
        distances_km=tuple(distances),
        permutation=tuple(perm),
        reranked=tuple(candidates[i] for i in perm),
    )


def refine(candidates: CandidateSet, params: ClusterParams = ClusterParams()) -> RerankResult:
    """Cluster the similar set, pick a reference position and re-rank by distance to it."""
    similar = list(candidates.similar)
    if not similar:
        raise ValueError("no candidates to re-rank")
    points = [c.location for c in similar]
    assignment = dbscan_haversine(points, params)
    reference, used_fallback = select_reference(points, assignment)
    result = rerank(similar, reference, params.earth)
    return RerankResult(
        reference=result.reference,
        distances_km=result.distances_km,
        permutation=result.permutation,
        reranked=result.reranked,
        used_fallback=used_fallback,
        labels=assignment.labels,
    )
