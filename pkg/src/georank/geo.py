"""Coordinates, great-circle distances and spherical averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_RADIUS_KM = 6371.0


class DegenerateCentroidError(ValueError):
    """Raised when the mean of unit vectors has (numerically) zero length."""


def normalize_lon(lon: float) -> float:
    """Map a longitude into (-180, 180]; values already in range are returned untouched."""
    if -180.0 < lon <= 180.0:
        return lon
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


@dataclass(frozen=True)
class GpsCoordinate:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    @classmethod
    def from_radians(cls, lat_rad: float, lon_rad: float) -> GpsCoordinate:
        return cls(math.degrees(lat_rad), math.degrees(lon_rad))

    def to_radians(self) -> tuple[float, float]:
        return math.radians(self.lat), math.radians(self.lon)

    def to_unit_vector(self) -> np.ndarray:
        phi, lam = self.to_radians()
        return np.array(
            [math.cos(phi) * math.cos(lam), math.cos(phi) * math.sin(lam), math.sin(phi)]
        )

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)

    def __str__(self) -> str:
        return f"({self.lat:.6f}, {self.lon:.6f})"


@dataclass(frozen=True)
class EarthModel:
    radius_km: float = DEFAULT_RADIUS_KM

    def __post_init__(self) -> None:
        if not (self.radius_km > 0 and math.isfinite(self.radius_km)):
            raise ValueError("radius_km must be positive")


EARTH = EarthModel()


def _central_angle(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    # inputs in radians; haversine form, clamped against rounding past 1
    h = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * math.asin(math.sqrt(min(1.0, h)))


def haversine_km(a: GpsCoordinate, b: GpsCoordinate, earth: EarthModel = EARTH) -> float:
    """Great-circle distance between two coordinates in kilometres.

    The haversine term is symmetric in its arguments, so the result is
    bit-identical when ``a`` and ``b`` are swapped.
    """
    lat1, lon1 = a.to_radians()
    lat2, lon2 = b.to_radians()
    # order the pair canonically so floating point evaluation is symmetric
    if (lat1, lon1) > (lat2, lon2):
        lat1, lon1, lat2, lon2 = lat2, lon2, lat1, lon1
    return earth.radius_km * _central_angle(lat1, lon1, lat2, lon2)


def haversine_matrix_rad(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Pairwise central angles (radians) for arrays of latitudes/longitudes in radians."""
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def haversine_km_array(
    lat1: np.ndarray, lon1: np.ndarray, lat2: np.ndarray, lon2: np.ndarray, earth: EarthModel = EARTH
) -> np.ndarray:
    """Element-wise great-circle distance (km) for arrays given in degrees."""
    p1, l1, p2, l2 = (np.radians(np.asarray(x, dtype=np.float64)) for x in (lat1, lon1, lat2, lon2))
    h = np.sin((p2 - p1) / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2
    return earth.radius_km * 2.0 * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def unit_vectors(points: Sequence[GpsCoordinate]) -> np.ndarray:
    lat = np.radians([p.lat for p in points])
    lon = np.radians([p.lon for p in points])
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def from_unit_vector(v: np.ndarray) -> GpsCoordinate:
    x, y, z = (float(c) for c in v)
    lat = math.degrees(math.atan2(z, math.hypot(x, y)))
    lon = math.degrees(math.atan2(y, x))
    return GpsCoordinate(max(-90.0, min(90.0, lat)), lon)


def spherical_centroid(points: Iterable[GpsCoordinate]) -> GpsCoordinate:
    """Mean position on the sphere: average of unit vectors, projected back to the surface.

    Unlike averaging latitude and longitude directly, this behaves correctly
    for point sets straddling the antimeridian or a pole.
    """
    pts = list(points)
    if not pts:
        raise ValueError("empty point set")
    if all(p == pts[0] for p in pts):
        return pts[0]
    # sorting makes the summation order (and so the result) permutation invariant
    vecs = unit_vectors(sorted(pts, key=GpsCoordinate.as_tuple))
    mean = vecs.sum(axis=0) / len(pts)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise DegenerateCentroidError("degenerate centroid")
    return from_unit_vector(mean / norm)


def destination(
    origin: GpsCoordinate, bearing_deg: float, distance_km: float, earth: EarthModel = EARTH
) -> GpsCoordinate:
    """Point reached by travelling ``distance_km`` along a great circle at the given initial bearing."""
    phi1, lam1 = origin.to_radians()
    theta = math.radians(bearing_deg)
    delta = distance_km / earth.radius_km
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    return GpsCoordinate(math.degrees(phi2), math.degrees(lam2))
