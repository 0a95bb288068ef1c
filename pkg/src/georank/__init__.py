"""Retrieval and geographic re-ranking engine for image geo-localization."""

from georank.geo import EarthModel, GpsCoordinate, haversine_km, spherical_centroid
from georank.index import CandidateSet, GeoRecord, WorldIndex, build_index, search
from georank.rerank import ClusterParams, RerankResult, dbscan_haversine, refine, rerank
from georank.thinker import Prediction, build_prompt, parse_prediction

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "ClusterParams",
    "EarthModel",
    "GeoRecord",
    "GpsCoordinate",
    "Prediction",
    "RerankResult",
    "WorldIndex",
    "build_index",
    "build_prompt",
    "dbscan_haversine",
    "haversine_km",
    "parse_prediction",
    "refine",
    "rerank",
    "search",
    "spherical_centroid",
]
