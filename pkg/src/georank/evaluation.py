"""Threshold accuracy, synthetic worlds and ablation / sweep runners."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from georank.geo import EARTH, GpsCoordinate, destination, haversine_km, haversine_km_array, unit_vectors
from georank.index import CandidateSet, WorldIndex, build_index, read_manifest, search_batch
from georank.io import atomic_write_text, dumps_jsonl
from georank.rerank import ClusterParams, RerankResult, refine
from georank.thinker import MOCK_CLIENTS, LmmConfig, build_prompt, count_coordinate_lines, predict

EPS_SWEEP_KM = (0, 5, 10, 20, 30, 50, 100)
N_SWEEP = (1, 5, 10, 15, 20)


@dataclass(frozen=True)
class ThresholdSet:
    levels: tuple[tuple[str, float], ...] = (
        ("street", 1.0),
        ("city", 25.0),
        ("region", 200.0),
        ("country", 750.0),
        ("continent", 2500.0),
    )

    def __post_init__(self) -> None:
        kms = [km for _, km in self.levels]
        if not kms or any(b <= a for a, b in zip(kms, kms[1:])):
            raise ValueError("threshold km values must be strictly increasing")


@dataclass
class EvalReport:
    variant: str
    accuracy: dict[str, float]
    thresholds: ThresholdSet
    errors_km: list[float]

    @property
    def n_queries(self) -> int:
        return len(self.errors_km)

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"variant": self.variant, "level": name, "km": km, "accuracy": self.accuracy[name]}
            for name, km in self.thresholds.levels
        ]


def accuracy_at_thresholds(
    predictions: Sequence[GpsCoordinate],
    truths: Sequence[GpsCoordinate],
    thresholds: ThresholdSet = ThresholdSet(),
    variant: str = "",
) -> EvalReport:
    """Percentage of queries whose error is within each threshold (inclusive)."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not predictions:
        raise ValueError("no predictions to evaluate")
    errors = [haversine_km(p, t) for p, t in zip(predictions, truths)]
    n = len(errors)
    accuracy = {name: 100.0 * sum(e <= km for e in errors) / n for name, km in thresholds.levels}
    return EvalReport(variant, accuracy, thresholds, errors)


def format_reports(reports: Sequence[EvalReport]) -> str:
    levels = reports[0].thresholds.levels if reports else ThresholdSet().levels
    width = max([len("variant")] + [len(r.variant) for r in reports])
    head = f"{'variant':<{width}}  " + "  ".join(f"{f'{name}@{km:g}km':>16}" for name, km in levels)
    lines = [head, "-" * len(head)]
    for r in reports:
        cells = "  ".join(f"{r.accuracy[name]:>16.2f}" for name, _ in levels)
        lines.append(f"{r.variant:<{width}}  {cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# synthetic worlds


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 10_000
    n_queries: int = 500
    dim: int = 64
    n_hotspots: int = 50
    noise_sigma: float = 0.35
    outlier_rate: float = 0.3
    seed: int = 0
    sites_per_hotspot: int = 10
    city_radius_km: float = 30.0
    site_jitter_km: float = 0.4
    outlier_min_km: float = 500.0
    duplicate_sigma: float = 0.05
    # length scales (km) of the multi-scale location code, and their weights
    band_scales_km: tuple[float, ...] = (1.0, 8.0, 60.0, 600.0)
    band_weights: tuple[float, ...] = (0.4, 0.25, 0.2, 0.15)

    def __post_init__(self) -> None:
        for name in ("n_records", "n_queries", "dim", "n_hotspots", "sites_per_hotspot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if len(self.band_scales_km) != len(self.band_weights) or not self.band_scales_km:
            raise ValueError("band_scales_km and band_weights must be non-empty and equally long")
        if self.dim < 2 * len(self.band_scales_km):
            raise ValueError("dim too small for the number of location-code bands")
        if self.outlier_rate > 0 and math.ceil(self.n_queries * self.outlier_rate) >= self.n_records:
            raise ValueError("too few records for the requested planted outliers")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SynthConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config key(s): {', '.join(sorted(unknown))}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)


_PHI = (1 + math.sqrt(5)) / 2
# the six axes through opposite icosahedron vertices: a spherical 5-design
ICOSAHEDRAL_AXES = np.array(
    [[0, 1, _PHI], [0, 1, -_PHI], [1, _PHI, 0], [1, -_PHI, 0], [_PHI, 0, 1], [-_PHI, 0, 1]], dtype=np.float64
) / math.sqrt(1 + _PHI**2)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


class LocationCode:
    """Fixed multi-scale Fourier map of the 3D unit position vector.

    Frequencies come in shells of six: the icosahedral axes under a random
    rotation, scaled to a band's length scale. Emitting cos/sin pairs makes
    the code inner product a weighted sum of shift-invariant kernels, and the
    5-design keeps each kernel isotropic through fourth order, so similarity
    decays with great-circle distance regardless of direction.
    """

    def __init__(self, dim: int, scales_km: Sequence[float], weights: Sequence[float], rng: np.random.Generator):
        n_bands = len(scales_km)
        n_pairs = dim // 2
        n_shells = max(n_bands, n_pairs // 6)
        total = float(sum(weights))
        freqs, bands = [], []
        for shell in range(n_shells):
            band = shell % n_bands
            # repeated shells of a band sit at slightly higher frequency for spectral spread
            stretch = 1.0 + 0.6 * (shell // n_bands)
            omega = stretch * EARTH.radius_km / scales_km[band]
            freqs.append(omega * ICOSAHEDRAL_AXES @ _random_rotation(rng).T)
            bands.extend([band] * 6)
        self.dim = dim
        self.freqs = np.concatenate(freqs)[:n_pairs]
        band_of = np.array(bands[:n_pairs])
        counts = np.bincount(band_of, minlength=n_bands)
        weight = np.array([weights[b] / total / counts[b] for b in band_of])
        self.amps = np.sqrt(weight)

    def __call__(self, unit: np.ndarray) -> np.ndarray:
        phase = unit @ self.freqs.T
        code = np.concatenate([self.amps * np.cos(phase), self.amps * np.sin(phase)], axis=1)
        if code.shape[1] < self.dim:
            code = np.pad(code, ((0, 0), (0, self.dim - code.shape[1])))
        return code


@dataclass
class SyntheticWorld:
    records: list[dict[str, Any]]
    queries: list[dict[str, Any]]
    metadata: dict[str, Any] = field(default_factory=dict)

    def build_index(self) -> WorldIndex:
        return build_index(self.records, self.metadata["config"]["dim"])

    @property
    def query_embeddings(self) -> np.ndarray:
        return np.array([q["embedding"] for q in self.queries], dtype=np.float64)

    @property
    def truths(self) -> list[GpsCoordinate]:
        return [GpsCoordinate(q["lat"], q["lon"]) for q in self.queries]


def _f32(values: np.ndarray) -> list[float]:
    # 9 significant digits round-trip float32 exactly and keep manifests compact
    return [float(f"{v:.9g}") for v in values.astype(np.float32).tolist()]


def _jitter(rng: np.random.Generator, center: GpsCoordinate, sigma_km: float) -> GpsCoordinate:
    dx, dy = rng.normal(0.0, sigma_km, size=2)
    return destination(center, math.degrees(math.atan2(dx, dy)), math.hypot(dx, dy))


def _embed(code: LocationCode, points: Sequence[GpsCoordinate], sigma: float, rng: np.random.Generator) -> np.ndarray:
    raw = code(unit_vectors(points))
    if sigma > 0:
        raw = raw + rng.normal(0.0, sigma / math.sqrt(code.dim), size=raw.shape)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate_synthetic_world(config: SynthConfig) -> SyntheticWorld:
    """Deterministically generate an index manifest and a query set with ground truth.

    Records cluster around city-like hotspots; each hotspot holds a number of
    sites, and each record sits near one site. Embeddings are a noisy
    location code, so visual similarity tracks geographic proximity. A
    fraction of queries additionally get a planted near-duplicate record at
    least ``outlier_min_km`` away, which similarity-only retrieval ranks first.
    """
    rng = np.random.default_rng(config.seed)
    code = LocationCode(config.dim, config.band_scales_km, config.band_weights, rng)

    raw = rng.normal(size=(config.n_hotspots, 3))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    hotspots = [
        GpsCoordinate(math.degrees(math.asin(z)), math.degrees(math.atan2(y, x))) for x, y, z in raw
    ]
    sites = [
        [_jitter(rng, h, config.city_radius_km) for _ in range(config.sites_per_hotspot)] for h in hotspots
    ]

    planted_flags = rng.random(config.n_queries) < config.outlier_rate
    n_planted = int(planted_flags.sum())
    n_base = config.n_records - n_planted

    rec_hot = rng.integers(0, config.n_hotspots, size=n_base)
    rec_site = rng.integers(0, config.sites_per_hotspot, size=n_base)
    rec_locs = [_jitter(rng, sites[h][s], config.site_jitter_km) for h, s in zip(rec_hot, rec_site)]
    rec_emb = _embed(code, rec_locs, config.noise_sigma, rng)

    q_hot = rng.integers(0, config.n_hotspots, size=config.n_queries)
    q_site = rng.integers(0, config.sites_per_hotspot, size=config.n_queries)
    q_locs = [_jitter(rng, sites[h][s], config.site_jitter_km) for h, s in zip(q_hot, q_site)]
    q_emb = _embed(code, q_locs, config.noise_sigma, rng)

    records = [
        {"id": f"r{i:07d}", "lat": loc.lat, "lon": loc.lon, "embedding": _f32(e), "hotspot": int(h)}
        for i, (loc, e, h) in enumerate(zip(rec_locs, rec_emb, rec_hot))
    ]
    queries = []
    for i, (loc, e, h) in enumerate(zip(q_locs, q_emb, q_hot)):
        queries.append(
            {"id": f"q{i:06d}", "lat": loc.lat, "lon": loc.lon, "embedding": _f32(e), "hotspot": int(h),
             "planted_outlier_id": None}
        )

    for qi in np.flatnonzero(planted_flags):
        truth = q_locs[qi]
        while True:
            h = int(rng.integers(0, config.n_hotspots))
            far = _jitter(rng, sites[h][int(rng.integers(0, config.sites_per_hotspot))], config.site_jitter_km)
            if haversine_km(far, truth) >= config.outlier_min_km:
                break
            if all(haversine_km(s, truth) < config.outlier_min_km for hs in sites for s in hs):
                far = destination(truth, float(rng.uniform(0, 360)), config.outlier_min_km * 2)
                break
        dup = q_emb[qi] + rng.normal(0.0, config.duplicate_sigma / math.sqrt(config.dim), size=config.dim)
        dup /= np.linalg.norm(dup)
        rid = f"p{len(records):07d}"
        records.append({"id": rid, "lat": far.lat, "lon": far.lon, "embedding": _f32(dup), "hotspot": h})
        queries[qi]["planted_outlier_id"] = rid

    metadata = {"config": asdict(config), "n_planted_outliers": n_planted, "n_records": len(records)}
    return SyntheticWorld(records, queries, metadata)


def world_files(world: SyntheticWorld) -> dict[str, str]:
    records = dumps_jsonl(world.records)
    queries = dumps_jsonl(world.queries)
    meta = dict(world.metadata)
    meta["digests"] = {
        "records.jsonl": hashlib.sha256(records.encode()).hexdigest(),
        "queries.jsonl": hashlib.sha256(queries.encode()).hexdigest(),
    }
    return {
        "records.jsonl": records,
        "queries.jsonl": queries,
        "world.json": json.dumps(meta, indent=2, sort_keys=True) + "\n",
    }


def write_world(world: SyntheticWorld, out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    files = world_files(world)
    for name, text in files.items():
        atomic_write_text(out / name, text)
    return files


def load_world(path: str | Path) -> SyntheticWorld:
    root = Path(path)
    meta = json.loads((root / "world.json").read_text(encoding="utf-8"))
    return SyntheticWorld(
        list(read_manifest(root / "records.jsonl")), list(read_manifest(root / "queries.jsonl")), meta
    )


# --------------------------------------------------------------------------
# pipeline variants and ablations


@dataclass(frozen=True)
class Variant:
    """One pipeline configuration: similarity top-1, re-rank top-1, or re-rank plus mock LMM."""

    kind: str
    eps_km: float = 0.0
    n: int = 0
    mock: str = "echo"

    @property
    def label(self) -> str:
        if self.kind == "top1":
            return "top1"
        base = f"rerank({self.eps_km:g})"
        return base if self.kind == "rerank" else f"{base}+{self.mock}({self.n})"


_VARIANT = re.compile(
    r"^(?:(?P<top1>top1)|rerank[(:](?P<eps>[0-9.]+)\)?(?:\+(?P<mock>echo|centroid|mock)[(:](?P<n>\d+)\)?)?)$"
)


def parse_variant(text: str) -> Variant:
    """Parse ``top1``, ``rerank(5)`` / ``rerank:5`` or ``rerank(5)+echo(10)``."""
    m = _VARIANT.match(text.strip().replace(" ", ""))
    if not m:
        raise ValueError(f"unknown variant {text!r}")
    if m["top1"]:
        return Variant("top1")
    eps = float(m["eps"])
    if m["mock"] is None:
        return Variant("rerank", eps) if eps > 0 else Variant("top1")
    mock = "echo" if m["mock"] == "mock" else m["mock"]
    return Variant("rerank+mock", eps, int(m["n"]), mock)


def _similarity_order(cs: CandidateSet) -> RerankResult:
    k = len(cs.similar)
    return RerankResult(cs.similar[0].location, (0.0,) * k, tuple(range(k)), tuple(cs.similar))


def predict_variant(cs: CandidateSet, variant: Variant, k: int, min_pts: int = 2, image_ref: str = "") -> GpsCoordinate:
    if variant.kind == "top1":
        return cs.similar[0].location
    if variant.eps_km > 0:
        result = refine(cs, ClusterParams(variant.eps_km, min_pts))
    else:
        result = _similarity_order(cs)
    top1 = result.reranked[0].location
    if variant.kind == "rerank":
        return top1
    bundle = build_prompt(image_ref, result, cs.dissimilar, variant.n, k=k)
    if count_coordinate_lines(bundle.rendered_text) != 2 * variant.n:
        raise AssertionError("prompt does not carry exactly 2n coordinate lines")
    return predict(bundle, top1, LmmConfig(max_retries=0), MOCK_CLIENTS[variant.mock]()).location


def run_ablation(
    index: WorldIndex,
    queries: Sequence[dict[str, Any]],
    variants: Iterable[Variant | str],
    k: int = 20,
    min_pts: int = 2,
    thresholds: ThresholdSet = ThresholdSet(),
    threads: int = 1,
    candidates: Sequence[CandidateSet] | None = None,
) -> list[EvalReport]:
    """Evaluate each variant on the same queries; retrieval is shared across variants."""
    variants = [parse_variant(v) if isinstance(v, str) else v for v in variants]
    for v in variants:
        if v.kind == "rerank+mock" and v.n >= k:
            raise ValueError(f"n must be < k (variant {v.label}, k={k})")
    if candidates is None:
        emb = np.array([q["embedding"] for q in queries], dtype=np.float64)
        candidates = search_batch(index, emb, k, threads=threads)
    truths = [GpsCoordinate(q["lat"], q["lon"]) for q in queries]
    reports = []
    for v in variants:
        preds = [predict_variant(cs, v, k, min_pts, q.get("image", q["id"])) for cs, q in zip(candidates, queries)]
        reports.append(accuracy_at_thresholds(preds, truths, thresholds, v.label))
    return reports


def eps_sweep(index: WorldIndex, queries, eps_values=EPS_SWEEP_KM, k: int = 20, **kw) -> list[EvalReport]:
    """Re-rank radius sweep; eps = 0 is the no-re-rank baseline."""
    return run_ablation(index, queries, [Variant("rerank", float(e)) if e > 0 else Variant("top1") for e in eps_values], k=k, **kw)


def n_sweep(
    index: WorldIndex, queries, n_values=N_SWEEP, eps_km: float = 5.0, k: int | None = None, mock: str = "echo", **kw
) -> list[EvalReport]:
    """Prompt-size sweep; k defaults to max(n) + 1 so every n satisfies n < k on one shared candidate set."""
    k = max(n_values) + 1 if k is None else k
    return run_ablation(index, queries, [Variant("rerank+mock", eps_km, n, mock) for n in n_values], k=k, **kw)
