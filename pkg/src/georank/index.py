"""The World Index: geotagged embeddings with exact similarity retrieval.

On-disk layout (all integers and floats little-endian)::

    b"GWIX" | version u8 = 1 | dim u32 | count u64
    count x ( id_len u16 | id utf-8 | lat f64 | lon f64 | dim x f32 )
    32-byte SHA-256 digest of the source manifest
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

from georank.geo import GpsCoordinate
from georank.io import atomic_write_bytes

log = logging.getLogger(__name__)

MAGIC = b"GWIX"
VERSION = 1
MAX_ID_BYTES = 256
NORM_TOL = 1e-6
# Queries are scored in fixed-size blocks so results never depend on the worker count.
QUERY_BLOCK = 32


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeoRecord:
    id: str
    embedding: np.ndarray
    location: GpsCoordinate


@dataclass(frozen=True)
class Candidate:
    id: str
    location: GpsCoordinate
    score: float


@dataclass(frozen=True)
class CandidateSet:
    similar: list[Candidate]
    dissimilar: list[Candidate]

    @property
    def k(self) -> int:
        return len(self.similar)


@dataclass(eq=False)
class WorldIndex:
    """Immutable in-memory index. Record order is ingestion (file) order."""

    dim: int
    ids: list[str]
    lat: np.ndarray
    lon: np.ndarray
    embeddings: np.ndarray
    manifest_digest: bytes
    created_at: float | None = None
    _scoring: tuple[np.ndarray, np.ndarray | None] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.lat = np.ascontiguousarray(self.lat, dtype="<f8")
        self.lon = np.ascontiguousarray(self.lon, dtype="<f8")
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype="<f4")
        for arr in (self.lat, self.lon, self.embeddings):
            arr.setflags(write=False)
        if self.embeddings.shape != (len(self.ids), self.dim):
            raise IndexFormatError("embedding matrix does not match id count and dim")
        if len(self.manifest_digest) != 32:
            raise IndexFormatError("manifest digest must be 32 bytes")

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        # creation time is runtime metadata and is not persisted
        if not isinstance(other, WorldIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.manifest_digest == other.manifest_digest
            and self.lat.tobytes() == other.lat.tobytes()
            and self.lon.tobytes() == other.lon.tobytes()
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )

    @property
    def scoring_matrix(self) -> tuple[np.ndarray, np.ndarray | None]:
        """(distinct embeddings as float64, record -> distinct row map).

        Scoring each distinct vector once guarantees that duplicated embeddings
        receive bit-identical scores, which BLAS does not promise for equal rows
        at different positions; ties then resolve purely by record order.
        """
        if self._scoring is None:
            rows = self.embeddings.view(np.dtype((np.void, 4 * self.dim))).ravel()
            _, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
            if first.size == len(self.ids):
                self._scoring = (self.embeddings.astype(np.float64), None)
            else:
                self._scoring = (self.embeddings[first].astype(np.float64), inverse.ravel())
        return self._scoring

    def location(self, i: int) -> GpsCoordinate:
        return GpsCoordinate(float(self.lat[i]), float(self.lon[i]))

    def record(self, i: int) -> GeoRecord:
        return GeoRecord(self.ids[i], self.embeddings[i], self.location(i))

    def __iter__(self) -> Iterator[GeoRecord]:
        return (self.record(i) for i in range(len(self)))

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<BIQ", VERSION, self.dim, len(self.ids))]
        for i, rid in enumerate(self.ids):
            raw = rid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<dd", self.lat[i], self.lon[i]))
            parts.append(self.embeddings[i].tobytes())
        parts.append(self.manifest_digest)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> WorldIndex:
        if data[:4] != MAGIC:
            raise IndexFormatError("not a world index file (bad magic)")
        if len(data) < 17 + 32:
            raise IndexFormatError("truncated index file")
        version, dim, count = struct.unpack_from("<BIQ", data, 4)
        if version != VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        off = 17
        ids: list[str] = []
        lat = np.empty(count)
        lon = np.empty(count)
        emb = np.empty((count, dim), dtype="<f4")
        row_bytes = 4 * dim
        try:
            for i in range(count):
                (n,) = struct.unpack_from("<H", data, off)
                off += 2
                ids.append(data[off : off + n].decode("utf-8"))
                off += n
                lat[i], lon[i] = struct.unpack_from("<dd", data, off)
                off += 16
                emb[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
                off += row_bytes
        except (struct.error, ValueError) as exc:
            raise IndexFormatError(f"truncated or corrupt index file: {exc}") from exc
        digest = data[off:]
        if len(digest) != 32:
            raise IndexFormatError("missing or oversized manifest digest trailer")
        return cls(dim=dim, ids=ids, lat=lat, lon=lon, embeddings=emb, manifest_digest=bytes(digest))

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> WorldIndex:
        return cls.from_bytes(Path(path).read_bytes())


def normalize_embedding(vec, tol: float = NORM_TOL) -> np.ndarray:
    """Unit-normalize; vectors already unit length within ``tol`` are kept as-is."""
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("zero-norm or non-finite embedding")
    if abs(norm - 1.0) <= tol:
        return v
    return v / norm


def read_manifest(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield JSON-lines rows; blank lines and lines starting with '#' are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                yield json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def _canonical_row(row: Mapping[str, Any]) -> bytes:
    return json.dumps(
        {"id": row["id"], "lat": row["lat"], "lon": row["lon"], "embedding": list(row["embedding"])},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8") + b"\n"


def build_index(manifest: Iterable[Mapping[str, Any]], dim: int) -> WorldIndex:
    """Ingest manifest rows (mappings with id, lat, lon, embedding) into a WorldIndex."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    digest = hashlib.sha256()
    ids: list[str] = []
    seen: set[str] = set()
    lats: list[float] = []
    lons: list[float] = []
    vectors: list[np.ndarray] = []
    for row in manifest:
        try:
            rid = str(row["id"])
            emb = row["embedding"]
            lat, lon = row["lat"], row["lon"]
        except KeyError as exc:
            raise ValueError(f"manifest row missing field {exc}") from None
        if len(rid.encode("utf-8")) > MAX_ID_BYTES:
            raise ValueError(f"id longer than {MAX_ID_BYTES} bytes: {rid[:32]}...")
        if rid in seen:
            raise ValueError(f"duplicate id {rid}")
        vec = np.asarray(emb, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise ValueError(f"shape mismatch at id={rid}: expected {dim} values, got {vec.size}")
        try:
            vec = normalize_embedding(vec)
        except ValueError as exc:
            raise ValueError(f"{exc} at id={rid}") from None
        loc = GpsCoordinate(lat, lon)
        seen.add(rid)
        ids.append(rid)
        lats.append(loc.lat)
        lons.append(loc.lon)
        vectors.append(vec + 0.0)  # folds -0.0 into 0.0 so equal vectors are byte-identical
        digest.update(_canonical_row(row))
    emb_matrix = np.array(vectors, dtype="<f4").reshape(len(ids), dim)
    return WorldIndex(
        dim=dim,
        ids=ids,
        lat=np.array(lats),
        lon=np.array(lons),
        embeddings=emb_matrix,
        manifest_digest=digest.digest(),
        created_at=time.time(),
    )


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; equal scores keep index order."""
    n = scores.shape[0]
    if k >= n:
        chosen = np.arange(n)
    else:
        threshold = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > threshold)
        ties = np.flatnonzero(scores == threshold)[: k - above.size]
        chosen = np.concatenate([above, ties])
    order = np.lexsort((chosen, -scores[chosen]))
    return chosen[order]


def bottom_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest scores, ascending; equal scores keep index order."""
    return top_k_indices(-scores, k)


def _prepare_queries(index: WorldIndex, queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise ValueError(f"shape mismatch: query width must be {index.dim}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("zero-norm or non-finite query")
    off = np.abs(norms - 1.0) > NORM_TOL
    if np.any(off):
        log.warning("normalizing %d query vector(s) that were not unit length", int(off.sum()))
        q = q.copy()
        q[off] /= norms[off, None]
    return q


def _check_k(index: WorldIndex, k: int) -> None:
    if len(index) == 0:
        raise ValueError("empty index")
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} out of range [1, {len(index)}]")


def _candidates(index: WorldIndex, scores: np.ndarray, order: np.ndarray) -> list[Candidate]:
    return [Candidate(index.ids[i], index.location(i), float(scores[i])) for i in order]


def _search_block(index: WorldIndex, q: np.ndarray, k: int) -> list[CandidateSet]:
    distinct, inverse = index.scoring_matrix
    scores = q @ distinct.T
    if inverse is not None:
        scores = scores[:, inverse]
    out = []
    for row in scores:
        out.append(
            CandidateSet(
                similar=_candidates(index, row, top_k_indices(row, k)),
                dissimilar=_candidates(index, row, bottom_k_indices(row, k)),
            )
        )
    return out


def search(index: WorldIndex, query, k: int) -> CandidateSet:
    """Exact top-k most similar and top-k least similar records by inner product."""
    _check_k(index, k)
    return _search_block(index, _prepare_queries(index, query), k)[0]


def search_batch(index: WorldIndex, queries, k: int, threads: int = 1) -> list[CandidateSet]:
    """Search many queries; results are identical for every ``threads`` value."""
    _check_k(index, k)
    q = _prepare_queries(index, queries)
    blocks = [q[i : i + QUERY_BLOCK] for i in range(0, q.shape[0], QUERY_BLOCK)]
    if threads == 1 or len(blocks) <= 1:
        results = [_search_block(index, b, k) for b in blocks]
    else:
        index.scoring_matrix  # materialize once before fanning out
        with ThreadPoolExecutor(max_workers=threads or None) as pool:
            results = list(pool.map(lambda b: _search_block(index, b, k), blocks))
    return [cs for block in results for cs in block]
