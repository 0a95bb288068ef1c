"""Prompt assembly, LMM querying and answer parsing for final arbitration.

The model receives the query image reference, the top-n re-ranked
candidates as likely locations and the n least similar candidates as
unlikely ones, and is asked to answer ``FINAL: <lat>, <lon>``. Any failure
(transport, status, unparseable or out-of-range answer) falls back to the
re-ranked top-1 so the pipeline always yields a valid coordinate.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from georank.geo import GpsCoordinate, spherical_centroid
from georank.index import Candidate
from georank.rerank import RerankResult

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = """You are a geo-localization expert.
Estimate where the photograph below was taken.

Image: {image}

LIKELY (ranked, most plausible first):
{positives}

UNLIKELY (visually least similar locations):
{negatives}

Use the likely candidates as evidence and the unlikely ones as counter-examples.
You may answer with a location that is not in either list.
Answer with a single line of the form FINAL: <lat>, <lon>
"""

PLACEHOLDERS = ("{image}", "{positives}", "{negatives}")
DATASET_N = {"im2gps": 10, "im2gps3k": 15, "yfcc4k": 5}

_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_PAIR = re.compile(
    rf"(?<![\w.])({_NUM})\s*(?:°\s*)?,\s*(?:lon(?:gitude)?\s*[:=]?\s*)?({_NUM})(?!\d|\.\d)",
    re.IGNORECASE,
)
_FINAL = re.compile(r"FINAL\s*(?:ANSWER)?\s*:", re.IGNORECASE)
COORD_LINE = re.compile(rf"^\s*(?:\d+\.\s+)?{_NUM}, {_NUM}\s*$")


class Source(str, enum.Enum):
    LMM = "lmm"
    FALLBACK_TOP1 = "fallback_top1"


@dataclass(frozen=True)
class PromptBundle:
    image_ref: str
    positives: tuple[tuple[GpsCoordinate, int], ...]
    negatives: tuple[tuple[GpsCoordinate, int], ...]
    template_id: str
    rendered_text: str

    @property
    def n(self) -> int:
        return len(self.positives)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.rendered_text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LmmConfig:
    endpoint_url: str = ""
    model_name: str = "geo-lmm"
    timeout_s: float = 30.0
    max_retries: int = 2
    auth_token_env: str = "GEO_LMM_TOKEN"
    backoff_s: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if not self.timeout_s > 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


@dataclass(frozen=True)
class Prediction:
    location: GpsCoordinate
    source: Source
    raw_response: str


class LmmError(RuntimeError):
    pass


class LmmUnavailable(LmmError):
    pass


class LmmStatusError(LmmError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"lmm endpoint returned status {status}: {detail}".rstrip(": "))
        self.status = status
        self.detail = detail


class TransportError(LmmError):
    """A single failed attempt (connection refused, timeout, ...). Retried by query_lmm."""


def format_coordinate(c: GpsCoordinate) -> str:
    return f"{c.lat:.6f}, {c.lon:.6f}"


def _render_block(items: Sequence[tuple[GpsCoordinate, int]]) -> str:
    return "\n".join(f"{rank}. {format_coordinate(c)}" for c, rank in items)


def load_template(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def build_prompt(
    image_ref: str,
    result: RerankResult,
    dissimilar: Sequence[Candidate],
    n: int,
    template: str = DEFAULT_TEMPLATE,
    template_id: str = "default",
    k: int | None = None,
) -> PromptBundle:
    """Render the contrastive prompt from the re-ranked and dissimilar candidate lists.

    ``k`` is the retrieval depth; it defaults to the number of re-ranked candidates.
    """
    k = len(result.reranked) if k is None else k
    if n < 1 or n > len(result.reranked) or n > len(dissimilar) or n >= k:
        raise ValueError(
            f"n exceeds candidate count (n={n}, k={k}, |S'|={len(result.reranked)}, |D|={len(dissimilar)}); "
            "need 1 <= n < k"
        )
    missing = [p for p in PLACEHOLDERS if p not in template]
    if missing:
        raise ValueError(f"template missing placeholder(s): {', '.join(missing)}")
    positives = tuple((c.location, rank) for rank, c in enumerate(result.reranked[:n], 1))
    negatives = tuple((c.location, rank) for rank, c in enumerate(dissimilar[:n], 1))
    # plain replacement so literal braces elsewhere in a template survive
    text = (
        template.replace("{image}", image_ref)
        .replace("{positives}", _render_block(positives))
        .replace("{negatives}", _render_block(negatives))
    )
    return PromptBundle(image_ref, positives, negatives, template_id, text)


def count_coordinate_lines(text: str) -> int:
    return sum(1 for line in text.splitlines() if COORD_LINE.match(line))


class LmmClient(Protocol):
    def complete(self, bundle: PromptBundle, config: LmmConfig) -> str: ...


class HttpLmmClient:
    """POSTs ``{model, prompt, image_ref}`` as JSON and reads the ``text`` field of the reply."""

    def complete(self, bundle: PromptBundle, config: LmmConfig) -> str:
        payload = json.dumps(
            {"model": config.model_name, "prompt": bundle.rendered_text, "image_ref": bundle.image_ref}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(config.endpoint_url, data=payload, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=config.timeout_s) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise LmmStatusError(exc.code, exc.reason if isinstance(exc.reason, str) else "") from None
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            raise TransportError(f"transport failure: {type(exc).__name__}") from None
        try:
            reply = json.loads(body)
            text = reply["text"]
        except (ValueError, KeyError, TypeError):
            raise LmmStatusError(200, "reply is not a JSON object with a text field") from None
        return str(text)


class EchoFirstPositiveClient:
    """Deterministic offline model that answers with the top-ranked likely candidate."""

    def complete(self, bundle: PromptBundle, config: LmmConfig) -> str:
        c = bundle.positives[0][0]
        return f"[mock:{bundle.digest[:16]}]\nFINAL: {c.lat!r}, {c.lon!r}"


class CentroidClient:
    """Deterministic offline model that answers with the spherical centroid of the likely candidates."""

    def complete(self, bundle: PromptBundle, config: LmmConfig) -> str:
        c = spherical_centroid([p for p, _ in bundle.positives])
        return f"[mock:{bundle.digest[:16]}]\nFINAL: {c.lat!r}, {c.lon!r}"


MOCK_CLIENTS = {"echo": EchoFirstPositiveClient, "centroid": CentroidClient}


def query_lmm(
    bundle: PromptBundle,
    config: LmmConfig,
    client: LmmClient,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send the prompt, retrying transport failures and 5xx replies with exponential backoff."""
    attempts = config.max_retries + 1
    last: LmmError | None = None
    for attempt in range(attempts):
        if attempt:
            sleep(config.backoff_s * 2 ** (attempt - 1))
        try:
            return client.complete(bundle, config)
        except LmmStatusError as exc:
            if exc.status < 500:
                raise
            last = exc
        except TransportError as exc:
            last = exc
        log.info("lmm attempt %d/%d failed: %s", attempt + 1, attempts, last)
    if isinstance(last, LmmStatusError):
        raise last
    raise LmmUnavailable(f"lmm unavailable after {attempts} attempts")


def query_many(
    bundles: Sequence[PromptBundle], config: LmmConfig, client: LmmClient
) -> list[str | LmmError]:
    """Query several bundles with at most ``config.max_in_flight`` concurrent requests.

    Results are returned in input order; failures are returned as the exception instance.
    """

    def one(b: PromptBundle) -> str | LmmError:
        try:
            return query_lmm(b, config, client)
        except LmmError as exc:
            return exc

    if config.max_in_flight == 1 or len(bundles) <= 1:
        return [one(b) for b in bundles]
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return list(pool.map(one, bundles))


def _first_valid_pair(text: str) -> GpsCoordinate | None:
    for m in _PAIR.finditer(text):
        try:
            lat, lon = float(m.group(1)), float(m.group(2))
        except ValueError:
            continue
        if -90.0 <= lat <= 90.0 and -180.0 < lon <= 180.0:
            return GpsCoordinate(lat, lon)
    return None


def parse_prediction(raw: str | bytes, fallback: GpsCoordinate) -> Prediction:
    """Extract the predicted coordinate from a model reply, never failing.

    Text after a ``FINAL:`` marker is searched first, then the whole reply.
    The first "lat, lon" pair with both values in range wins; otherwise the
    fallback (the re-ranked top-1) is returned.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    marker = _FINAL.search(raw)
    found = _first_valid_pair(raw[marker.end() :]) if marker else None
    if found is None:
        found = _first_valid_pair(raw)
    if found is None:
        return Prediction(fallback, Source.FALLBACK_TOP1, raw)
    return Prediction(found, Source.LMM, raw)


def predict(
    bundle: PromptBundle,
    fallback: GpsCoordinate,
    config: LmmConfig,
    client: LmmClient,
) -> Prediction:
    try:
        raw = query_lmm(bundle, config, client)
    except LmmError as exc:
        log.warning("falling back to re-ranked top-1: %s", exc)
        return Prediction(fallback, Source.FALLBACK_TOP1, "")
    return parse_prediction(raw, fallback)
