"""Built-in numerical self-checks: loss gradient, attention invariants, DBSCAN, retrieval, parsing."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable

import numpy as np

from georank import fusion, oracles
from georank.geo import GpsCoordinate, destination
from georank.index import build_index, search
from georank.rerank import ClusterParams, dbscan_haversine
from georank.thinker import Source, parse_prediction


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def check_loss_gradient(rng: np.random.Generator, trials: int = 100) -> Check:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(3, 7))
        s = rng.normal(0.0, 3.0, size=(n, n))
        analytic = fusion.contrastive_loss_grad(s)
        numeric = oracles.central_difference_grad(fusion.contrastive_loss, s, h=1e-5)
        rel = np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
        worst = max(worst, float(rel))
    return Check("contrastive gradient vs finite differences", worst < 1e-5, f"max rel err {worst:.2e}")


def check_loss_values() -> Check:
    uniform = fusion.contrastive_loss(np.zeros((4, 4)))
    saturated = fusion.total_loss(100 * np.eye(5), 100 * np.eye(5))
    ok = abs(uniform - math.log(4)) <= 1e-9 and saturated < 1e-8
    return Check("loss closed forms", ok, f"L(0)={uniform:.12f}, L_t(100I)={saturated:.1e}")


def check_attention(rng: np.random.Generator, trials: int = 200) -> Check:
    for t in range(trials):
        d = int(rng.integers(2, 9))
        nq, nc = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        fq, fc = rng.normal(size=(nq, d)), rng.normal(size=(nc, d))
        ap = fusion.AttentionParams.init(d, d_k=int(rng.integers(1, 9)), seed=t)
        _, z = fusion.attend(fq, fc, ap)
        v = fc @ ap.w_v
        if np.any(z < v.min(axis=0) - 1e-9) or np.any(z > v.max(axis=0) + 1e-9):
            return Check("attention convex hull", False, f"trial {t}")
        _, z1 = fusion.attend(fq, fc[:1], ap)
        if not np.array_equal(z1, np.repeat(fc[:1] @ ap.w_v, nq, axis=0)):
            return Check("attention single key", False, f"trial {t}")
        zero = fusion.AttentionParams(np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)))
        out = fusion.cross_attention(fq, fc, zero)
        if not np.allclose(out, fusion.layer_norm(fq), atol=1e-12, rtol=0):
            return Check("attention zero projection", False, f"trial {t}")
    return Check("attention invariants", True, f"{trials} cases")


def random_cluster_points(rng: random.Random, n: int) -> list[GpsCoordinate]:
    """Points around a few random centres at mixed spreads, so eps in {1, 5, 50} km all matter."""
    centres = [GpsCoordinate(rng.uniform(-80, 80), rng.uniform(-180, 180)) for _ in range(rng.randint(1, 4))]
    pts = []
    for _ in range(n):
        c = rng.choice(centres)
        pts.append(destination(c, rng.uniform(0, 360), abs(rng.gauss(0, rng.choice([0.5, 3, 20, 80])))))
    return pts


def check_dbscan(seed: int, trials: int = 500) -> Check:
    rng = random.Random(seed)
    for t in range(trials):
        pts = random_cluster_points(rng, rng.randint(1, 50))
        eps, min_pts = rng.choice([1.0, 5.0, 50.0]), rng.choice([2, 3])
        got = dbscan_haversine(pts, ClusterParams(eps, min_pts)).labels
        want = oracles.dbscan_connectivity(pts, eps, min_pts)
        if oracles.partition(got) != oracles.partition(want):
            return Check("dbscan vs connectivity oracle", False, f"trial {t}")
    return Check("dbscan vs connectivity oracle", True, f"{trials} instances")


def check_retrieval(rng: np.random.Generator, trials: int = 20) -> Check:
    for t in range(trials):
        n, d = int(rng.integers(1, 200)), int(rng.integers(1, 33))
        emb = rng.normal(size=(n, d))
        if n > 3:
            emb[rng.integers(0, n, size=n // 4)] = emb[0]  # duplicated rows force ties
        rows = [{"id": f"r{i}", "lat": 0.0, "lon": 0.0, "embedding": e.tolist()} for i, e in enumerate(emb)]
        index = build_index(rows, d)
        q = rng.normal(size=d)
        k = int(rng.integers(1, n + 1))
        cs = search(index, q, k)
        sim, dis = oracles.brute_force_search(index.embeddings, q, k)
        if [c.id for c in cs.similar] != [f"r{i}" for i in sim] or [c.id for c in cs.dissimilar] != [f"r{i}" for i in dis]:
            return Check("search vs brute force", False, f"trial {t}")
    return Check("search vs brute force", True, f"{trials} indexes")


def check_parsing(seed: int, trials: int = 2000) -> Check:
    rng = random.Random(seed)
    fallback = GpsCoordinate(1.0, 2.0)
    for _ in range(trials):
        raw = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
        p = parse_prediction(raw, fallback)
        if not (-90 <= p.location.lat <= 90 and -180 < p.location.lon <= 180):
            return Check("parse fuzz", False, repr(raw))
    ok = parse_prediction("I cannot determine the location.", fallback).source is Source.FALLBACK_TOP1
    return Check("parse fuzz", ok, f"{trials} random inputs")


def run_selftest(seed: int = 0, quick: bool = False) -> list[Check]:
    rng = np.random.default_rng(seed)
    scale = 5 if quick else 1
    checks: list[Callable[[], Check]] = [
        lambda: check_loss_gradient(rng, 100 // scale),
        check_loss_values,
        lambda: check_attention(rng, 200 // scale),
        lambda: check_dbscan(seed, 500 // scale),
        lambda: check_retrieval(rng, 20 // scale),
        lambda: check_parsing(seed, 2000 // scale),
    ]
    results = []
    for run in checks:
        try:
            results.append(run())
        except Exception as exc:  # a crashing check is a failing check
            results.append(Check(getattr(run, "__name__", "check"), False, f"{type(exc).__name__}: {exc}"))
    return results
