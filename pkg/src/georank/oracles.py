"""Slow, independent reference implementations used to cross-check the fast paths.

These deliberately avoid the code they verify: scalar loops instead of
vectorized numpy, union-find instead of breadth-first expansion, exactly
rounded sums instead of BLAS.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from georank.geo import EARTH, EarthModel, GpsCoordinate, haversine_km


def dbscan_connectivity(
    points: Sequence[GpsCoordinate], eps_km: float, min_pts: int, earth: EarthModel = EARTH
) -> list[int]:
    """DBSCAN labels from the density-connectivity definition.

    Clusters are connected components of the core-point graph, numbered by
    their smallest core index; a non-core point joins the lowest-numbered
    cluster that has a core point within eps, else it is noise (-1).
    """
    n = len(points)
    near = [[haversine_km(points[i], points[j], earth) <= eps_km or i == j for j in range(n)] for i in range(n)]
    core = [sum(row) >= min_pts for row in near]
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and near[i][j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n) if core[i]})
    cluster_of_root = {r: c for c, r in enumerate(roots)}
    labels = []
    for i in range(n):
        if core[i]:
            labels.append(cluster_of_root[find(i)])
        else:
            reach = [cluster_of_root[find(j)] for j in range(n) if core[j] and near[i][j]]
            labels.append(min(reach) if reach else -1)
    return labels


def partition(labels: Sequence[int]) -> tuple[frozenset, frozenset]:
    """(set of clusters as frozensets of indices, noise index set): label-renaming invariant."""
    groups: dict[int, set[int]] = {}
    for i, label in enumerate(labels):
        if label != -1:
            groups.setdefault(label, set()).add(i)
    noise = frozenset(i for i, label in enumerate(labels) if label == -1)
    return frozenset(frozenset(g) for g in groups.values()), noise


def exact_dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


def brute_force_search(embeddings: np.ndarray, query: Sequence[float], k: int) -> tuple[list[int], list[int]]:
    """Record positions of the k most and k least similar rows, ties broken by position."""
    q = [float(x) for x in query]
    norm = math.sqrt(math.fsum(x * x for x in q))
    q = [x / norm for x in q]
    scores = [exact_dot(row.tolist(), q) for row in embeddings]
    order_desc = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    order_asc = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return order_desc[:k], order_asc[:k]


def central_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        up = x.astype(np.float64).copy()
        down = up.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def attention_by_hand(fq, fc, wq, wk, wv, epsilon: float = 1e-5) -> list[list[float]]:
    """Eval-mode cross-attention block with scalar loops and identity affine LayerNorm."""
    fq, fc, wq, wk, wv = (np.asarray(m, dtype=float).tolist() for m in (fq, fc, wq, wk, wv))

    def matmul(a, b):
        return [[math.fsum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]

    q, k, v = matmul(fq, wq), matmul(fc, wk), matmul(fc, wv)
    dk = len(wq[0])
    out = []
    for i in range(len(q)):
        logits = [math.fsum(q[i][t] * k[j][t] for t in range(dk)) / math.sqrt(dk) for j in range(len(k))]
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        total = math.fsum(ex)
        weights = [e / total for e in ex]
        z = [math.fsum(weights[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))]
        row = [z[c] + fq[i][c] for c in range(len(z))]
        mean = math.fsum(row) / len(row)
        var = math.fsum((x - mean) ** 2 for x in row) / len(row)
        out.append([(x - mean) / math.sqrt(var + epsilon) for x in row])
    return out
