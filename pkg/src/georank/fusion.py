"""Feature fusion and contrastive alignment math.

Forward computations for the bidirectional cross-attention block used to
fuse RGB and segmentation features, the temperature-scaled similarity
logits, the cross-entropy contrastive objective and its analytic gradient.
Everything operates on small dense numpy arrays; there is no autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TEMPERATURE = 3.99
UNIT_NORM_TOL = 1e-6


@dataclass
class LayerNormParams:
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    epsilon: float = 1e-5

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    dropout_rate: float = 0.1
    rng_seed: int = 0
    d_k: int = field(init=False)

    def __post_init__(self) -> None:
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        self.w_v = np.asarray(self.w_v, dtype=np.float64)
        if self.w_q.ndim != 2 or self.w_k.ndim != 2 or self.w_v.ndim != 2:
            raise ValueError("shape mismatch: projections must be matrices")
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ValueError("shape mismatch: w_q and w_k must share output width d_k")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.d_k = self.w_q.shape[1]
        if self.d_k <= 0:
            raise ValueError("d_k must be positive")

    @classmethod
    def init(cls, dim: int, d_k: int | None = None, seed: int = 0, dropout_rate: float = 0.1) -> AttentionParams:
        """Xavier-style random projections with the value path kept at ``dim`` wide."""
        d_k = dim if d_k is None else d_k
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(dim)
        return cls(
            w_q=rng.normal(0.0, scale, (dim, d_k)),
            w_k=rng.normal(0.0, scale, (dim, d_k)),
            w_v=rng.normal(0.0, scale, (dim, dim)),
            dropout_rate=dropout_rate,
            rng_seed=seed,
        )


def _as_matrix(m, name: str) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"shape mismatch: {name} must be a non-empty matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(v, params: LayerNormParams | None = None) -> np.ndarray:
    """Normalize over the last axis to zero mean and unit population variance, then apply gain/bias."""
    params = params or LayerNormParams()
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] < 2:
        raise ValueError("degenerate normalization")
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    out = centered / np.sqrt(var + params.epsilon)
    if params.gamma is not None:
        out = out * params.gamma
    if params.beta is not None:
        out = out + params.beta
    return out


def attend(f_query, f_context, ap: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product cross-attention. Returns (attention weights A, attended values Z)."""
    fq = _as_matrix(f_query, "f_query")
    fc = _as_matrix(f_context, "f_context")
    if fq.shape[1] != fc.shape[1] or fq.shape[1] != ap.w_q.shape[0]:
        raise ValueError("shape mismatch: feature width does not match projection input width")
    if ap.w_k.shape[0] != fc.shape[1] or ap.w_v.shape[0] != fc.shape[1]:
        raise ValueError("shape mismatch: context width does not match projection input width")
    q = fq @ ap.w_q
    k = fc @ ap.w_k
    v = fc @ ap.w_v
    weights = softmax_rows(q @ k.T / math.sqrt(ap.d_k))
    return weights, weights @ v


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)


def cross_attention(
    f_query,
    f_context,
    ap: AttentionParams,
    lp: LayerNormParams | None = None,
    train_mode: bool = False,
) -> np.ndarray:
    """One direction of the fusion block: LayerNorm(Dropout(A·V) + F_query).

    The value projection must map back to the query width so the residual
    connection is well-typed. Dropout draws from a generator seeded with
    ``ap.rng_seed`` on every call, so training-mode output is reproducible.
    """
    fq = _as_matrix(f_query, "f_query")
    if ap.w_v.shape[1] != fq.shape[1]:
        raise ValueError("shape mismatch: value projection width must equal query feature width")
    _, z = attend(fq, f_context, ap)
    if train_mode:
        z = dropout(z, ap.dropout_rate, np.random.default_rng(ap.rng_seed))
    return layer_norm(z + fq, lp)


def bidirectional_cross_attention(
    f_rgb,
    f_seg,
    ap_rgb: AttentionParams,
    ap_seg: AttentionParams,
    lp_rgb: LayerNormParams | None = None,
    lp_seg: LayerNormParams | None = None,
    train_mode: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Enhance each view with the other: RGB attends over SEG and vice versa."""
    rgb_new = cross_attention(f_rgb, f_seg, ap_rgb, lp_rgb, train_mode)
    seg_new = cross_attention(f_seg, f_rgb, ap_seg, lp_seg, train_mode)
    return rgb_new, seg_new


def l2_normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def similarity_logits(img_emb, loc_emb, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Cosine similarities scaled by exp(temperature) (learnable logit-scale convention)."""
    img = _as_matrix(img_emb, "img_emb")
    loc = _as_matrix(loc_emb, "loc_emb")
    if img.shape != loc.shape:
        raise ValueError("shape mismatch: image and location embeddings must both be n x d")
    for m in (img, loc):
        if np.max(np.abs(np.linalg.norm(m, axis=1) - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("embeddings not unit-norm")
    return math.exp(temperature) * (img @ loc.T)


def _square(s, name: str = "similarity matrix") -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ValueError(f"{name} must be square and non-empty, got shape {s.shape}")
    return s


def contrastive_loss(s) -> float:
    """Mean cross-entropy of each row's softmax against the diagonal target."""
    s = _square(s)
    return float(-np.mean(np.diag(log_softmax_rows(s))))


def total_loss(s_rgb_gps, s_seg_gps) -> float:
    """Symmetric dual-view objective: half the sum of the four directional losses.

    The GPS-to-image directions use the transposed similarity matrices.
    """
    a = _square(s_rgb_gps, "rgb-gps similarity")
    b = _square(s_seg_gps, "seg-gps similarity")
    if a.shape != b.shape:
        raise ValueError("similarity matrices must have the same size")
    terms = (contrastive_loss(a), contrastive_loss(a.T), contrastive_loss(b), contrastive_loss(b.T))
    return 0.5 * sum(terms)


def contrastive_loss_grad(s) -> np.ndarray:
    """d(contrastive_loss)/dS = (softmax_rows(S) - I) / n."""
    s = _square(s)
    n = s.shape[0]
    return (softmax_rows(s) - np.eye(n)) / n
