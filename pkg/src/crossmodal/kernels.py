"""Numeric kernels for cross-modal matching.

Pure NumPy, float64 by default. Every kernel ships a forward path and a
hand-derived gradient (vector-Jacobian product) so the whole matching score
can be differentiated without an autodiff framework. The torch model in
``encoders``/``losses`` re-implements the same formulas; the two are
cross-checked in the test suite.

Conventions: region features r are stored as (M, D) and word features w as
(N, D), i.e. one feature vector per row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    """Scalar hyperparameters of the matching objectives.

    Defaults follow the published training recipe:
    gamma, gamma1, gamma2 = 2, 1, 1; eta_s = eta_w = 0.5;
    lambda_cem, lambda_tm = 2.0, 1.0.
    """

    gamma: float = 2.0       # softmax smoothing for the cross-entropy matching loss
    gamma1: float = 1.0      # attention sharpness over regions
    gamma2: float = 1.0      # smooth-max sharpness over words
    eta_s: float = 0.5       # triplet margin, sentence level
    eta_w: float = 0.5       # triplet margin, word/phrase levels
    lambda_cem: float = 2.0
    lambda_tm: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0 or self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("gamma, gamma1, gamma2 must be positive")
        if self.eta_s < 0 or self.eta_w < 0:
            raise ValueError("margins must be non-negative")
        if self.lambda_cem < 0 or self.lambda_tm < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class FeatureMatrix:
    """A stack of feature vectors, one per row (rows x dim)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] == 0 or self.data.shape[1] == 0:
            raise ValueError(f"expected non-empty 2-D matrix, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class AttentionResult:
    """Word-to-region attention outputs.

    context: (N, D) attention-weighted region summaries, one per word.
    attention: (N, M) per-word weights over regions (valid rows sum to 1).
    sim_raw: (N, M) raw word-region dot products.
    sim_norm: (N, M) dot products softmax-normalized over valid words.
    """

    context: np.ndarray
    attention: np.ndarray
    sim_raw: np.ndarray | None = None
    sim_norm: np.ndarray | None = None
    word_mask: np.ndarray | None = field(default=None)


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    """Cosine similarity of two vectors; 0.0 (with a warning) if either is all-zero."""
    a, b = _asarray(a), _asarray(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        logger.warning("cosine_similarity: zero-norm input, returning 0.0")
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_similarity_grad(a, b, upstream: float = 1.0):
    """Gradient of ``cosine_similarity`` w.r.t. both inputs."""
    a, b = _asarray(a), _asarray(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return np.zeros_like(a), np.zeros_like(b)
    s = np.dot(a, b) / (na * nb)
    da = upstream * (b / (na * nb) - s * a / (na * na))
    db = upstream * (a / (na * nb) - s * b / (nb * nb))
    return da, db


def pairwise_similarity(V, S) -> np.ndarray:
    """All-pairs cosine similarity: entry (i, j) compares row i of V with row j of S."""
    V, S = _asarray(V), _asarray(S)
    if V.ndim != 2 or S.ndim != 2 or V.shape[1] != S.shape[1]:
        raise ValueError(f"dimension mismatch: {V.shape} vs {S.shape}")
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    sn = np.linalg.norm(S, axis=1, keepdims=True)
    if np.any(vn == 0) or np.any(sn == 0):
        logger.warning("pairwise_similarity: zero-norm rows, their scores set to 0")
    Vn = np.divide(V, vn, out=np.zeros_like(V), where=vn != 0)
    Sn = np.divide(S, sn, out=np.zeros_like(S), where=sn != 0)
    return Vn @ Sn.T


def pairwise_similarity_grad(V, S, upstream):
    """VJP of ``pairwise_similarity`` given upstream (B x B)."""
    V, S = _asarray(V), _asarray(S)
    G = _asarray(upstream)
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    sn = np.linalg.norm(S, axis=1, keepdims=True)
    Vn = np.divide(V, vn, out=np.zeros_like(V), where=vn != 0)
    Sn = np.divide(S, sn, out=np.zeros_like(S), where=sn != 0)
    C = Vn @ Sn.T
    # d/dV_i of sum_j G_ij * cos(V_i, S_j)
    dVn = G @ Sn                       # (B, D)
    dV = (dVn - ((G * C).sum(axis=1, keepdims=True)) * Vn)
    dV = np.divide(dV, vn, out=np.zeros_like(dV), where=vn != 0)
    dSn = G.T @ Vn
    dS = (dSn - ((G * C).sum(axis=0)[:, None]) * Sn)
    dS = np.divide(dS, sn, out=np.zeros_like(dS), where=sn != 0)
    return dV, dS


# ---------------------------------------------------------------------------
# word-region similarity and normalization
# ---------------------------------------------------------------------------

def region_word_similarity(w, r) -> np.ndarray:
    """Raw dot-product similarity m (N x M) between word rows and region rows."""
    w, r = _asarray(w), _asarray(r)
    if w.ndim != 2 or r.ndim != 2 or w.shape[1] != r.shape[1]:
        raise ValueError(f"dimension mismatch: {w.shape} vs {r.shape}")
    return w @ r.T


def region_word_similarity_grad(w, r, upstream):
    w, r = _asarray(w), _asarray(r)
    G = _asarray(upstream)
    return G @ r, G.T @ w


def normalize_over_words(m, word_mask) -> np.ndarray:
    """Softmax of m over the word axis (per region column), restricted to valid words.

    Masked word rows come out exactly zero; each column sums to 1 over valid rows.
    """
    m = _asarray(m)
    mask = np.asarray(word_mask, dtype=bool)
    if mask.shape != (m.shape[0],):
        raise ValueError("word_mask must have one entry per word row")
    if not mask.any():
        raise ValueError("normalize_over_words: all words masked")
    z = np.where(mask[:, None], m, -np.inf)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def normalize_over_words_grad(m, word_mask, upstream):
    """VJP of ``normalize_over_words`` w.r.t. m."""
    mbar = normalize_over_words(m, word_mask)
    G = _asarray(upstream)
    # per-column softmax Jacobian
    return mbar * (G - (G * mbar).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# attention context and matching score
# ---------------------------------------------------------------------------

def attention_context(m_norm, r, gamma1: float, word_mask) -> AttentionResult:
    """Per-word context vectors: softmax over regions of gamma1 * m_norm, times r.

    Rows of the attention matrix for masked words are zeroed; valid rows sum to 1.
    """
    m_norm, r = _asarray(m_norm), _asarray(r)
    mask = np.asarray(word_mask, dtype=bool)
    if gamma1 <= 0:
        raise ValueError("gamma1 must be positive")
    if m_norm.shape[1] != r.shape[0]:
        raise ValueError(f"shape mismatch: m_norm {m_norm.shape} vs r {r.shape}")
    z = gamma1 * m_norm
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    alpha = e / e.sum(axis=1, keepdims=True)
    alpha = np.where(mask[:, None], alpha, 0.0)
    context = alpha @ r
    return AttentionResult(context=context, attention=alpha, sim_norm=m_norm,
                           word_mask=mask)


def attention_context_grad(m_norm, r, gamma1: float, word_mask,
                           upstream_context):
    """VJP of the context output w.r.t. (m_norm, r)."""
    m_norm, r = _asarray(m_norm), _asarray(r)
    mask = np.asarray(word_mask, dtype=bool)
    Gc = _asarray(upstream_context)
    res = attention_context(m_norm, r, gamma1, word_mask)
    alpha = res.attention
    dalpha = Gc @ r.T                          # (N, M)
    dalpha = np.where(mask[:, None], dalpha, 0.0)
    dz = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
    dm_norm = gamma1 * dz
    dr = alpha.T @ Gc
    return dm_norm, dr


def word_region_attention(w, r, gamma1: float, word_mask) -> AttentionResult:
    """Full attention pipeline: raw similarity, word-softmax, region attention, context."""
    m = region_word_similarity(w, r)
    mbar = normalize_over_words(m, word_mask)
    res = attention_context(mbar, r, gamma1, word_mask)
    res.sim_raw = m
    return res


def attention_matching_score(c, w, gamma2: float, word_mask) -> float:
    """Smooth-max aggregation of per-word context/word cosine similarities.

    (1/gamma2) * log sum_{valid i} exp(gamma2 * cos(c_i, w_i)), evaluated with
    max-subtraction so large gamma2 cannot overflow.
    """
    c, w = _asarray(c), _asarray(w)
    mask = np.asarray(word_mask, dtype=bool)
    if gamma2 <= 0:
        raise ValueError("gamma2 must be positive")
    if c.shape != w.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {w.shape}")
    if not mask.any():
        raise ValueError("attention_matching_score: no valid words")
    sims = np.array([cosine_similarity(c[i], w[i]) for i in np.nonzero(mask)[0]])
    z = gamma2 * sims
    zmax = z.max()
    return float((zmax + np.log(np.exp(z - zmax).sum())) / gamma2)


def attention_matching_score_grad(c, w, gamma2: float, word_mask,
                                  upstream: float = 1.0):
    """Gradient of ``attention_matching_score`` w.r.t. (c, w)."""
    c, w = _asarray(c), _asarray(w)
    mask = np.asarray(word_mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    sims = np.array([cosine_similarity(c[i], w[i]) for i in idx])
    z = gamma2 * sims
    z = z - z.max()
    p = np.exp(z)
    p = p / p.sum()                           # d score / d sims
    dc = np.zeros_like(c)
    dw = np.zeros_like(w)
    for weight, i in zip(p, idx):
        gi, gw = cosine_similarity_grad(c[i], w[i], upstream * weight)
        dc[i] = gi
        dw[i] = gw
    return dc, dw
