"""Training objectives: bidirectional cross-entropy matching (CEM), triplet
matching (TM), attention-based region/word and region/phrase variants, the
combined CETM objective, weighted multi-label BCE and an optional masked
language modeling loss.

All losses are torch functions of their inputs (gradients flow to the
encoders); randomness is always explicit via seeds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .kernels import LossConfig  # noqa: F401  (re-exported for convenience)

logger = logging.getLogger(__name__)

LEVELS = ("sentence", "word", "bigram", "trigram")

# Named loss settings from the ablation grid. Suffix s/w/p = sentence,
# region-word and region-phrase level matching.
_SETTINGS = {
    "TM_s": (False, True, ("sentence",)),
    "TM_ws": (False, True, ("sentence", "word")),
    "CEM_s": (True, False, ("sentence",)),
    "CEM_ws": (True, False, ("sentence", "word")),
    "CETM_ws": (True, True, ("sentence", "word")),
    "CETM_wps": (True, True, ("sentence", "word", "bigram", "trigram")),
}


@dataclass(frozen=True)
class AblationSetting:
    use_cem: bool = True
    use_tm: bool = True
    levels: tuple = LEVELS
    name: str = "CETM_wps"

    def __post_init__(self):
        if not (self.use_cem or self.use_tm):
            raise ValueError("at least one of CEM/TM must be enabled")
        if not self.levels:
            raise ValueError("at least one matching level must be enabled")
        for lv in self.levels:
            if lv not in LEVELS:
                raise ValueError(f"unknown level {lv!r}")

    @classmethod
    def from_name(cls, name: str) -> "AblationSetting":
        if name not in _SETTINGS:
            raise ValueError(f"unknown setting {name!r}; choose from {sorted(_SETTINGS)}")
        use_cem, use_tm, levels = _SETTINGS[name]
        return cls(use_cem=use_cem, use_tm=use_tm, levels=levels, name=name)

    @staticmethod
    def names():
        return list(_SETTINGS)


def _check_square_scores(scores: torch.Tensor):
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"expected a square score matrix, got {tuple(scores.shape)}")
    if not torch.isfinite(scores).all():
        raise ValueError("score matrix contains non-finite entries")


def cem_loss(scores: torch.Tensor, gamma: float) -> torch.Tensor:
    """Bidirectional cross-entropy matching loss over a B x B score matrix.

    Row softmax gives the image-to-text direction, column softmax the
    text-to-image direction; the diagonal marks correct pairs.
    """
    _check_square_scores(scores)
    logits = gamma * scores
    it = -F.log_softmax(logits, dim=1).diagonal()
    ti = -F.log_softmax(logits, dim=0).diagonal()
    return it.sum() + ti.sum()


def sample_negatives(batch_size: int, seed: int):
    """One uniform in-batch negative per anchor and direction, j != i.

    Returns (text_negatives, image_negatives) as LongTensors of length B.
    """
    if batch_size < 2:
        raise ValueError("need at least 2 samples to draw a negative")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        offs = rng.integers(1, batch_size, size=batch_size)
        idx = (np.arange(batch_size) + offs) % batch_size
        out.append(torch.from_numpy(idx))
    return out[0], out[1]


def tm_loss(scores: torch.Tensor, eta: float, negatives=None,
            rng_seed: int = 0) -> torch.Tensor:
    """Bidirectional triplet matching loss with random in-batch negatives.

    For anchor image i the positive is text i and the negative a random text
    j != i (and symmetrically with a random image negative).
    """
    _check_square_scores(scores)
    B = scores.shape[0]
    if B < 2:
        raise ValueError("tm_loss needs a batch of at least 2")
    if negatives is None:
        negatives = sample_negatives(B, rng_seed)
    text_neg, image_neg = negatives
    diag = scores.diagonal()
    i = torch.arange(B, device=scores.device)
    s_it_neg = scores[i, text_neg]        # S(I_i, T_j)
    s_ti_neg = scores[image_neg, i]       # S(I_j, T_i)
    loss = F.relu(s_it_neg - diag + eta) + F.relu(s_ti_neg - diag + eta)
    return loss.sum()


# ---------------------------------------------------------------------------
# attention-based matching scores over a batch
# ---------------------------------------------------------------------------

def _masked_softmax(z: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    neg = torch.finfo(z.dtype).min
    z = z.masked_fill(~mask, neg)
    out = torch.softmax(z, dim=dim)
    return out.masked_fill(~mask, 0.0)


def attention_matching_matrix(regions: torch.Tensor, words: torch.Tensor,
                              word_mask: torch.Tensor, gamma1: float,
                              gamma2: float) -> torch.Tensor:
    """All-pairs attention matching scores.

    regions: (B, M, D); words: (B, N, D); word_mask: (B, N) bool.
    Entry (i, j) is the attention matching score of image i against text j.
    """
    if regions.ndim != 3 or words.ndim != 3:
        raise ValueError("expected batched region and word features")
    if regions.shape[2] != words.shape[2]:
        raise ValueError("region/word feature dims differ")
    B, M, _ = regions.shape
    N = words.shape[1]
    mask = word_mask.bool()
    if not mask.any(dim=1).all():
        raise ValueError("every text needs at least one valid word")

    # raw dot products, image i x text j: (B_img, B_txt, N, M)
    m = torch.einsum("jnd,imd->ijnm", words, regions)
    wmask = mask[None, :, :, None]                   # broadcast over images/regions
    mbar = _masked_softmax(m, wmask.expand_as(m), dim=2)
    alpha = torch.softmax(gamma1 * mbar, dim=3)
    ctx = torch.einsum("ijnm,imd->ijnd", alpha, regions)

    sims = F.cosine_similarity(ctx, words[None, :, :, :].expand_as(ctx), dim=3)
    neg = torch.finfo(sims.dtype).min
    z = (gamma2 * sims).masked_fill(~mask[None, :, :], neg)
    return torch.logsumexp(z, dim=2) / gamma2


def attention_scores(regions, words, word_mask, gamma1, gamma2):
    """Alias of :func:`attention_matching_matrix` (kept as the public name)."""
    return attention_matching_matrix(regions, words, word_mask, gamma1, gamma2)


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def cetm_loss(global_scores, level_scores: dict, cfg: LossConfig,
              setting: AblationSetting, rng_seed: int = 0):
    """Weighted CEM + TM combination over the enabled matching levels.

    level_scores maps level name -> B x B score matrix ("sentence" may be
    omitted there; global_scores is used for it). Returns (total, breakdown)
    where breakdown maps term names like "cem/word" to detached floats.
    """
    if setting is None:
        raise ValueError("setting is required")
    scores_by_level = dict(level_scores)
    scores_by_level.setdefault("sentence", global_scores)
    missing = [lv for lv in setting.levels if scores_by_level.get(lv) is None]
    if missing:
        raise ValueError(f"missing score matrices for levels: {missing}")

    B = scores_by_level[setting.levels[0]].shape[0]
    negatives = sample_negatives(B, rng_seed) if (setting.use_tm and B >= 2) else None

    total = None
    breakdown = {}
    for lv in setting.levels:
        s = scores_by_level[lv]
        eta = cfg.eta_s if lv == "sentence" else cfg.eta_w
        if setting.use_cem:
            term = cfg.lambda_cem * cem_loss(s, cfg.gamma)
            breakdown[f"cem/{lv}"] = float(term.detach())
            total = term if total is None else total + term
        if setting.use_tm and B >= 2:
            term = cfg.lambda_tm * tm_loss(s, eta, negatives=negatives)
            breakdown[f"tm/{lv}"] = float(term.detach())
            total = term if total is None else total + term
    if total is None:
        total = global_scores.sum() * 0.0
    return total, breakdown


# ---------------------------------------------------------------------------
# classification and MLM
# ---------------------------------------------------------------------------

def pos_neg_balance(labels: np.ndarray, max_weight: float = 100.0) -> np.ndarray:
    """Per-class #negative / #positive ratio over a training split.

    Classes with zero positives get the cap (with a warning) instead of inf.
    """
    labels = np.asarray(labels)
    pos = labels.sum(axis=0)
    neg = labels.shape[0] - pos
    out = np.empty(labels.shape[1], dtype=np.float64)
    for k in range(labels.shape[1]):
        if pos[k] == 0:
            logger.warning("class %d has no positives; capping pos weight at %g",
                           k, max_weight)
            out[k] = max_weight
        else:
            out[k] = min(neg[k] / pos[k], max_weight)
    return out


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor,
                 class_weights=None, pos_weights=None) -> torch.Tensor:
    """Sigmoid cross-entropy with per-class positive scaling and class weights.

    pos_weights are the #neg/#pos ratios from the training split (see
    :func:`pos_neg_balance`); class_weights rescale whole classes. Stable via
    the fused logits formulation.
    """
    if logits.shape != labels.shape:
        raise ValueError("logits/labels shape mismatch")
    if ((labels != 0) & (labels != 1)).any():
        raise ValueError("labels must be binary")
    kw = {}
    if pos_weights is not None:
        kw["pos_weight"] = torch.as_tensor(pos_weights, dtype=logits.dtype,
                                           device=logits.device)
    if class_weights is not None:
        cw = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
        if (cw <= 0).any():
            raise ValueError("class weights must be positive")
        kw["weight"] = cw.expand_as(logits)
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), **kw)


def apply_mlm_masking(ids: np.ndarray, mask: np.ndarray, vocab_size: int,
                      seed: int, mask_id: int = 2,
                      rate: float = 0.15):
    """BERT-style corruption: 15% of valid tokens, 80/10/10 mask/random/keep.

    Returns (corrupted ids, masked position indicator).
    """
    rng = np.random.default_rng(seed)
    ids = np.array(ids, copy=True)
    valid = np.asarray(mask, dtype=bool)
    pick = valid & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    ids[pick & (action < 0.8)] = mask_id
    rand = pick & (action >= 0.8) & (action < 0.9)
    ids[rand] = rng.integers(3, vocab_size, size=int(rand.sum()))
    return ids, pick


def mlm_loss(token_logits: torch.Tensor, targets: torch.Tensor,
             masked_positions: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions only; 0 if nothing is masked."""
    masked = masked_positions.bool().reshape(-1)
    if not masked.any():
        logger.warning("mlm_loss: no masked positions, returning 0")
        return token_logits.sum() * 0.0
    logits = token_logits.reshape(-1, token_logits.shape[-1])[masked]
    tgt = targets.reshape(-1)[masked]
    return F.cross_entropy(logits, tgt)
