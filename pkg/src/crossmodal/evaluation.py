"""Retrieval and classification metrics plus the loss-setting ablation runner.

Recall@K uses deterministic tie-breaking (lowest candidate index wins). AUC
is the Mann-Whitney statistic with half credit for score ties; single-class
inputs yield an absent metric (None), never 0.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def recall_at_k(scores, true_index, k: int) -> float:
    """Fraction of queries whose true match ranks in the top k by descending
    score. Ties resolve in favor of the lowest candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    true_index = np.asarray(true_index)
    if scores.ndim != 2:
        raise ValueError("scores must be Q x C")
    q, c = scores.shape
    if k > c:
        raise ValueError(f"k={k} exceeds candidate count {c}")
    if true_index.shape != (q,) or (true_index < 0).any() or (true_index >= c).any():
        raise ValueError("invalid true_index")
    hits = 0
    for i in range(q):
        t = true_index[i]
        st = scores[i, t]
        rank = 1 + int((scores[i] > st).sum()) + int((scores[i, :t] == st).sum())
        if rank <= k:
            hits += 1
    return hits / q


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with 0.5 tie credit; None when only one class present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)                       # average ranks handle ties
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RetrievalReport:
    direction: str                      # "I2T" or "T2I"
    subset_size: int
    ks: tuple = (1, 5, 10)
    recalls: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for k in self.ks:
            r = self.recalls.get(k)
            if r is not None and not (0.0 <= r <= 1.0):
                raise ValueError("recall out of range")


@dataclass
class ClassificationReport:
    per_class_auc: list                 # None entries mark absent metrics
    supports: list                      # per-class positive counts
    class_names: list | None = None

    @property
    def macro_avg(self) -> float:
        defined = [a for a in self.per_class_auc if a is not None]
        return float(np.mean(defined)) if defined else float("nan")

    @property
    def weighted_avg(self) -> float:
        pairs = [(a, s) for a, s in zip(self.per_class_auc, self.supports)
                 if a is not None and s > 0]
        if not pairs:
            return float("nan")
        num = sum(a * s for a, s in pairs)
        den = sum(s for _, s in pairs)
        return float(num / den)


def retrieval_eval(image_feats, text_feats, subset_sizes, seed: int = 0,
                   ks=(1, 5, 10)) -> list[RetrievalReport]:
    """Seeded-subset Recall@K in both directions over global cosine scores."""
    image_feats = np.asarray(image_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    n = image_feats.shape[0]
    if text_feats.shape[0] != n:
        raise ValueError("need paired image/text features")
    reports = []
    for size in subset_sizes:
        if size > n:
            raise ValueError(f"subset size {size} exceeds split size {n}")
        if size == n:
            sub = np.arange(n)
        else:
            sub = np.sort(np.random.default_rng(seed).choice(n, size, replace=False))
        vi = image_feats[sub] / np.linalg.norm(image_feats[sub], axis=1, keepdims=True)
        ti = text_feats[sub] / np.linalg.norm(text_feats[sub], axis=1, keepdims=True)
        scores = vi @ ti.T
        truth = np.arange(size)
        for direction, sc in (("I2T", scores), ("T2I", scores.T)):
            recalls = {k: recall_at_k(sc, truth, k) for k in ks if k <= size}
            reports.append(RetrievalReport(direction=direction, subset_size=size,
                                           ks=tuple(k for k in ks if k <= size),
                                           recalls=recalls, seed=seed))
    return reports


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

def ablation_run(setting_names, base_cfg, seeds=(0,), subset_sizes=None,
                 out_path=None):
    """Train each loss setting under the same budget/seed(s) and tabulate
    Recall@K for both directions. Failed runs are recorded and skipped."""
    from dataclasses import replace
    from . import training as T

    rows = []
    for name in setting_names:
        for seed in seeds:
            cfg = replace(base_cfg, setting=name, seed=seed,
                          out_dir=os.path.join(base_cfg.out_dir, f"{name}-s{seed}"))
            try:
                corpus = T.Corpus.load(cfg.data_dir, cfg.max_len, cfg.min_count,
                                       cfg.precision)
                result = T.pretrain(cfg, corpus=corpus)
                model = T.build_model(cfg, len(corpus.vocab))
                tensors, _ = T.ckpt.load_checkpoint(result.best_checkpoint)
                T._tensors_to_state(tensors, model)
                test = corpus.splits.get("test") or corpus.splits["train"]
                v, s = T.encode_split(model, test)
                sizes = subset_sizes or [len(test)]
                reports = retrieval_eval(v.numpy(), s.numpy(), sizes, seed=seed)
            except Exception as e:  # noqa: BLE001 - per-run failures are recorded
                logger.error("ablation run %s seed %d failed: %s", name, seed, e)
                rows.append({"setting": name, "seed": seed, "error": str(e)})
                continue
            row = {"setting": name, "seed": seed}
            for rep in reports:
                for k, r in rep.recalls.items():
                    row[f"{rep.direction}@{k} ({rep.subset_size})"] = r
            rows.append(row)
    if out_path:
        with open(out_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
        with open(os.path.splitext(out_path)[0] + ".txt", "w") as f:
            f.write(format_table(rows))
    return rows


def format_table(rows) -> str:
    """Aligned plain-text table from a list of flat dicts."""
    if not rows:
        return "(no rows)\n"
    cols = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for row in rows:
        lines.append("  ".join(_fmt(row.get(c)).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
