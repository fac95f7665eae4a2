"""Pretraining and fine-tuning loops.

Pretraining optimizes the combined matching objective with AdamW and a step
learning-rate schedule (drop by a fixed factor at a fixed epoch). All
randomness (shuffling, negative sampling, augmentation) is derived from the
run seed plus epoch/step counters, so interrupted runs resume exactly and
seeded runs are reproducible.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import data as D
from .encoders import (ClassificationHead, ImageEncoderConfig, JointModel,
                       TextEncoderConfig)
from .kernels import LossConfig
from .losses import (AblationSetting, attention_matching_matrix, cetm_loss,
                     pos_neg_balance, weighted_bce)

logger = logging.getLogger(__name__)


class NumericError(Exception):
    """Raised when training hits a non-finite loss."""


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = ""
    batch_size: int = 32
    max_epochs: int = 30
    base_lr: float = 1e-4
    lr_drop_factor: float = 10.0
    lr_drop_epoch: int = 20
    weight_decay: float = 1e-4
    seed: int = 0
    precision: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    setting: str = "CETM_wps"
    preset: str = "paper"
    feature_dim: int = 256
    max_len: int = 160
    min_count: int = 3
    augment: bool = False
    checkpoint_every_epochs: int = 1
    mlm_weight: float = 0.0

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        AblationSetting.from_name(self.setting)  # validate early

    def image_cfg(self) -> ImageEncoderConfig:
        if self.preset == "desk":
            return ImageEncoderConfig.desk(self.feature_dim)
        return ImageEncoderConfig.paper(self.feature_dim)

    def text_cfg(self, vocab_size: int) -> TextEncoderConfig:
        return TextEncoderConfig(feature_dim=self.feature_dim, max_len=self.max_len,
                                 vocab_size=vocab_size)

    def fingerprint(self) -> str:
        """Digest of the fields that determine the training trajectory.

        Bookkeeping fields (paths, epoch budget, checkpoint cadence) are
        excluded so a run can be resumed into a longer schedule or from a
        relocated directory.
        """
        cfg = asdict(self)
        for key in ("data_dir", "out_dir", "max_epochs", "checkpoint_every_epochs"):
            cfg.pop(key)
        return ckpt.config_fingerprint(cfg)


def desk_train_config(data_dir, out_dir, seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale preset: 12 epochs with the LR drop at 8 (same 2:1 ratio as
    the full recipe), feature dim 64, short reports, higher base LR so the
    tiny budget converges."""
    kw = dict(data_dir=str(data_dir), out_dir=str(out_dir), seed=seed,
              preset="desk", feature_dim=64, max_len=64, max_epochs=12,
              lr_drop_epoch=8, base_lr=3e-3, batch_size=32)
    kw.update(overrides)
    return TrainConfig(**kw)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base LR, divided by the drop factor from lr_drop_epoch on."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.lr_drop_epoch:
        return cfg.base_lr
    return cfg.base_lr / cfg.lr_drop_factor


# ---------------------------------------------------------------------------
# corpus access
# ---------------------------------------------------------------------------

@dataclass
class Split:
    images: torch.Tensor     # (n, S, S) in [-1, 1]
    tokens: torch.Tensor     # (n, N) int64
    masks: torch.Tensor      # (n, N) bool
    labels: torch.Tensor     # (n, L) int64

    def __len__(self):
        return self.images.shape[0]


class Corpus:
    """In-memory view of a generated corpus directory (desk scale)."""

    def __init__(self, data_dir, vocab: D.Vocabulary, max_len: int,
                 dtype=torch.float32):
        self.data_dir = os.fspath(data_dir)
        self.vocab = vocab
        self.max_len = max_len
        self.dtype = dtype
        self.splits: dict[str, Split] = {}

    @classmethod
    def load(cls, data_dir, max_len: int, min_count: int = 3,
             precision: int = 32) -> "Corpus":
        data_dir = os.fspath(data_dir)
        vocab_path = os.path.join(data_dir, "vocab.tsv")
        if os.path.exists(vocab_path):
            vocab = D.Vocabulary.load(vocab_path)
        else:
            train = D.read_manifest(os.path.join(data_dir, "manifest-train.jsonl"))
            vocab = D.Vocabulary.build((s.report_text for s in train), min_count)
            vocab.save(vocab_path)
        corpus = cls(data_dir, vocab, max_len,
                     torch.float64 if precision == 64 else torch.float32)
        for split in ("train", "val", "test"):
            path = os.path.join(data_dir, f"manifest-{split}.jsonl")
            if os.path.exists(path):
                corpus.splits[split] = corpus._load_split(D.read_manifest(path))
        if "train" not in corpus.splits:
            raise D.DataError(f"no training manifest under {data_dir}")
        return corpus

    def _load_split(self, samples) -> Split:
        imgs, toks, masks, labels = [], [], [], []
        size = None
        for s in samples:
            raw = D.load_image(os.path.join(self.data_dir, s.image_ref))
            size = size or raw.shape[0]
            imgs.append(D.preprocess_image(raw, size))
            ids, m = D.tokenize(s.report_text, self.vocab, self.max_len)
            toks.append(ids)
            masks.append(m)
            labels.append(np.asarray(s.labels, dtype=np.int64))
        return Split(images=torch.tensor(np.stack(imgs), dtype=self.dtype),
                     tokens=torch.tensor(np.stack(toks)),
                     masks=torch.tensor(np.stack(masks)),
                     labels=torch.tensor(np.stack(labels)))


# ---------------------------------------------------------------------------
# model/optimizer state <-> checkpoint tensors
# ---------------------------------------------------------------------------

def _state_to_tensors(model: torch.nn.Module, optim=None) -> dict:
    tensors = {f"model/{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    if optim is not None:
        names = [n for n, _ in model.named_parameters()]
        params = [p for _, p in model.named_parameters()]
        for name, p in zip(names, params):
            st = optim.state.get(p)
            if not st:
                continue
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"].cpu().numpy()
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            tensors[f"optim/{name}/step"] = np.asarray(
                st["step"].cpu() if torch.is_tensor(st["step"]) else st["step"],
                dtype=np.float64)
    return tensors


def _tensors_to_state(tensors: dict, model: torch.nn.Module, optim=None,
                      dtype=None):
    state = {}
    for k, v in tensors.items():
        if k.startswith("model/"):
            t = torch.from_numpy(np.ascontiguousarray(v))
            ref = model.state_dict()[k[6:]]
            state[k[6:]] = t.to(ref.dtype)
    model.load_state_dict(state)
    if optim is not None:
        for name, p in model.named_parameters():
            key = f"optim/{name}/exp_avg"
            if key not in tensors:
                continue
            optim.state[p] = {
                "step": torch.tensor(
                    float(np.asarray(tensors[f"optim/{name}/step"]).ravel()[0])),
                "exp_avg": torch.from_numpy(
                    np.ascontiguousarray(tensors[key])).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(
                    tensors[f"optim/{name}/exp_avg_sq"])).to(p.dtype),
            }


def save_run_checkpoint(path, model, optim, cfg_fingerprint: str,
                        epoch: int, step: int, extra: dict | None = None):
    meta = {"fingerprint": cfg_fingerprint, "epoch": epoch, "step": step}
    if extra:
        meta.update(extra)
    ckpt.save_checkpoint(path, _state_to_tensors(model, optim), meta)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _step_seed(seed: int, epoch: int, step: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + step) % (2 ** 31)


def global_similarity(v: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarity between image and sentence vectors."""
    return F.normalize(v, dim=1) @ F.normalize(s, dim=1).T


def compute_level_scores(out: dict, setting: AblationSetting, cfg: LossConfig):
    """Score matrices for every enabled matching level of a forward pass."""
    scores = {}
    if "sentence" in setting.levels:
        scores["sentence"] = global_similarity(out["v"], out["s"])
    pairs = {"word": ("w", "word_mask"), "bigram": ("p2", "bigram_mask"),
             "trigram": ("p3", "trigram_mask")}
    for lv, (feat, mask) in pairs.items():
        if lv in setting.levels:
            scores[lv] = attention_matching_matrix(
                out["r"], out[feat], out[mask], cfg.gamma1, cfg.gamma2)
    return scores


def encode_split(model: JointModel, split: Split, batch_size: int = 64):
    """Global (v, s) features for a whole split, eval mode, no grad."""
    model.eval()
    vs, ss = [], []
    with torch.no_grad():
        for i in range(0, len(split), batch_size):
            out = model(split.images[i:i + batch_size],
                        split.tokens[i:i + batch_size],
                        split.masks[i:i + batch_size])
            vs.append(out["v"])
            ss.append(out["s"])
    model.train()
    return torch.cat(vs), torch.cat(ss)


def _retrieval_r1(model: JointModel, split: Split) -> tuple[float, float]:
    from .evaluation import recall_at_k
    v, s = encode_split(model, split)
    scores = global_similarity(v, s).cpu().numpy()
    truth = np.arange(scores.shape[0])
    return (recall_at_k(scores, truth, 1), recall_at_k(scores.T, truth, 1))


@dataclass
class PretrainResult:
    run_dir: str
    last_checkpoint: str
    best_checkpoint: str
    metrics: list
    aborted: bool = False


class MetricLog:
    """Line-delimited metric records, one JSON object per line."""

    def __init__(self, path, resume=False):
        self.path = path
        self.records = []
        if resume and os.path.exists(path):
            with open(path) as f:
                self.records = [json.loads(x) for x in f if x.strip()]
        self._f = open(path, "a" if resume else "w")

    def log(self, **rec):
        self.records.append(rec)
        self._f.write(json.dumps(rec) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _make_deterministic(precision: int):
    if precision == 64:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig, vocab_size: int) -> JointModel:
    torch.manual_seed(cfg.seed)
    model = JointModel(cfg.image_cfg(), cfg.text_cfg(vocab_size),
                       with_mlm_head=cfg.mlm_weight > 0)
    if cfg.precision == 64:
        model.double()
    return model


def pretrain(cfg: TrainConfig, corpus: Corpus | None = None,
             resume_from: str | None = None) -> PretrainResult:
    """Train the joint matching model; returns checkpoint paths and metrics.

    Best checkpoint selection is by validation R@1 sum (both directions); the
    test split is used when no validation split exists.
    """
    _make_deterministic(cfg.precision)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if corpus is None:
        corpus = Corpus.load(cfg.data_dir, cfg.max_len, cfg.min_count, cfg.precision)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)

    setting = AblationSetting.from_name(cfg.setting)
    fingerprint = cfg.fingerprint()
    model = build_model(cfg, len(corpus.vocab))
    optim = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr,
                              weight_decay=cfg.weight_decay,
                              betas=(0.9, 0.999), eps=1e-8)
    train = corpus.splits["train"]
    val = corpus.splits.get("val") or corpus.splits.get("test") or train

    last_path = os.path.join(cfg.out_dir, "last.ckpt")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    start_epoch, global_step, best_metric = 0, 0, -1.0
    resume = resume_from is not None
    if resume:
        tensors, meta = ckpt.load_checkpoint(resume_from, fingerprint)
        _tensors_to_state(tensors, model, optim)
        start_epoch = meta["epoch"] + 1
        global_step = meta["step"]
        best_metric = meta.get("best_metric", -1.0)
    log = MetricLog(os.path.join(cfg.out_dir, "metrics.jsonl"), resume=resume)

    n = len(train)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise D.DataError("training split smaller than one batch")
    aborted = False
    model.train()
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = lr_schedule(epoch, cfg)
            for g in optim.param_groups:
                g["lr"] = lr
            perm = np.random.default_rng(_step_seed(cfg.seed, epoch, 0)).permutation(n)
            epoch_loss = 0.0
            for b in range(steps_per_epoch):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                try:
                    out = model(train.images[idx], train.tokens[idx],
                                train.masks[idx])
                    scores = compute_level_scores(out, setting, cfg.loss)
                    total, breakdown = cetm_loss(
                        scores["sentence"] if "sentence" in scores else
                        next(iter(scores.values())),
                        scores, cfg.loss, setting,
                        rng_seed=_step_seed(cfg.seed, epoch, b + 1))
                except ValueError as e:
                    logger.error("loss failed at epoch %d step %d: %s",
                                 epoch, b, e)
                    raise NumericError(str(e)) from e
                if not torch.isfinite(total):
                    logger.error("non-finite loss at epoch %d step %d", epoch, b)
                    aborted = True
                    raise NumericError("non-finite training loss")
                optim.zero_grad()
                total.backward()
                optim.step()
                global_step += 1
                epoch_loss += float(total.detach())
                rec = {"epoch": epoch, "step": global_step, "lr": lr,
                       "loss/total": float(total.detach())}
                rec.update({f"loss/{k}": v for k, v in breakdown.items()})
                log.log(**rec)
            r1_i2t, r1_t2i = _retrieval_r1(model, val)
            log.log(epoch=epoch, step=global_step, metric="val_r1",
                    i2t=r1_i2t, t2i=r1_t2i,
                    mean_train_loss=epoch_loss / steps_per_epoch)
            if (epoch + 1) % cfg.checkpoint_every_epochs == 0 or epoch == cfg.max_epochs - 1:
                save_run_checkpoint(last_path, model, optim, fingerprint,
                                    epoch, global_step,
                                    {"best_metric": best_metric})
            if r1_i2t + r1_t2i > best_metric:
                best_metric = r1_i2t + r1_t2i
                save_run_checkpoint(best_path, model, optim, fingerprint,
                                    epoch, global_step,
                                    {"best_metric": best_metric})
    except NumericError:
        aborted = True
    finally:
        log.close()
    if not os.path.exists(best_path) and os.path.exists(last_path):
        best_path = last_path
    return PretrainResult(run_dir=cfg.out_dir, last_checkpoint=last_path,
                          best_checkpoint=best_path, metrics=log.records,
                          aborted=aborted)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    data_dir: str = ""
    out_dir: str = ""
    mode: str = "image"                  # image | text | joint
    init_from: str = "scratch"           # "scratch" or a checkpoint path
    head_lr: float = 1e-4
    backbone_lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0
    precision: int = 32
    preset: str = "paper"
    feature_dim: int = 256
    max_len: int = 160
    num_labels: int = 14

    @classmethod
    def paper_scratch(cls, **kw):
        return cls(init_from="scratch", head_lr=1e-4, backbone_lr=1e-4,
                   epochs=20, **kw)

    @classmethod
    def paper_finetune(cls, checkpoint_path, **kw):
        return cls(init_from=str(checkpoint_path), head_lr=1e-4,
                   backbone_lr=1e-5, epochs=10, **kw)

    @classmethod
    def desk_scratch(cls, **kw):
        """Short equal-budget baseline for desk-scale comparisons."""
        return cls(init_from="scratch", head_lr=3e-4, backbone_lr=3e-4,
                   epochs=2, preset="desk", feature_dim=64, max_len=64, **kw)

    @classmethod
    def desk_finetune(cls, checkpoint_path, **kw):
        """Same budget and rates as desk_scratch, started from a checkpoint."""
        return cls(init_from=str(checkpoint_path), head_lr=3e-4,
                   backbone_lr=3e-4, epochs=2, preset="desk", feature_dim=64,
                   max_len=64, **kw)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(data_dir=self.data_dir, preset=self.preset,
                           feature_dim=self.feature_dim, max_len=self.max_len,
                           precision=self.precision, seed=self.seed)


@dataclass
class FinetuneResult:
    run_dir: str
    checkpoint: str
    val_auc: list            # per-epoch macro AUC
    final_macro_auc: float


def _head_features(model: JointModel, split: Split, idx, mode: str):
    images, tokens, masks = split.images[idx], split.tokens[idx], split.masks[idx]
    if mode == "image":
        v, _ = model.image_encoder(images)
        return v
    if mode == "text":
        _, s = model.text_encoder(tokens, masks)
        return s
    v, _ = model.image_encoder(images)
    _, s = model.text_encoder(tokens, masks)
    return torch.cat([v, s], dim=1)


def _macro_auc(head, model, split: Split, mode: str, batch_size: int) -> float:
    from .evaluation import auc
    model.eval()
    head.eval()
    logits = []
    with torch.no_grad():
        for i in range(0, len(split), batch_size):
            feats = _head_features(model, split, slice(i, i + batch_size), mode)
            logits.append(head(feats))
    model.train()
    head.train()
    scores = torch.cat(logits).cpu().numpy()
    labels = split.labels.cpu().numpy()
    per_class = [auc(scores[:, k], labels[:, k]) for k in range(labels.shape[1])]
    defined = [a for a in per_class if a is not None]
    return float(np.mean(defined)) if defined else float("nan")


def finetune_classifier(cfg: FinetuneConfig,
                        corpus: Corpus | None = None) -> FinetuneResult:
    """Train the multi-label head (optionally on a pretrained backbone).

    With epochs=0 this is an evaluation-only pass reporting baseline AUC.
    """
    _make_deterministic(cfg.precision)
    os.makedirs(cfg.out_dir, exist_ok=True)
    base = cfg.train_cfg()
    if corpus is None:
        corpus = Corpus.load(cfg.data_dir, cfg.max_len, precision=cfg.precision)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)

    model = build_model(base, len(corpus.vocab))
    if cfg.init_from != "scratch":
        tensors, meta = ckpt.load_checkpoint(cfg.init_from)
        _tensors_to_state(tensors, model)
    torch.manual_seed(cfg.seed + 1)
    head = ClassificationHead(cfg.feature_dim, cfg.num_labels, cfg.mode)
    if cfg.precision == 64:
        head.double()

    train = corpus.splits["train"]
    val = corpus.splits.get("val") or corpus.splits.get("test") or train
    if train.labels.shape[1] != cfg.num_labels:
        raise D.DataError(
            f"label dimension {train.labels.shape[1]} does not match head "
            f"({cfg.num_labels})")
    pos_w = pos_neg_balance(train.labels.cpu().numpy())

    optim = torch.optim.AdamW(
        [{"params": head.parameters(), "lr": cfg.head_lr},
         {"params": model.parameters(), "lr": cfg.backbone_lr}],
        weight_decay=cfg.weight_decay)
    log = MetricLog(os.path.join(cfg.out_dir, "metrics.jsonl"))
    n = len(train)
    steps = max(n // cfg.batch_size, 1)
    val_aucs = []
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(_step_seed(cfg.seed, epoch, 0)).permutation(n)
        for b in range(steps):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            feats = _head_features(model, train, idx, cfg.mode)
            loss = weighted_bce(head(feats), train.labels[idx].to(feats.dtype),
                                pos_weights=pos_w)
            optim.zero_grad()
            loss.backward()
            optim.step()
            log.log(epoch=epoch, step=epoch * steps + b, metric="bce",
                    value=float(loss.detach()))
        a = _macro_auc(head, model, val, cfg.mode, cfg.batch_size)
        val_aucs.append(a)
        log.log(epoch=epoch, metric="val_macro_auc", value=a)
    final = val_aucs[-1] if val_aucs else _macro_auc(head, model, val, cfg.mode,
                                                    cfg.batch_size)
    log.close()
    out_path = os.path.join(cfg.out_dir, "classifier.ckpt")
    tensors = {f"model/{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    tensors.update({f"head/{k}": v.detach().cpu().numpy()
                    for k, v in head.state_dict().items()})
    ckpt.save_checkpoint(out_path, tensors,
                         {"fingerprint": ckpt.config_fingerprint(asdict(cfg)),
                          "epoch": cfg.epochs - 1, "step": cfg.epochs * steps,
                          "final_macro_auc": final})
    return FinetuneResult(run_dir=cfg.out_dir, checkpoint=out_path,
                          val_auc=val_aucs, final_macro_auc=final)
