"""Corpus ingestion and the synthetic paired-data generator.

Covers report section extraction, word-level vocabulary building,
tokenization, image preprocessing/augmentation, CheXpert-style label merging
and line-delimited manifest I/O. The synthetic generator renders images and
reports from a shared latent vector so that desk-scale training has a real
cross-modal signal to learn.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image, ImageEnhance

logger = logging.getLogger(__name__)

PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
RESERVED = {PAD_ID: "<pad>", UNK_ID: "<unk>", MASK_ID: "<mask>"}

MANIFEST_SCHEMA = "manifest/v1"
VOCAB_SCHEMA = "vocab/v1"


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# report sections
# ---------------------------------------------------------------------------

TARGET_SECTIONS = ("impression", "impressions", "findings",
                   "conclusion", "recommendation", "recommendations")
FALLBACK_SECTION = "final report"

_HEADER_RE = re.compile(r"\b([A-Z][A-Z ]{2,}?)\s*:")


def extract_sections(raw_report: str) -> str:
    """Concatenate the impression/findings/conclusion/recommendation sections
    in document order; fall back to the FINAL REPORT section; empty string if
    no recognized header exists (caller should exclude the sample)."""
    headers = list(_HEADER_RE.finditer(raw_report))
    sections = []
    for k, h in enumerate(headers):
        name = " ".join(h.group(1).lower().split())
        end = headers[k + 1].start() if k + 1 < len(headers) else len(raw_report)
        sections.append((name, raw_report[h.end():end].strip()))
    picked = [body for name, body in sections if name in TARGET_SECTIONS and body]
    if not picked:
        picked = [body for name, body in sections if name == FALLBACK_SECTION and body]
    if not picked:
        logger.warning("extract_sections: no recognized section, sample excluded")
        return ""
    return " ".join(picked)


# ---------------------------------------------------------------------------
# text normalization, vocabulary, tokenization
# ---------------------------------------------------------------------------

def default_normalizer(text: str) -> str:
    """Lowercase, isolate punctuation as separate tokens, collapse whitespace."""
    text = text.lower()
    text = re.sub(r"([^\w\s])", r" \1 ", text)
    return " ".join(text.split())


class Vocabulary:
    """Word-level vocabulary with a frequency threshold.

    Tokens occurring at least ``min_count`` times get dense ids starting at 3
    (0/1/2 are pad/unk/mask), assigned by descending frequency with
    lexicographic tie-break.
    """

    def __init__(self, min_count: int = 3):
        self.min_count = min_count
        self.token_to_id: dict[str, int] = {}
        self.id_to_token: list[str] = [RESERVED[i] for i in range(3)]
        self.counts: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    @classmethod
    def build(cls, corpus, min_count: int = 3,
              normalizer=default_normalizer) -> "Vocabulary":
        """Count whitespace tokens of the normalized corpus and assign ids."""
        vocab = cls(min_count)
        counts: dict[str, int] = {}
        empty = True
        for text in corpus:
            empty = False
            for tok in normalizer(text).split():
                counts[tok] = counts.get(tok, 0) + 1
        if empty:
            raise DataError("cannot build a vocabulary from an empty corpus")
        kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        for tok in kept:
            vocab.token_to_id[tok] = len(vocab.id_to_token)
            vocab.id_to_token.append(tok)
            vocab.counts[tok] = counts[tok]
        return vocab

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# {VOCAB_SCHEMA} min_count={self.min_count}\n")
            for tok in self.id_to_token[3:]:
                f.write(f"{tok}\t{self.counts[tok]}\t{self.token_to_id[tok]}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            head = f.readline()
            if VOCAB_SCHEMA not in head:
                raise DataError(f"not a vocabulary file: {path}")
            m = re.search(r"min_count=(\d+)", head)
            vocab = cls(int(m.group(1)) if m else 3)
            for line in f:
                tok, count, idx = line.rstrip("\n").split("\t")
                if int(idx) != len(vocab.id_to_token):
                    raise DataError("vocabulary ids are not dense")
                vocab.token_to_id[tok] = int(idx)
                vocab.id_to_token.append(tok)
                vocab.counts[tok] = int(count)
        return vocab


def tokenize(text: str, vocab: Vocabulary, max_len: int = 160,
             normalizer=default_normalizer):
    """Map text to (ids, mask), padded/truncated to exactly max_len."""
    tokens = normalizer(text).split()
    if not tokens:
        logger.warning("tokenize: empty text, producing all-padding output")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    for i, tok in enumerate(tokens[:max_len]):
        ids[i] = vocab.lookup(tok)
        mask[i] = True
    return ids, mask


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.token(int(i)) for i in ids if int(i) != PAD_ID)


# ---------------------------------------------------------------------------
# image preprocessing
# ---------------------------------------------------------------------------

def _center_square(arr: np.ndarray, size: int) -> np.ndarray:
    """Center crop or zero-pad to size x size."""
    h, w = arr.shape
    out = np.zeros((size, size), dtype=arr.dtype)
    top = max((h - size) // 2, 0)
    left = max((w - size) // 2, 0)
    oh = max((size - h) // 2, 0)
    ow = max((size - w) // 2, 0)
    ch, cw = min(h, size), min(w, size)
    out[oh:oh + ch, ow:ow + cw] = arr[top:top + ch, left:left + cw]
    return out


def preprocess_image(raw, target_size: int, augment: bool = False,
                     seed: int = 0, max_pixel: float = 255.0) -> np.ndarray:
    """Square-crop/pad, map [0, max_pixel] linearly onto [-1, 1], optionally
    apply seeded crop/rotation/jitter augmentation."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D raster, got shape {arr.shape}")
    arr = _center_square(arr, target_size)
    if augment:
        rng = np.random.default_rng(seed)
        img = Image.fromarray(np.clip(arr, 0, max_pixel).astype(np.uint8))
        # random crop within +-5% scale, then back to target size
        scale = 1.0 - 0.05 * rng.random()
        cs = max(int(round(target_size * scale)), 1)
        x0 = rng.integers(0, target_size - cs + 1)
        y0 = rng.integers(0, target_size - cs + 1)
        img = img.crop((x0, y0, x0 + cs, y0 + cs)).resize(
            (target_size, target_size), Image.BILINEAR)
        img = img.rotate(rng.uniform(-10, 10), Image.BILINEAR)
        img = ImageEnhance.Brightness(img).enhance(1.0 + rng.uniform(-0.1, 0.1))
        img = ImageEnhance.Contrast(img).enhance(1.0 + rng.uniform(-0.1, 0.1))
        arr = np.asarray(img, dtype=np.float64)
    return 2.0 * arr / max_pixel - 1.0


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def merge_labels(row, num_labels: int = 14) -> np.ndarray:
    """CheXpert merge rule: 1 is positive; -1, 0 and missing are negative."""
    if len(row) != num_labels:
        raise DataError(f"expected {num_labels} label values, got {len(row)}")
    out = np.zeros(num_labels, dtype=np.int64)
    for i, val in enumerate(row):
        if val is None or (isinstance(val, str) and val.strip() == ""):
            continue
        if isinstance(val, float) and np.isnan(val):
            continue
        v = float(val)
        if v not in (1.0, 0.0, -1.0):
            raise DataError(f"malformed label value {val!r} at position {i}")
        out[i] = 1 if v == 1.0 else 0
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class SampleManifest:
    sample_id: str
    image_ref: str
    report_text: str
    token_ids: list
    labels: list
    split: str

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise DataError(f"unknown split {self.split!r}")


def write_manifest(path, samples):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"schema": MANIFEST_SCHEMA}) + "\n")
        for s in samples:
            f.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def read_manifest(path):
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    samples = []
    with open(path, encoding="utf-8") as f:
        head = json.loads(f.readline())
        if head.get("schema") != MANIFEST_SCHEMA:
            raise DataError(f"unsupported manifest schema in {path}")
        for line in f:
            if line.strip():
                samples.append(SampleManifest(**json.loads(line)))
    return samples


# ---------------------------------------------------------------------------
# synthetic paired corpus
# ---------------------------------------------------------------------------

# word inventory for the report templates: one subject noun per latent
# dimension, plus magnitude/direction words bucketizing the latent value
_SUBJECTS = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta",
             "theta", "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron", "pi")
_MAGNITUDE = {True: "markedly", False: "mildly"}
_DIRECTION = {True: "elevated", False: "reduced"}


@dataclass
class SyntheticSpec:
    num_samples: int = 200
    latent_dim: int = 8
    image_size: int = 128
    noise_level: float = 0.05
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.latent_dim > len(_SUBJECTS):
            raise DataError(f"latent_dim must be <= {len(_SUBJECTS)}")


def _blob_grid(latent_dim: int, size: int):
    """Fixed blob centers and radius for each latent dimension."""
    side = int(np.ceil(np.sqrt(latent_dim)))
    step = size / side
    centers = []
    for k in range(latent_dim):
        cy = (k // side + 0.5) * step
        cx = (k % side + 0.5) * step
        centers.append((cy, cx))
    sigma = step / 4.0
    return np.array(centers), sigma


def render_image(z: np.ndarray, image_size: int, noise_level: float,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic rendering of a latent vector: one amplitude-coded
    Gaussian blob per dimension on a mid-gray background, plus seeded noise.
    Returns a uint8 (size x size) graymap."""
    centers, sigma = _blob_grid(len(z), image_size)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    img = np.full((image_size, image_size), 0.5)
    for zk, (cy, cx) in zip(z, centers):
        g = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))
        img += 0.45 * zk * g
    if noise_level > 0 and rng is not None:
        img += rng.normal(0.0, noise_level, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def render_report(z: np.ndarray) -> str:
    """Template report whose word choices encode sign and magnitude buckets."""
    parts = []
    for k, zk in enumerate(z):
        parts.append(f"the {_SUBJECTS[k]} signal is "
                     f"{_MAGNITUDE[abs(zk) >= 0.5]} {_DIRECTION[zk > 0]} .")
    return " ".join(parts)


def synthetic_corpus_text(latent_dim: int = 8):
    """Every sentence the generator can emit; handy for vocabulary building."""
    texts = []
    for k in range(latent_dim):
        for mag in (0.9, 0.1):
            for sign in (1, -1):
                z = np.zeros(latent_dim)
                z[k] = sign * mag
                texts.append(render_report(z))
    return texts


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[SampleManifest]:
    """Write a paired corpus (PGM images, report text files, manifest).

    Labels are the thresholded latent signs; image and report share z."""
    out_dir = os.fspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    rep_dir = os.path.join(out_dir, "reports")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(rep_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(spec.num_samples):
        z = rng.uniform(-1.0, 1.0, spec.latent_dim)
        img = render_image(z, spec.image_size, spec.noise_level, rng)
        report = render_report(z)
        labels = (z > 0).astype(int).tolist()
        sid = f"{spec.split}-{i:05d}"
        img_path = os.path.join(img_dir, sid + ".pgm")
        Image.fromarray(img).save(img_path)
        with open(os.path.join(rep_dir, sid + ".txt"), "w") as f:
            f.write(report + "\n")
        samples.append(SampleManifest(
            sample_id=sid, image_ref=os.path.join("images", sid + ".pgm"),
            report_text=report, token_ids=[], labels=labels, split=spec.split))
    write_manifest(os.path.join(out_dir, f"manifest-{spec.split}.jsonl"), samples)
    return samples


def load_image(path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("L"))
    except OSError as e:
        raise DataError(f"unreadable image {path}: {e}") from e
