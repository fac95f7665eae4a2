"""Image and text encoders plus the multi-label classification head.

The image encoder is a residual CNN (stem + 6 basic blocks) with a
soft-attention tap after block 5 providing region features, and global
average pooling providing the global image vector. The text encoder is a
small transformer over word embeddings with learned positions; the sentence
vector is the masked mean of the final token states. Word features are run
through 1-D convolutions of width 2 and 3 to obtain bigram/trigram phrase
features. Everything is projected into a shared feature space with layer
normalization before matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ImageEncoderConfig:
    input_size: int = 2048
    channels: tuple = (32, 64, 128, 256, 512, 512)
    # spatial stride of each residual block; the stem always downsamples x4
    block_strides: tuple = (2, 2, 2, 2, 2, 2)
    region_grid: int = 16            # regions M = region_grid ** 2
    feature_dim: int = 256
    use_soft_attention: bool = True
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != len(self.block_strides) or len(self.channels) < 2:
            raise ValueError("need matching channel/stride lists of length >= 2")
        g = self.input_size // 4
        for s in self.block_strides[:-1]:
            g //= s
        if g != self.region_grid:
            raise ValueError(
                f"strides produce a {g}x{g} region map, expected {self.region_grid}")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    @property
    def num_regions(self) -> int:
        return self.region_grid ** 2

    @classmethod
    def paper(cls, feature_dim: int = 256) -> "ImageEncoderConfig":
        return cls(feature_dim=feature_dim)

    @classmethod
    def desk(cls, feature_dim: int = 64) -> "ImageEncoderConfig":
        return cls(input_size=128, channels=(16, 32, 48, 64, 64, 64),
                   block_strides=(2, 2, 1, 1, 1, 2), region_grid=8,
                   feature_dim=feature_dim)

    @classmethod
    def micro(cls, feature_dim: int = 8) -> "ImageEncoderConfig":
        """Tiny 2-block variant for finite-difference gradient checks."""
        return cls(input_size=32, channels=(8, 8), block_strides=(2, 1),
                   region_grid=4, feature_dim=feature_dim)


@dataclass
class TextEncoderConfig:
    layers: int = 3
    heads: int = 8
    feature_dim: int = 256
    max_len: int = 160
    vocab_size: int = 1000
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.feature_dim

    @classmethod
    def desk(cls, vocab_size: int, feature_dim: int = 64,
             max_len: int = 32) -> "TextEncoderConfig":
        return cls(feature_dim=feature_dim, max_len=max_len, vocab_size=vocab_size)


class SoftAttention(nn.Module):
    """Spatial attention rescaling: softmax over the grid of a learned 1x1
    score map, output = x * (1 + g^2 * attention). A flat score map is
    therefore a near-identity (exact 2x)."""

    def __init__(self, channels: int):
        super().__init__()
        self.score = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, x):
        b, c, h, w = x.shape
        attn = torch.softmax(self.score(x).reshape(b, 1, h * w), dim=2)
        attn = attn.reshape(b, 1, h, w)
        self.last_attention = attn.detach()
        return x * (1.0 + h * w * attn)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ImageEncoder(nn.Module):
    """Residual CNN producing (global vector v, region matrix r)."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c[0]), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1))
        blocks = []
        prev = c[0]
        for ch, st in zip(c, cfg.block_strides):
            blocks.append(BasicBlock(prev, ch, st))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        tap_ch = c[-2]
        self.soft_attention = SoftAttention(tap_ch) if cfg.use_soft_attention else None
        self.region_proj = nn.Linear(tap_ch, cfg.feature_dim)
        self.region_norm = nn.LayerNorm(cfg.feature_dim)
        self.global_proj = nn.Linear(c[-1], cfg.feature_dim)

    def forward(self, image: torch.Tensor):
        if image.ndim == 3:
            image = image.unsqueeze(1)
        if image.shape[-1] != self.cfg.input_size or image.shape[-2] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {tuple(image.shape[-2:])}")
        x = self.stem(image)
        for blk in self.blocks[:-1]:
            x = blk(x)
        tap = self.soft_attention(x) if self.soft_attention is not None else x
        b, c, h, w = tap.shape
        r = tap.reshape(b, c, h * w).transpose(1, 2)          # (B, M, C_tap)
        r = self.region_norm(self.region_proj(r))
        x = self.blocks[-1](x)
        v = self.global_proj(x.mean(dim=(2, 3)))
        return v, r


class TextEncoder(nn.Module):
    """Transformer encoder producing (word matrix w, sentence vector s)."""

    def __init__(self, cfg: TextEncoderConfig, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.embed = nn.Embedding(cfg.vocab_size, cfg.feature_dim, padding_idx=pad_id)
        self.pos = nn.Embedding(cfg.max_len, cfg.feature_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.feature_dim, nhead=cfg.heads,
            dim_feedforward=cfg.ffn_dim, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.layers)
        self.word_proj = nn.Linear(cfg.feature_dim, cfg.feature_dim)
        self.word_norm = nn.LayerNorm(cfg.feature_dim)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor):
        if tokens.ndim == 1:
            tokens, mask = tokens.unsqueeze(0), mask.unsqueeze(0)
        mask = mask.bool()
        if not mask.any(dim=1).all():
            raise ValueError("all-padding text in batch")
        if tokens.shape[1] != self.cfg.max_len:
            raise ValueError(f"expected length {self.cfg.max_len}, got {tokens.shape[1]}")
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        h = self.embed(tokens) + self.pos(pos)[None]
        h = self.encoder(h, src_key_padding_mask=~mask)
        w = self.word_norm(self.word_proj(h))
        m = mask.unsqueeze(-1).to(w.dtype)
        s = (w * m).sum(dim=1) / m.sum(dim=1)
        return w, s


class PhraseExtractor(nn.Module):
    """Valid 1-D convolutions of width 2 and 3 over the word features."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.conv2 = nn.Conv1d(feature_dim, feature_dim, 2)
        self.conv3 = nn.Conv1d(feature_dim, feature_dim, 3)
        self.norm = nn.LayerNorm(feature_dim)

    def forward(self, w: torch.Tensor):
        if w.shape[-2] < 3:
            raise ValueError("need at least 3 word positions for phrase features")
        x = w.transpose(-1, -2)
        p2 = self.norm(self.conv2(x).transpose(-1, -2))
        p3 = self.norm(self.conv3(x).transpose(-1, -2))
        return p2, p3

    @staticmethod
    def phrase_masks(word_mask: torch.Tensor):
        """AND of constituent word masks, lengths N-1 and N-2."""
        m = word_mask.bool()
        m2 = m[..., :-1] & m[..., 1:]
        m3 = m2[..., :-1] & m[..., 2:]
        return m2, m3


class ClassificationHead(nn.Module):
    """Projection plus two fully connected layers to per-finding logits."""

    MODES = ("image", "text", "joint")

    def __init__(self, feature_dim: int, num_labels: int = 14,
                 mode: str = "image", hidden: int | None = None):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.mode = mode
        in_dim = 2 * feature_dim if mode == "joint" else feature_dim
        hidden = hidden or feature_dim
        self.proj = nn.Linear(in_dim, hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, num_labels)

    def forward(self, features: torch.Tensor):
        expected = self.proj.in_features
        if features.shape[-1] != expected:
            raise ValueError(f"expected feature dim {expected}, got {features.shape[-1]}")
        h = F.relu(self.proj(features))
        h = F.relu(self.fc1(h))
        return self.fc2(h)


class JointModel(nn.Module):
    """Image encoder + text encoder + phrase extractor, one shared feature dim."""

    def __init__(self, image_cfg: ImageEncoderConfig, text_cfg: TextEncoderConfig,
                 with_mlm_head: bool = False):
        super().__init__()
        if image_cfg.feature_dim != text_cfg.feature_dim:
            raise ValueError("image and text feature dims must match")
        self.image_cfg = image_cfg
        self.text_cfg = text_cfg
        self.image_encoder = ImageEncoder(image_cfg)
        self.text_encoder = TextEncoder(text_cfg)
        self.phrases = PhraseExtractor(text_cfg.feature_dim)
        self.mlm_head = (nn.Linear(text_cfg.feature_dim, text_cfg.vocab_size)
                         if with_mlm_head else None)

    @property
    def feature_dim(self) -> int:
        return self.text_cfg.feature_dim

    def forward(self, images, tokens, mask):
        v, r = self.image_encoder(images)
        w, s = self.text_encoder(tokens, mask)
        p2, p3 = self.phrases(w)
        m2, m3 = PhraseExtractor.phrase_masks(mask)
        out = {"v": v, "s": s, "r": r, "w": w, "p2": p2, "p3": p3,
               "word_mask": mask.bool(), "bigram_mask": m2, "trigram_mask": m3}
        if self.mlm_head is not None:
            out["token_logits"] = self.mlm_head(w)
        return out

    def assert_finite_parameters(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ValueError(f"non-finite parameter: {name}")
