"""Dual-encoder backbone: vision transformer + causal text transformer.

Self-contained CLIP-style architecture so desk-scale runs need no external
weights. The text transformer width equals the joint embedding dimension d,
which is what lets converter outputs be spliced into the input token
sequence as pseudo-words. Weights load from a local ``.pt`` file when given;
otherwise the named registry config is built with a seeded random init.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .tokenizer import ByteTokenizer


@dataclass(frozen=True)
class BackboneConfig:
    backbone_id: str
    embed_dim: int
    context_length: int
    image_resolution: int
    patch_size: int
    vision_width: int
    vision_layers: int
    vision_heads: int
    text_layers: int
    text_heads: int
    image_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    image_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    init_seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.context_length < 5:
            raise ConfigError("context_length must leave room for prompt + pseudo-word + text")
        if self.image_resolution % self.patch_size != 0:
            raise ConfigError(
                f"resolution {self.image_resolution} not divisible by patch {self.patch_size}"
            )

    @property
    def patch_count(self) -> int:
        side = self.image_resolution // self.patch_size
        return side * side

    @property
    def text_width(self) -> int:
        # pseudo-word tokens live in the text transformer's input space
        return self.embed_dim


BACKBONES: dict[str, BackboneConfig] = {
    # unit-test scale
    "tiny": BackboneConfig(
        backbone_id="tiny", embed_dim=48, context_length=77, image_resolution=32,
        patch_size=8, vision_width=48, vision_layers=2, vision_heads=2,
        text_layers=2, text_heads=2,
    ),
    # desk-scale default: small enough to pretrain and finetune on CPU
    "mini": BackboneConfig(
        backbone_id="mini", embed_dim=96, context_length=77, image_resolution=48,
        patch_size=8, vision_width=96, vision_layers=3, vision_heads=4,
        text_layers=3, text_heads=4,
    ),
    # paper-class configurations; random init unless local weights are supplied
    "small-512": BackboneConfig(
        backbone_id="small-512", embed_dim=512, context_length=77, image_resolution=224,
        patch_size=32, vision_width=768, vision_layers=12, vision_heads=12,
        text_layers=12, text_heads=8,
    ),
    "vit-l-14": BackboneConfig(
        backbone_id="vit-l-14", embed_dim=768, context_length=77, image_resolution=224,
        patch_size=14, vision_width=1024, vision_layers=24, vision_heads=16,
        text_layers=12, text_heads=12,
    ),
}


class ResidualBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 4),
            nn.GELU(),
            nn.Linear(width * 4, width),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln_1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False, attn_mask=attn_mask)
        x = x + attn_out
        x = x + self.mlp(self.ln_2(x))
        return x


class VisionTower(nn.Module):
    """ViT producing a pooled global feature and per-patch features, both
    projected into the joint embedding space."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.vision_width
        self.patch_embed = nn.Conv2d(3, width, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size, bias=False)
        self.class_token = nn.Parameter(torch.zeros(width))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.patch_count + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.blocks = nn.ModuleList(
            ResidualBlock(width, cfg.vision_heads) for _ in range(cfg.vision_layers)
        )
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Linear(width, cfg.embed_dim, bias=False)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = images.shape[0]
        x = self.patch_embed(images)                      # B,W,h,w
        x = x.flatten(2).transpose(1, 2)                  # B,T,W
        cls = self.class_token.expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        x = self.ln_post(x)
        feats = self.proj(x)                              # B,T+1,d
        return feats[:, 0], feats[:, 1:]


class TextTower(nn.Module):
    """Causal transformer over word-token embeddings; the output feature is
    the projected hidden state at the end-of-sequence position."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        width = cfg.text_width
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.context_length, width))
        self.blocks = nn.ModuleList(
            ResidualBlock(width, cfg.text_heads) for _ in range(cfg.text_layers)
        )
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Linear(width, cfg.embed_dim, bias=False)

    def forward(self, token_embs: torch.Tensor, eot_index: torch.Tensor) -> torch.Tensor:
        """token_embs: (B, L, width) already framed with BOS/EOS rows;
        eot_index: (B,) position of the EOS row per item."""
        b, length, _ = token_embs.shape
        if length > self.cfg.context_length:
            raise ConfigError(
                f"sequence length {length} exceeds context budget {self.cfg.context_length}"
            )
        x = token_embs + self.pos_embed[:length]
        mask = torch.full((length, length), float("-inf"), device=x.device)
        mask = torch.triu(mask, diagonal=1)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        pooled = x[torch.arange(b, device=x.device), eot_index]
        return self.proj(pooled)


class DualEncoder(nn.Module):
    """Joint image/text encoder pair sharing one embedding space."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = ByteTokenizer()
        with torch.random.fork_rng():
            torch.manual_seed(cfg.init_seed)
            self.visual = VisionTower(cfg)
            self.text = TextTower(cfg, self.tokenizer.vocab_size)
            self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
            self._init_weights()

    def _init_weights(self):
        # linear/conv/attention keep torch defaults (scaled to fan-in), which
        # train markedly faster at this width than flat small-std normals
        for module in self.modules():
            if isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        nn.init.normal_(self.visual.class_token, std=0.02)
        nn.init.normal_(self.visual.pos_embed, std=0.01)
        nn.init.normal_(self.text.pos_embed, std=0.01)

    # ---- image side ----

    def encode_images(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputError(f"expected (B,3,H,W) image batch, got {tuple(images.shape)}")
        res = self.cfg.image_resolution
        if images.shape[2] != res or images.shape[3] != res:
            raise ConfigError(
                f"backbone {self.cfg.backbone_id} expects {res}x{res} input, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        if not torch.isfinite(images).all():
            raise InputError("image batch contains NaN/Inf values")
        return self.visual(images)

    # ---- text side ----

    def embed_token_ids(self, ids: list[int]) -> torch.Tensor:
        idx = torch.tensor(ids, dtype=torch.long)
        return self.text.token_embed(idx)

    def bos_embedding(self) -> torch.Tensor:
        return self.text.token_embed.weight[self.tokenizer.bos_id]

    def eos_embedding(self) -> torch.Tensor:
        return self.text.token_embed.weight[self.tokenizer.eos_id]

    def encode_embedded(self, sequences: list[torch.Tensor]) -> torch.Tensor:
        """Frame each (L_i, width) embedding sequence with BOS/EOS, pad to the
        batch max and pool at the per-item EOS position. Returns (B, d)."""
        budget = self.cfg.context_length - 2
        for seq in sequences:
            if seq.shape[0] > budget:
                raise ConfigError(
                    f"sequence of {seq.shape[0]} tokens exceeds context budget {budget}"
                )
        bos = self.bos_embedding()
        eos = self.eos_embedding()
        framed = [torch.cat([bos[None], seq, eos[None]], dim=0) for seq in sequences]
        eot_index = torch.tensor([f.shape[0] - 1 for f in framed], dtype=torch.long)
        max_len = int(eot_index.max().item()) + 1
        padded = torch.zeros(len(framed), max_len, self.cfg.text_width,
                             dtype=framed[0].dtype)
        for i, f in enumerate(framed):
            padded[i, : f.shape[0]] = f
        return self.text(padded, eot_index)

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        """Reference text pipeline: tokenize, pad to full context, encode.
        Used as the equivalence oracle for the embed-then-encode path."""
        rows, eots = [], []
        for t in texts:
            ids = self.tokenizer.encode(t)
            if len(ids) > self.cfg.context_length - 2:
                ids = ids[: self.cfg.context_length - 2]
            full = [self.tokenizer.bos_id] + ids + [self.tokenizer.eos_id]
            eots.append(len(full) - 1)
            full = full + [self.tokenizer.pad_id] * (self.cfg.context_length - len(full))
            rows.append(full)
        idx = torch.tensor(rows, dtype=torch.long)
        embs = self.text.token_embed(idx)
        return self.text(embs, torch.tensor(eots, dtype=torch.long))

    # ---- parameter policy ----

    def vision_layernorm_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for name, module in self.visual.named_modules():
            if isinstance(module, nn.LayerNorm):
                for pname, p in module.named_parameters(recurse=False):
                    out[f"visual.{name}.{pname}"] = p
        return out

    def preprocess_tensor(self, images: torch.Tensor) -> torch.Tensor:
        """Normalize a (B,3,H,W) float tensor in [0,1] with the backbone's
        published statistics."""
        mean = torch.tensor(self.cfg.image_mean).view(1, 3, 1, 1)
        std = torch.tensor(self.cfg.image_std).view(1, 3, 1, 1)
        return (images - mean) / std

    def weight_fingerprint(self) -> str:
        """Stable hash of all weights; changes whenever any parameter does."""
        h = hashlib.sha256()
        h.update(self.cfg.backbone_id.encode())
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
        return h.hexdigest()[:16]


def build_backbone(backbone_id: str, weights_path: str | Path | None = None,
                   init_seed: int | None = None) -> DualEncoder:
    """Construct a registry backbone, optionally loading local weights."""
    if backbone_id not in BACKBONES:
        raise ConfigError(
            f"unknown backbone {backbone_id!r}; known: {sorted(BACKBONES)}"
        )
    cfg = BACKBONES[backbone_id]
    if init_seed is not None:
        cfg = dataclasses.replace(cfg, init_seed=init_seed)
    model = DualEncoder(cfg)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model
