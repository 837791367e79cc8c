"""Stable interface over the dual-encoder backbone.

Exposes global + patch-level visual features, word-token embedding, and
text-sequence encoding. Trainability is restricted to the vision tower's
LayerNorm parameters; everything else, including the whole text
transformer, stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneConfig, DualEncoder, build_backbone
from .errors import InputError

SOURCE_KINDS = ("sketch", "photo")


@dataclass
class VisualFeature:
    """Global d-vector plus T patch-level d-vectors from one forward pass."""

    global_: torch.Tensor
    patches: torch.Tensor
    source_kind: str = "photo"

    def __post_init__(self):
        if self.source_kind not in SOURCE_KINDS:
            raise InputError(f"source_kind must be one of {SOURCE_KINDS}")
        if not torch.isfinite(self.global_).all() or not torch.isfinite(self.patches).all():
            raise InputError("visual feature contains NaN/Inf")


@dataclass
class TokenSequence:
    """Ordered word-token embeddings (L, width) ready for composition."""

    embeddings: torch.Tensor

    def __post_init__(self):
        if self.embeddings.dim() != 2:
            raise InputError(f"expected (L, width) embeddings, got {tuple(self.embeddings.shape)}")
        if not torch.isfinite(self.embeddings).all():
            raise InputError("token sequence contains NaN/Inf")

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


class EncoderAdapter:
    """Wraps a DualEncoder with the training-policy contract applied."""

    def __init__(self, backbone: DualEncoder):
        self.backbone = backbone
        self.training = False
        self._apply_freeze_policy()
        self.eval_mode()

    @classmethod
    def from_id(cls, backbone_id: str, weights_path: str | Path | None = None,
                init_seed: int | None = None) -> "EncoderAdapter":
        return cls(build_backbone(backbone_id, weights_path, init_seed))

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.cfg

    def _apply_freeze_policy(self):
        trainable = set(id(p) for p in self.backbone.vision_layernorm_parameters().values())
        for p in self.backbone.parameters():
            p.requires_grad = id(p) in trainable

    def train_mode(self):
        self.training = True
        self.backbone.train()
        return self

    def eval_mode(self):
        self.training = False
        self.backbone.eval()
        return self

    # ---- preprocessing ----

    def preprocess(self, image: Image.Image) -> torch.Tensor:
        """PIL image -> normalized (3, res, res) tensor per the backbone's
        published preprocessing. Sketches pass through as plain RGB."""
        res = self.config.image_resolution
        rgb = image.convert("RGB").resize((res, res), Image.BICUBIC)
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
        tensor = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
        return self.backbone.preprocess_tensor(tensor)[0]

    # ---- visual side ----

    def encode_image(self, image: torch.Tensor, source_kind: str = "photo") -> VisualFeature:
        """Preprocessed (3,H,W) tensor -> VisualFeature with matching global
        and patch features from a single forward pass."""
        if image.dim() != 3:
            raise InputError(f"expected a single (3,H,W) image, got {tuple(image.shape)}")
        globals_, patches = self.encode_images(image.unsqueeze(0))
        return VisualFeature(global_=globals_[0], patches=patches[0], source_kind=source_kind)

    def encode_images(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.training:
            return self.backbone.encode_images(images)
        with torch.no_grad():
            return self.backbone.encode_images(images)

    # ---- text side ----

    def embed_words(self, text: str) -> TokenSequence:
        """Per-token embeddings only; does NOT run the text transformer."""
        ids = self.backbone.tokenizer.encode(text)
        if self.training:
            embs = self.backbone.embed_token_ids(ids)
        else:
            with torch.no_grad():
                embs = self.backbone.embed_token_ids(ids)
        return TokenSequence(embeddings=embs)

    def encode_sequence(self, seq: TokenSequence) -> torch.Tensor:
        return self.encode_sequences([seq])[0]

    def encode_sequences(self, seqs: list[TokenSequence]) -> torch.Tensor:
        embedded = [s.embeddings for s in seqs]
        if self.training:
            return self.backbone.encode_embedded(embedded)
        with torch.no_grad():
            return self.backbone.encode_embedded(embedded)

    def encode_text(self, text: str) -> torch.Tensor:
        """Reference full-text pipeline (tokenize + pad to context)."""
        with torch.no_grad():
            return self.backbone.encode_text([text])[0]

    # ---- parameter policy ----

    def trainable_parameters(self) -> dict[str, torch.nn.Parameter]:
        """Exactly the vision-encoder LayerNorm parameters."""
        return self.backbone.vision_layernorm_parameters()

    def frozen_parameters(self) -> dict[str, torch.nn.Parameter]:
        trainable = set(id(p) for p in self.trainable_parameters().values())
        return {n: p for n, p in self.backbone.named_parameters() if id(p) not in trainable}

    def parameter_counts(self) -> tuple[int, int]:
        trainable = sum(p.numel() for p in self.trainable_parameters().values())
        total = sum(p.numel() for p in self.backbone.parameters())
        return trainable, total

    def fingerprint(self) -> str:
        return self.backbone.weight_fingerprint()
