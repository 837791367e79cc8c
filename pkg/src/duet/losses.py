"""Training objectives.

Six losses over composed-query and photo features: triplet, compositionality
hinge, neutral-text regularizer, text-to-text prompt anchor, region-aware
triplet, and pixel reconstruction guidance. Every loss is independently
toggleable so each ablation row is a pure config change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

LOSS_NAMES = ("trip", "comp", "reg", "tt", "rt", "rec")


@dataclass(frozen=True)
class LossWeights:
    trip: float = 1.0
    comp: float = 0.5
    reg: float = 0.1
    tt: float = 0.1
    rt: float = 1.0
    rec: float = 1.0

    def __post_init__(self):
        vals = [getattr(self, n) for n in LOSS_NAMES]
        if any(v < 0 for v in vals):
            raise ConfigError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")

    def get(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class Margins:
    trip: float = 0.2
    comp: float = 0.1
    rt: float = 0.2

    def __post_init__(self):
        if self.trip <= 0 or self.comp <= 0 or self.rt <= 0:
            raise ConfigError("margins must be positive")


@dataclass(frozen=True)
class LossToggles:
    trip: bool = True
    comp: bool = True
    reg: bool = True
    tt: bool = True
    rt: bool = True
    rec: bool = True

    def __post_init__(self):
        if not any(self.enabled()):
            raise ConfigError("all losses disabled; nothing to optimize")

    def enabled(self) -> list[bool]:
        return [getattr(self, n) for n in LOSS_NAMES]

    def enabled_names(self) -> list[str]:
        return [n for n in LOSS_NAMES if getattr(self, n)]

    @classmethod
    def from_ablation(cls, name: str) -> "LossToggles":
        """Named ablation rows; compositionality removal drops the difference
        constraint and its neutral-text regularizer together."""
        table = {
            "full": {},
            "no_tt": {"tt": False},
            "no_rec": {"rec": False},
            "no_rt": {"rt": False},
            "no_compositionality": {"comp": False, "reg": False},
        }
        if name not in table:
            raise ConfigError(f"unknown ablation {name!r}; known: {sorted(table)}")
        return cls(**table[name])


@dataclass
class BatchBundle:
    """Per-batch tensors the losses consume. Fields are built lazily by the
    trainer; a loss whose inputs are missing raises ConfigError.

    Negative-side tensors accept an extra negatives dimension for in-batch
    negative sharing: photo_neg may be (B, d) or (B, M, d) and patches_neg
    (B, T, d) or (B, M, T, d), with neg_mask (B, M) flagging valid entries
    (an in-batch "negative" that shares the anchor's photo identity is
    masked out)."""

    queries_plain: torch.Tensor | None = None      # (B, d)  prompt+pseudo
    queries_diff: torch.Tensor | None = None       # (B, d)  + difference token
    queries_neutral: torch.Tensor | None = None    # (B, d)  + neutral phrase
    queries_fixed: torch.Tensor | None = None      # (B, d)  fixed prompt+pseudo
    photo_pos: torch.Tensor | None = None          # (B, d)
    photo_neg: torch.Tensor | None = None          # (B, d) or (B, M, d)
    patches_pos: torch.Tensor | None = None        # (B, T, d)
    patches_neg: torch.Tensor | None = None        # (B, T, d) or (B, M, T, d)
    neg_mask: torch.Tensor | None = None           # (B, M) bool
    photos_pos_pixels: torch.Tensor | None = None  # (B, 3, H, W) in [0, 1]

    def require(self, *names: str):
        for n in names:
            if getattr(self, n) is None:
                raise ConfigError(f"batch bundle missing {n!r} for the requested loss")


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, b) along the last dim; zero vectors are rejected."""
    if a.shape[-1] != b.shape[-1]:
        raise InputError("width mismatch in distance")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise InputError("cosine distance undefined for zero vectors")
    return 1.0 - (a * b).sum(dim=-1) / (na * nb)


def distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return cosine_distance(a, b)


def _masked_hinge_mean(hinge: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean of per-(anchor, negative) hinges over valid entries."""
    if hinge.dim() == 1 or mask is None:
        return hinge.mean()
    valid = mask.to(hinge.dtype)
    total = valid.sum()
    if total == 0:
        raise ConfigError("no valid negatives in batch")
    return (hinge * valid).sum() / total


def loss_trip(bundle: BatchBundle, margins: Margins) -> torch.Tensor:
    bundle.require("queries_plain", "photo_pos", "photo_neg")
    pos = distance(bundle.queries_plain, bundle.photo_pos)
    if bundle.photo_neg.dim() == 3:
        neg = distance(bundle.queries_plain[:, None, :], bundle.photo_neg)
        hinge = torch.clamp(margins.trip + pos[:, None] - neg, min=0)
    else:
        hinge = torch.clamp(margins.trip + pos - distance(bundle.queries_plain,
                                                          bundle.photo_neg), min=0)
    return _masked_hinge_mean(hinge, bundle.neg_mask)


def loss_comp(bundle: BatchBundle, margins: Margins) -> torch.Tensor:
    bundle.require("queries_plain", "queries_diff", "photo_pos")
    diff = distance(bundle.queries_diff, bundle.photo_pos)
    plain = distance(bundle.queries_plain, bundle.photo_pos)
    return torch.clamp(margins.comp + diff - plain, min=0).mean()


def loss_reg(bundle: BatchBundle) -> torch.Tensor:
    bundle.require("queries_diff", "queries_neutral", "photo_pos")
    diff = distance(bundle.queries_diff, bundle.photo_pos)
    neutral = distance(bundle.queries_neutral, bundle.photo_pos)
    return (diff - neutral).abs().mean()


def loss_tt(bundle: BatchBundle) -> torch.Tensor:
    bundle.require("queries_fixed", "queries_plain")
    return (bundle.queries_fixed - bundle.queries_plain).norm(dim=-1).mean()


def region_attention(query: torch.Tensor,
                     patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax patch-query correlations and the correlation-weighted patch sum.

    query: (d,) or (B, d); patches: (T, d) or (B, T, d).
    Returns (weights over T, pooled feature)."""
    squeeze = query.dim() == 1
    if squeeze:
        query = query[None]
        patches = patches[None]
    if patches.shape[1] == 0:
        raise InputError("region attention needs at least one patch")
    if patches.shape[-1] != query.shape[-1]:
        raise InputError("patch/query width mismatch")
    scores = torch.einsum("btd,bd->bt", patches, query)
    weights = F.softmax(scores, dim=1)
    pooled = torch.einsum("bt,btd->bd", weights, patches)
    if squeeze:
        return weights[0], pooled[0]
    return weights, pooled


def loss_rt(bundle: BatchBundle, margins: Margins) -> torch.Tensor:
    bundle.require("queries_plain", "patches_pos", "patches_neg")
    q = bundle.queries_plain
    _, pooled_pos = region_attention(q, bundle.patches_pos)
    pos = distance(q, pooled_pos)
    if bundle.patches_neg.dim() == 4:
        b, m, t, d = bundle.patches_neg.shape
        q_rep = q[:, None, :].expand(b, m, d).reshape(b * m, d)
        _, pooled_neg = region_attention(q_rep, bundle.patches_neg.reshape(b * m, t, d))
        neg = distance(q_rep, pooled_neg).view(b, m)
        hinge = torch.clamp(margins.rt + pos[:, None] - neg, min=0)
    else:
        _, pooled_neg = region_attention(q, bundle.patches_neg)
        hinge = torch.clamp(margins.rt + pos - distance(q, pooled_neg), min=0)
    return _masked_hinge_mean(hinge, bundle.neg_mask)


def pixel_l2(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Per-item pixel-level l2: RMS difference over all channels/pixels."""
    if target.shape != recon.shape:
        raise InputError(
            f"reconstruction shape {tuple(recon.shape)} != target {tuple(target.shape)}"
        )
    flat = (target - recon).flatten(1)
    return (flat.pow(2).mean(dim=1) + 1e-12).sqrt()


def loss_rec(bundle: BatchBundle, decoder) -> torch.Tensor:
    bundle.require("queries_plain", "queries_diff", "photos_pos_pixels")
    target = bundle.photos_pos_pixels
    term_plain = pixel_l2(target, decoder(bundle.queries_plain))
    term_diff = pixel_l2(target, decoder(bundle.queries_diff))
    return (term_plain + term_diff).mean()


def loss_total(bundle: BatchBundle, weights: LossWeights, margins: Margins,
               toggles: LossToggles, decoder=None) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled losses plus a per-loss breakdown.

    Disabled losses are skipped entirely (no forward computation)."""
    terms: dict[str, torch.Tensor] = {}
    if toggles.trip:
        terms["trip"] = loss_trip(bundle, margins)
    if toggles.comp:
        terms["comp"] = loss_comp(bundle, margins)
    if toggles.reg:
        terms["reg"] = loss_reg(bundle)
    if toggles.tt:
        terms["tt"] = loss_tt(bundle)
    if toggles.rt:
        terms["rt"] = loss_rt(bundle, margins)
    if toggles.rec:
        if decoder is None:
            raise ConfigError("reconstruction loss enabled but no decoder given")
        terms["rec"] = loss_rec(bundle, decoder)
    total = sum(weights.get(name) * value for name, value in terms.items())
    breakdown = {name: float(value.detach()) for name, value in terms.items()}
    return total, breakdown
