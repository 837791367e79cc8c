"""Desk-scale fixtures: procedural sketch/photo pairs and a contrastively
pretrained mini backbone.

Real sketch-photo datasets are license-gated, and a randomly initialized
dual encoder has no language grounding, so composed-query behavior would be
untestable. The generator draws colored shapes with controlled geometry
(photos) and jittered outline strokes (sketches); the pretrainer fits the
"mini" backbone on a procedural image/caption pool so that color and shape
words mean something in its embedding space. Pretrained weights are cached
by configuration hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .backbone import BACKBONES, DualEncoder, build_backbone
from .data import DatasetManifest, PairRecord
from .wordlists import load_phrases

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "star", "cross", "diamond", "ring", "hexagon")
COLORS = {
    "red": (214, 39, 40),
    "green": (44, 160, 44),
    "blue": (31, 119, 180),
    "yellow": (231, 210, 56),
    "orange": (255, 127, 14),
    "purple": (148, 103, 189),
    "cyan": (23, 190, 207),
    "pink": (241, 127, 190),
}
LIGHT_BG = (235, 235, 230)
DARK_BG = (64, 62, 70)
STROKE = (40, 40, 45)


@dataclass
class ShapeSpec:
    shape: str
    color: str
    cx: float
    cy: float
    r: float
    rot: float = 0.0
    bg: str = "light"

    @property
    def size_word(self) -> str:
        return "small" if self.r < 0.30 else "large"

    @property
    def side_word(self) -> str:
        return "left" if self.cx < 0.5 else "right"

    @property
    def vert_word(self) -> str:
        return "top" if self.cy < 0.5 else "bottom"


def _polygon(shape: str, cx: float, cy: float, r: float, rot: float) -> list[tuple[float, float]]:
    def ring_points(n, radius, phase=0.0):
        return [(cx + radius * math.cos(rot + phase + 2 * math.pi * i / n),
                 cy + radius * math.sin(rot + phase + 2 * math.pi * i / n))
                for i in range(n)]

    if shape in ("circle", "ring"):
        return ring_points(28, r)
    if shape == "square":
        return ring_points(4, r, phase=math.pi / 4)
    if shape == "diamond":
        return ring_points(4, r)
    if shape == "triangle":
        return ring_points(3, r, phase=-math.pi / 2)
    if shape == "hexagon":
        return ring_points(6, r)
    if shape == "star":
        pts = []
        for i in range(10):
            radius = r if i % 2 == 0 else 0.45 * r
            ang = rot - math.pi / 2 + math.pi * i / 5
            pts.append((cx + radius * math.cos(ang), cy + radius * math.sin(ang)))
        return pts
    if shape == "cross":
        w = 0.36 * r
        raw = [(-w, -r), (w, -r), (w, -w), (r, -w), (r, w), (w, w),
               (w, r), (-w, r), (-w, w), (-r, w), (-r, -w), (-w, -w)]
        cos_r, sin_r = math.cos(rot), math.sin(rot)
        return [(cx + x * cos_r - y * sin_r, cy + x * sin_r + y * cos_r) for x, y in raw]
    raise ValueError(f"unknown shape {shape!r}")


def draw_photo(spec: ShapeSpec, res: int, noise_seed: int = 0) -> Image.Image:
    bg = LIGHT_BG if spec.bg == "light" else DARK_BG
    img = Image.new("RGB", (res, res), bg)
    draw = ImageDraw.Draw(img)
    pts = [(x * res, y * res) for x, y in
           _polygon(spec.shape, spec.cx, spec.cy, spec.r, spec.rot)]
    draw.polygon(pts, fill=COLORS[spec.color])
    if spec.shape == "ring":
        inner = [(x * res, y * res) for x, y in
                 _polygon("circle", spec.cx, spec.cy, 0.55 * spec.r, spec.rot)]
        draw.polygon(inner, fill=bg)
    rng = np.random.default_rng(noise_seed)
    arr = np.asarray(img, dtype=np.int16)
    arr = np.clip(arr + rng.integers(-6, 7, size=arr.shape), 0, 255).astype(np.uint8)
    return Image.fromarray(arr)


def draw_sketch(spec: ShapeSpec, res: int, jitter_seed: int = 0) -> Image.Image:
    img = Image.new("RGB", (res, res), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    rng = np.random.default_rng(jitter_seed)
    pts = _polygon(spec.shape, spec.cx, spec.cy, spec.r, spec.rot)
    jittered = [(res * (x + rng.normal(0, 0.004)), res * (y + rng.normal(0, 0.004)))
                for x, y in pts]
    draw.line(jittered + [jittered[0]], fill=STROKE, width=2, joint="curve")
    if spec.shape == "ring":
        inner = _polygon("circle", spec.cx, spec.cy, 0.55 * spec.r, spec.rot)
        inner_j = [(res * (x + rng.normal(0, 0.004)), res * (y + rng.normal(0, 0.004)))
                   for x, y in inner]
        draw.line(inner_j + [inner_j[0]], fill=STROKE, width=2, joint="curve")
    return img


# ---------------------------------------------------------------------------
# fixture dataset
# ---------------------------------------------------------------------------

def make_fixture_dataset(out_dir: str | Path, seed: int = 0,
                         res: int | None = None) -> dict[str, Path]:
    """Writes the 32-pair training fixture plus an attribute-ambiguous
    gallery, a small domain-labeled manifest, and a scene object-list file.
    Returns the manifest paths."""
    res = res or BACKBONES["mini"].image_resolution
    out_dir = Path(out_dir)
    (out_dir / "photos").mkdir(parents=True, exist_ok=True)
    (out_dir / "sketches").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    # 32 geometrically distinct pairs: 4 well-separated shapes x 2 sizes x
    # 2 horizontal x 2 vertical positions, each with a color attribute, so a
    # sketch alone identifies the instance by its geometry signature.
    color_cycle = list(COLORS)
    rng.shuffle(color_cycle)
    pairs = []
    idx = 0
    for shape in ("circle", "triangle", "star", "cross"):
        for size in (0.19, 0.30):
            for cx in (0.30, 0.70):
                for cy in (0.32, 0.68):
                    color = color_cycle[idx % len(color_cycle)]
                    spec = ShapeSpec(
                        shape=shape, color=color,
                        cx=cx + rng.uniform(-0.01, 0.01),
                        cy=cy + rng.uniform(-0.01, 0.01),
                        r=size + rng.uniform(-0.008, 0.008),
                        rot=rng.uniform(-0.12, 0.12),
                    )
                    photo_rel = f"photos/train_{idx:03d}.png"
                    sketch_rel = f"sketches/train_{idx:03d}.png"
                    draw_photo(spec, res, noise_seed=seed * 1000 + idx).save(out_dir / photo_rel)
                    draw_sketch(spec, res, jitter_seed=seed * 1000 + idx).save(out_dir / sketch_rel)
                    pairs.append(PairRecord(
                        sketch_path=sketch_rel, photo_path=photo_rel, split="train",
                        caption=f"in {color}", class_label=shape,
                    ))
                    idx += 1
    train_manifest = DatasetManifest(
        name="fixture-train", root=out_dir, pairs=pairs,
        gallery=[p.photo_path for p in pairs],
    )
    train_path = out_dir / "fixture.json"
    train_manifest.save(train_path)

    # Attribute-ambiguous gallery: 4 shared geometries x 8 colors. A sketch
    # alone cannot separate the 8 same-geometry photos; the caption can.
    amb_pairs = []
    objects: dict[str, list[str]] = {}
    for g, shape in enumerate(("circle", "triangle", "star", "cross")):
        spec_base = ShapeSpec(shape=shape, color="red", cx=0.5, cy=0.5, r=0.3)
        sketch_rel = f"sketches/amb_{g}.png"
        draw_sketch(spec_base, res, jitter_seed=seed * 500 + g).save(out_dir / sketch_rel)
        for color in COLORS:
            spec = ShapeSpec(shape=shape, color=color, cx=0.5, cy=0.5, r=0.3)
            photo_rel = f"photos/amb_{g}_{color}.png"
            draw_photo(spec, res, noise_seed=seed * 500 + g).save(out_dir / photo_rel)
            amb_pairs.append(PairRecord(
                sketch_path=sketch_rel, photo_path=photo_rel, split="test",
                caption=f"in {color}", class_label=shape,
            ))
            objects[photo_rel] = [shape, color]
    amb_manifest = DatasetManifest(
        name="fixture-ambiguous", root=out_dir, pairs=amb_pairs,
        gallery=[p.photo_path for p in amb_pairs],
    )
    amb_path = out_dir / "ambiguous.json"
    amb_manifest.save(amb_path)
    objects_path = out_dir / "objects.json"
    objects_path.write_text(json.dumps(objects, indent=2), encoding="utf-8")

    # Small domain-labeled manifest (light/dark background as the domain) for
    # exercising the domain-transfer protocol end to end.
    dom_pairs = []
    for s, shape in enumerate(("square", "hexagon")):
        for domain, bg in (("bright", "light"), ("dark", "dark")):
            for c, color in enumerate(("red", "blue")):
                spec = ShapeSpec(shape=shape, color=color, cx=0.5, cy=0.5, r=0.3, bg=bg)
                photo_rel = f"photos/dom_{shape}_{domain}_{color}.png"
                sketch_rel = f"sketches/dom_{shape}.png"
                draw_photo(spec, res, noise_seed=seed * 77 + s * 10 + c).save(out_dir / photo_rel)
                if not (out_dir / sketch_rel).exists():
                    draw_sketch(ShapeSpec(shape=shape, color="red", cx=0.5, cy=0.5, r=0.3),
                                res, jitter_seed=seed * 77 + s).save(out_dir / sketch_rel)
                dom_pairs.append(PairRecord(
                    sketch_path=sketch_rel, photo_path=photo_rel, split="test",
                    class_label=shape, domain_label=domain,
                ))
    dom_manifest = DatasetManifest(
        name="fixture-domains", root=out_dir, pairs=dom_pairs,
        gallery=[p.photo_path for p in dom_pairs],
    )
    dom_path = out_dir / "domains.json"
    dom_manifest.save(dom_path)

    return {"train": train_path, "ambiguous": amb_path, "domains": dom_path,
            "objects": objects_path}


# ---------------------------------------------------------------------------
# backbone pretraining pool
# ---------------------------------------------------------------------------

PHOTO_TEMPLATES = (
    "a photo of a {color} {shape}",
    "a {color} {shape}",
    "{shape} in {color}",
    "a photo in {color}",
    "a photo of a {size} {color} {shape}",
    "a {size} {shape} at the {vert} {side}",
    "a {color} {shape} on the {side}",
    "a photo of a {shape}",
    "a photo of a {size} {shape}",
    "a {shape} at the {vert} {side}",
    "a {shape} at the {vert}",
    "a {size} {shape} on the {side}",
)
SKETCH_TEMPLATES = (
    "a sketch of a {shape}",
    "a {size} {shape} sketch",
    "a drawing of a {shape} on the {side}",
    "a {size} {shape} at the {vert} {side}",
    "a freehand sketch of a {shape}",
    "a {shape} at the {vert} {side}",
    "a {shape} on the {side}",
)


def _random_spec(rng: np.random.Generator, bg: str = "light") -> ShapeSpec:
    return ShapeSpec(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        color=list(COLORS)[int(rng.integers(len(COLORS)))],
        cx=float(rng.uniform(0.28, 0.72)),
        cy=float(rng.uniform(0.30, 0.70)),
        r=float(rng.uniform(0.15, 0.32)),
        rot=float(rng.uniform(-0.4, 0.4)),
        bg=bg,
    )


def build_pretrain_pool(n: int, res: int, seed: int) -> tuple[torch.Tensor, list[str]]:
    """Procedural (image, caption) pool; ~35% sketches, rest photos."""
    rng = np.random.default_rng(seed)
    neutral = load_phrases("neutral_text")
    images = np.zeros((n, res, res, 3), dtype=np.uint8)
    captions = []
    for i in range(n):
        as_sketch = rng.random() < 0.35
        bg = "dark" if (not as_sketch and rng.random() < 0.15) else "light"
        spec = _random_spec(rng, bg=bg)
        fields = {"shape": spec.shape, "color": spec.color, "size": spec.size_word,
                  "side": spec.side_word, "vert": spec.vert_word}
        if as_sketch:
            img = draw_sketch(spec, res, jitter_seed=seed + i)
            if rng.random() < 0.25:
                caption = f"a {spec.shape} {neutral[int(rng.integers(len(neutral)))]}"
            else:
                caption = SKETCH_TEMPLATES[int(rng.integers(len(SKETCH_TEMPLATES)))].format(**fields)
        else:
            img = draw_photo(spec, res, noise_seed=seed + i)
            caption = PHOTO_TEMPLATES[int(rng.integers(len(PHOTO_TEMPLATES)))].format(**fields)
        images[i] = np.asarray(img, dtype=np.uint8)
        captions.append(caption)
    tensor = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
    return tensor, captions


def _encode_caption_batch(model: DualEncoder, captions: list[str]) -> torch.Tensor:
    seqs = [model.embed_token_ids(model.tokenizer.encode(c)) for c in captions]
    return model.encode_embedded(seqs)


def build_instance_pairs(n: int, res: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Two same-domain renders of the same spec under small jitter; positives
    for the instance-discrimination term that keeps features from collapsing
    to category-level summaries."""
    rng = np.random.default_rng(seed + 77)
    a = np.zeros((n, res, res, 3), dtype=np.uint8)
    b = np.zeros((n, res, res, 3), dtype=np.uint8)
    for i in range(n):
        spec = _random_spec(rng)
        as_sketch = rng.random() < 0.4
        for out, view_seed in ((a, seed + 2 * i), (b, seed + 2 * i + 1)):
            jig = np.random.default_rng(view_seed)
            spec_v = ShapeSpec(
                shape=spec.shape, color=spec.color,
                cx=spec.cx + float(jig.uniform(-0.01, 0.01)),
                cy=spec.cy + float(jig.uniform(-0.01, 0.01)),
                r=spec.r + float(jig.uniform(-0.008, 0.008)),
                rot=spec.rot + float(jig.uniform(-0.05, 0.05)),
                bg=spec.bg,
            )
            img = (draw_sketch(spec_v, res, jitter_seed=view_seed) if as_sketch
                   else draw_photo(spec_v, res, noise_seed=view_seed))
            out[i] = np.asarray(img, dtype=np.uint8)
    to_tensor = lambda arr: torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0
    return to_tensor(a), to_tensor(b)


def pretrain_backbone(out_path: str | Path, steps: int = 1500, batch_size: int = 96,
                      pool_size: int = 6144, lr: float = 2e-3, seed: int = 0,
                      instance_weight: float = 0.5, instance_batch: int = 48,
                      log_every: int = 100) -> dict:
    """Contrastive image/caption pretraining of the 'mini' backbone, with a
    same-domain instance-discrimination term (two jittered renders of one
    spec as positives) so features stay instance-sensitive.

    Returns a summary dict with the held-out text->image accuracy."""
    cfg = BACKBONES["mini"]
    model = build_backbone("mini", init_seed=seed)
    model.train()
    for p in model.parameters():
        p.requires_grad = True

    images, captions = build_pretrain_pool(pool_size + 256, cfg.image_resolution, seed)
    heldout_images, heldout_captions = images[pool_size:], captions[pool_size:]
    images, captions = images[:pool_size], captions[:pool_size]
    pair_count = max(instance_batch * 4, pool_size // 4)
    pairs_a, pairs_b = build_instance_pairs(pair_count, cfg.image_resolution, seed)

    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.02)
    warmup = max(1, steps // 10)

    def lr_at(step: int) -> float:
        if step < warmup:
            return lr * (step + 1) / warmup
        progress = (step - warmup) / max(1, steps - warmup)
        return lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * progress)))

    rng = np.random.default_rng(seed)
    t0 = time.time()
    for step in range(steps):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(step)
        idx = rng.integers(0, pool_size, size=batch_size)
        batch_imgs = model.preprocess_tensor(images[idx])
        batch_caps = [captions[i] for i in idx]
        img_feat, _ = model.encode_images(batch_imgs)
        txt_feat = _encode_caption_batch(model, batch_caps)
        img_n = F.normalize(img_feat, dim=-1)
        txt_n = F.normalize(txt_feat, dim=-1)
        scale = model.logit_scale.exp().clamp(max=100.0)
        logits = scale * img_n @ txt_n.T
        labels = torch.arange(batch_size)
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        if instance_weight > 0:
            pi = rng.integers(0, pair_count, size=instance_batch)
            feat_a, _ = model.encode_images(model.preprocess_tensor(pairs_a[pi]))
            feat_b, _ = model.encode_images(model.preprocess_tensor(pairs_b[pi]))
            a_n, b_n = F.normalize(feat_a, dim=-1), F.normalize(feat_b, dim=-1)
            ii_logits = scale * a_n @ b_n.T
            ii_labels = torch.arange(instance_batch)
            ii_loss = 0.5 * (F.cross_entropy(ii_logits, ii_labels)
                             + F.cross_entropy(ii_logits.T, ii_labels))
            loss = loss + instance_weight * ii_loss
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d/%d loss %.3f (%.1fs)",
                     step + 1, steps, loss.item(), time.time() - t0)

    model.eval()
    acc = _heldout_accuracy(model, heldout_images, heldout_captions)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_suffix(".tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, out_path)
    summary = {"steps": steps, "heldout_caption_acc": acc,
               "seconds": round(time.time() - t0, 1)}
    log.info("pretraining done: %s", summary)
    return summary


@torch.no_grad()
def _heldout_accuracy(model: DualEncoder, images: torch.Tensor,
                      captions: list[str]) -> float:
    """Text->image top-1, counting a hit when the retrieved image's caption
    matches the query caption."""
    img_feat, _ = model.encode_images(model.preprocess_tensor(images))
    img_n = F.normalize(img_feat, dim=-1)
    txt_n = F.normalize(_encode_caption_batch(model, captions), dim=-1)
    top1 = (txt_n @ img_n.T).argmax(dim=1)
    hits = sum(captions[int(t)] == c for t, c in zip(top1, captions))
    return hits / len(captions)


def fixture_backbone_path(cache_dir: str | Path | None = None, steps: int = 1500,
                          seed: int = 0) -> Path:
    cache_dir = Path(cache_dir or os.environ.get(
        "DUET_CACHE", Path.home() / ".cache" / "duet"))
    key = hashlib.sha256(f"mini:v5:{steps}:{seed}".encode()).hexdigest()[:12]
    return cache_dir / f"fixture_backbone_{key}.pt"


def ensure_fixture_backbone(cache_dir: str | Path | None = None, steps: int = 1500,
                            seed: int = 0, force: bool = False) -> Path:
    path = fixture_backbone_path(cache_dir, steps, seed)
    if force or not path.exists():
        log.info("pretraining fixture backbone -> %s", path)
        pretrain_backbone(path, steps=steps, seed=seed)
    return path
