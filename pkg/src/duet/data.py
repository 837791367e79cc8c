"""Dataset ingestion via a declarative JSON manifest.

A manifest lists sketch-photo pairs with optional captions and labels plus a
train/test split. Training is caption-free by contract: captions on train
pairs load fine and are simply never consumed by the trainer. Phrase sets
(neutral text, handcrafted prompts, connecting words) ship with the package.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ManifestError, InputError
from .wordlists import PHRASE_KINDS, load_phrases

SCHEMA_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class PairRecord:
    sketch_path: str
    photo_path: str
    split: str
    caption: str | None = None
    class_label: str | None = None
    domain_label: str | None = None

    def to_dict(self) -> dict:
        out = {"sketch": self.sketch_path, "photo": self.photo_path, "split": self.split}
        for key, value in (("caption", self.caption), ("class_label", self.class_label),
                           ("domain_label", self.domain_label)):
            if value is not None:
                out[key] = value
        return out


@dataclass
class DatasetManifest:
    name: str
    root: Path
    pairs: list[PairRecord]
    gallery: list[str] | None = None  # photo ids (relative paths); default: test photos

    def split_pairs(self, split: str) -> list[PairRecord]:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [p for p in self.pairs if p.split == split]

    def gallery_ids(self) -> list[str]:
        if self.gallery is not None:
            return list(self.gallery)
        seen: dict[str, None] = {}
        for p in self.split_pairs("test"):
            seen.setdefault(p.photo_path, None)
        return list(seen)

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "pairs": [p.to_dict() for p in self.pairs],
        }
        if self.gallery is not None:
            out["gallery"] = list(self.gallery)
        return out

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def split_stats(self) -> dict[str, int]:
        return {s: len(self.split_pairs(s)) for s in SPLITS}


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema_version {version!r}")
    root = path.parent
    pairs_raw = raw.get("pairs", [])
    if not pairs_raw:
        raise ManifestError("manifest declares no pairs")
    pairs = []
    for i, entry in enumerate(pairs_raw):
        try:
            split = entry.get("split", "train")
            if split not in SPLITS:
                raise ManifestError(f"pair {i}: bad split {split!r}")
            pairs.append(PairRecord(
                sketch_path=entry["sketch"], photo_path=entry["photo"], split=split,
                caption=entry.get("caption"), class_label=entry.get("class_label"),
                domain_label=entry.get("domain_label"),
            ))
        except KeyError as e:
            raise ManifestError(f"pair {i} missing field {e}") from e
    manifest = DatasetManifest(name=raw.get("name", path.stem), root=root,
                               pairs=pairs, gallery=raw.get("gallery"))
    _validate(manifest)
    return manifest


def _validate(manifest: DatasetManifest):
    for p in manifest.pairs:
        for rel in (p.sketch_path, p.photo_path):
            if not (manifest.root / rel).exists():
                raise ManifestError(f"referenced file missing: {rel} (root {manifest.root})")
    train_photos = {p.photo_path for p in manifest.split_pairs("train")}
    test_photos = {p.photo_path for p in manifest.split_pairs("test")}
    overlap = train_photos & test_photos
    if overlap:
        raise ManifestError(
            f"{len(overlap)} photo(s) appear in both splits, e.g. {sorted(overlap)[0]}"
        )
    if manifest.gallery is not None:
        for rel in manifest.gallery:
            if not (manifest.root / rel).exists():
                raise ManifestError(f"gallery photo missing: {rel}")


class ImageStore:
    """Loads and preprocesses images from a manifest root, with caching.
    Loading the same path twice yields identical tensors."""

    def __init__(self, root: Path, preprocess):
        self.root = Path(root)
        self.preprocess = preprocess
        self._cache: dict[str, torch.Tensor] = {}

    def load(self, rel_path: str) -> torch.Tensor:
        if rel_path not in self._cache:
            with Image.open(self.root / rel_path) as img:
                self._cache[rel_path] = self.preprocess(img)
        return self._cache[rel_path]

    def load_raw01(self, rel_path: str, resolution: int) -> torch.Tensor:
        """Unnormalized [0,1] pixels, for reconstruction targets."""
        key = f"raw::{rel_path}::{resolution}"
        if key not in self._cache:
            with Image.open(self.root / rel_path) as img:
                rgb = img.convert("RGB").resize((resolution, resolution), Image.BICUBIC)
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
            self._cache[key] = torch.from_numpy(arr).permute(2, 0, 1)
        return self._cache[key]


class TripletSampler:
    """Draws (sketch, positive photo, negative photo) index triplets from the
    train split, deterministic under seed."""

    def __init__(self, manifest: DatasetManifest):
        self.pairs = manifest.split_pairs("train")
        if not self.pairs:
            raise ManifestError("train split is empty")

    def sample(self, batch_size: int, seed: int) -> list[tuple[int, int]]:
        """Returns (anchor_index, negative_index) pairs into the train list."""
        rng = np.random.default_rng(seed)
        n = len(self.pairs)
        if batch_size > n:
            warnings.warn(
                f"batch size {batch_size} exceeds train size {n}; sampling with replacement",
                stacklevel=2,
            )
            anchors = rng.integers(0, n, size=batch_size)
        else:
            anchors = rng.permutation(n)[:batch_size]
        out = []
        for a in anchors:
            a = int(a)
            photo = self.pairs[a].photo_path
            candidates = [j for j in range(n) if self.pairs[j].photo_path != photo]
            if not candidates:
                raise ManifestError("cannot sample a negative: all photos identical")
            out.append((a, int(rng.choice(candidates))))
        return out


def train_batch(manifest: DatasetManifest, store: ImageStore, batch_size: int,
                seed: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[int]]:
    """Preprocessed (sketch, positive, negative) tensors plus anchor indices."""
    sampler = TripletSampler(manifest)
    triplets = sampler.sample(batch_size, seed)
    sketches = torch.stack([store.load(sampler.pairs[a].sketch_path) for a, _ in triplets])
    positives = torch.stack([store.load(sampler.pairs[a].photo_path) for a, _ in triplets])
    negatives = torch.stack([store.load(sampler.pairs[j].photo_path) for _, j in triplets])
    return sketches, positives, negatives, [a for a, _ in triplets]


@dataclass
class PhraseSet:
    kind: str
    phrases: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PHRASE_KINDS:
            raise InputError(f"unknown phrase kind {self.kind!r}")
        if not self.phrases:
            raise InputError(f"phrase set {self.kind!r} is empty")

    def sample(self, rng: np.random.Generator) -> str:
        return self.phrases[int(rng.integers(0, len(self.phrases)))]


def load_phrase_set(kind: str, path: str | Path | None = None) -> PhraseSet:
    """Shipped list by default; a custom one-phrase-per-line file may override."""
    if path is not None:
        phrases = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
                   if ln.strip()]
    else:
        phrases = load_phrases(kind)
    return PhraseSet(kind=kind, phrases=phrases)


def sample_phrase(kind: str, seed: int) -> str:
    return load_phrase_set(kind).sample(np.random.default_rng(seed))
