"""Gallery index: precomputed unit-normalized photo features.

Exhaustive cosine ranking with deterministic ascending-id tie-breaks. The
index persists as a flat float32 matrix plus a JSON sidecar carrying ids,
per-id metadata, and the checkpoint fingerprint it was built from.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adapter import EncoderAdapter
from .data import DatasetManifest, ImageStore
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

FEATURES_FILE = "features.npy"
SIDECAR_FILE = "index.json"


@dataclass
class GalleryIndex:
    ids: list[str]
    features: np.ndarray                  # (N, d) unit rows
    metadata: dict[str, dict]             # id -> {path, class_label?, domain_label?}
    fingerprint: str
    backbone_id: str

    def __post_init__(self):
        if len(self.ids) != self.features.shape[0]:
            raise ConfigError("id/feature count mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("gallery ids must be unique")
        norms = np.linalg.norm(self.features, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ConfigError("gallery feature rows must be unit-normalized")

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, out_dir: str | Path):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tmp_feat = out_dir / "features.tmp.npy"
        np.save(tmp_feat, self.features)
        os.replace(tmp_feat, out_dir / FEATURES_FILE)
        sidecar = {
            "ids": self.ids,
            "metadata": self.metadata,
            "fingerprint": self.fingerprint,
            "backbone_id": self.backbone_id,
            "dim": int(self.features.shape[1]),
        }
        tmp_json = out_dir / (SIDECAR_FILE + ".tmp")
        tmp_json.write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
        os.replace(tmp_json, out_dir / SIDECAR_FILE)

    @classmethod
    def load(cls, in_dir: str | Path) -> "GalleryIndex":
        in_dir = Path(in_dir)
        features = np.load(in_dir / FEATURES_FILE)
        sidecar = json.loads((in_dir / SIDECAR_FILE).read_text(encoding="utf-8"))
        return cls(ids=sidecar["ids"], features=features, metadata=sidecar["metadata"],
                   fingerprint=sidecar["fingerprint"], backbone_id=sidecar["backbone_id"])


@dataclass
class RetrievalResult:
    ids: list[str]
    scores: list[float]
    query_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ConfigError("scores must be non-increasing")


def build_index(manifest: DatasetManifest, adapter: EncoderAdapter,
                fingerprint: str) -> GalleryIndex:
    """One encode per gallery photo; unreadable images are skipped with a
    report instead of failing the build."""
    adapter.eval_mode()
    store = ImageStore(manifest.root, adapter.preprocess)
    ids, rows, metadata = [], [], {}
    pair_meta = {}
    for p in manifest.pairs:
        pair_meta.setdefault(p.photo_path, p)
    for photo_id in manifest.gallery_ids():
        try:
            img = store.load(photo_id)
        except Exception as e:  # unreadable file: skip + report
            log.warning("skipping unreadable gallery photo %s: %s", photo_id, e)
            continue
        g, _ = adapter.encode_images(img[None])
        rows.append(F.normalize(g[0], dim=0).numpy().astype(np.float32))
        ids.append(photo_id)
        meta = {"path": photo_id}
        pair = pair_meta.get(photo_id)
        if pair is not None:
            if pair.class_label is not None:
                meta["class_label"] = pair.class_label
            if pair.domain_label is not None:
                meta["domain_label"] = pair.domain_label
        metadata[photo_id] = meta
    if not ids:
        raise ConfigError("no readable gallery photos; cannot build index")
    return GalleryIndex(ids=ids, features=np.stack(rows), metadata=metadata,
                        fingerprint=fingerprint, backbone_id=adapter.config.backbone_id)


def query_index(index: GalleryIndex, query_vec: torch.Tensor | np.ndarray, k: int,
                echo: dict | None = None, expected_fingerprint: str | None = None,
                ) -> RetrievalResult:
    """Top-k by cosine similarity; ties break by ascending id."""
    if expected_fingerprint is not None and expected_fingerprint != index.fingerprint:
        raise ConfigError(
            f"index fingerprint {index.fingerprint} does not match checkpoint "
            f"{expected_fingerprint}"
        )
    if isinstance(query_vec, torch.Tensor):
        query_vec = query_vec.detach().cpu().numpy()
    query_vec = np.asarray(query_vec, dtype=np.float32)
    if query_vec.ndim != 1 or query_vec.shape[0] != index.features.shape[1]:
        raise InputError(f"query width {query_vec.shape} != index dim "
                         f"{index.features.shape[1]}")
    if k < 0:
        raise InputError("k must be >= 0")
    n = len(index)
    if k > n:
        warnings.warn(f"k={k} exceeds gallery size {n}; returning all", stacklevel=2)
        k = n
    scores = index.features @ query_vec
    order = sorted(range(n), key=lambda i: (-scores[i], index.ids[i]))[:k]
    return RetrievalResult(
        ids=[index.ids[i] for i in order],
        scores=[float(scores[i]) for i in order],
        query_echo=echo or {},
    )


def acc_at_q(results: list[RetrievalResult], truths: list[str], q: int,
             gallery_ids: list[str] | None = None) -> float:
    """Percentage of queries whose true photo appears within rank q."""
    if len(results) != len(truths):
        raise InputError("one truth id per query required")
    if not results:
        raise InputError("no queries")
    known = set(gallery_ids) if gallery_ids is not None else None
    hits = 0
    for res, truth in zip(results, truths):
        if known is not None and truth not in known:
            warnings.warn(f"truth id {truth!r} absent from gallery; counted as miss",
                          stacklevel=2)
            continue
        hits += int(truth in res.ids[:q])
    return 100.0 * hits / len(results)


def recall_at_q(results: list[RetrievalResult], relevance: list[set[str]],
                q: int) -> float:
    """Mean over queries of |top-q ∩ relevant| / |relevant|."""
    if len(results) != len(relevance):
        raise InputError("one relevance set per query required")
    ratios = []
    for res, rel in zip(results, relevance):
        if not rel:
            warnings.warn("query with empty relevance set excluded", stacklevel=2)
            continue
        top = set(res.ids[:q])
        ratios.append(len(top & rel) / len(rel))
    if not ratios:
        raise InputError("all queries had empty relevance sets")
    return float(np.mean(ratios))
