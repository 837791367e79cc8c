"""Evaluation harness for the three retrieval protocols.

fine_grained   composed query = sketch pseudo-word + per-photo test caption
               (verbatim, captions carry their own preposition); empty
               captions degrade to the sketch-only self-retrieval probe.
scene          same query composition; a retrieved image counts as correct
               when its object list covers every object of the true photo.
               Object lists come from a precomputed JSON file, never derived.
domain_transfer  composed query = sketch pseudo-word + "in <domain>"; a hit
               needs class AND domain to match; reported as recall@q.
"""

from __future__ import annotations

import json
from pathlib import Path

from .adapter import EncoderAdapter
from .composer import QueryComposer
from .data import DatasetManifest, ImageStore
from .errors import ProtocolError
from .index import GalleryIndex, RetrievalResult, acc_at_q, build_index, query_index, recall_at_q

PROTOCOLS = ("fine_grained", "scene", "domain_transfer")
ACC_RANKS = (1, 5, 10)
RECALL_RANKS = (10, 50)


def evaluate(protocol: str, manifest: DatasetManifest, adapter: EncoderAdapter,
             composer: QueryComposer, fingerprint: str = "",
             index: GalleryIndex | None = None,
             object_lists: str | Path | None = None) -> dict:
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; known: {PROTOCOLS}")
    pairs = manifest.split_pairs("test")
    if not pairs:
        raise ProtocolError("test split is empty")
    if protocol == "domain_transfer":
        missing = [i for i, p in enumerate(pairs)
                   if p.class_label is None or p.domain_label is None]
        if missing:
            raise ProtocolError(
                f"domain_transfer needs class_label and domain_label on every test "
                f"pair; missing on pair indexes {missing[:5]}"
            )
    if protocol == "scene" and object_lists is None:
        raise ProtocolError("scene protocol needs an object-list file")

    if index is None:
        index = build_index(manifest, adapter, fingerprint or "unversioned")
    adapter.eval_mode()
    store = ImageStore(manifest.root, adapter.preprocess)

    results: list[RetrievalResult] = []
    truths: list[str] = []
    k = max(max(ACC_RANKS), max(RECALL_RANKS))
    k = min(k, len(index))
    for p in pairs:
        sketch = store.load(p.sketch_path)
        if protocol == "domain_transfer":
            q = composer.build_inference_query(sketch, text=p.domain_label, connector="in")
        else:
            text = p.caption if (p.caption and p.caption.strip()) else None
            q = composer.build_inference_query(sketch, text=text, connector="")
        echo = {"sketch": p.sketch_path, "text": p.caption, "truth": p.photo_path}
        results.append(query_index(index, q, k, echo=echo))
        truths.append(p.photo_path)

    report: dict = {"protocol": protocol, "num_queries": len(results),
                    "gallery_size": len(index), "metrics": {}}
    if protocol == "fine_grained":
        for rank in ACC_RANKS:
            report["metrics"][f"acc@{rank}"] = acc_at_q(results, truths, rank, index.ids)
    elif protocol == "scene":
        lists = json.loads(Path(object_lists).read_text(encoding="utf-8"))
        for rank in ACC_RANKS:
            report["metrics"][f"acc@{rank}"] = _scene_acc(results, truths, lists, rank)
    else:
        relevance = []
        for p in pairs:
            rel = {pid for pid, meta in index.metadata.items()
                   if meta.get("class_label") == p.class_label
                   and meta.get("domain_label") == p.domain_label}
            relevance.append(rel)
        for rank in RECALL_RANKS:
            report["metrics"][f"r@{rank}"] = recall_at_q(results, relevance, min(rank, len(index)))
    report["per_query"] = [
        {"echo": r.query_echo, "ranked": r.ids[:10], "scores": r.scores[:10]}
        for r in results
    ]
    return report


def _scene_acc(results: list[RetrievalResult], truths: list[str],
               object_lists: dict[str, list[str]], q: int) -> float:
    """A retrieved image is correct when it contains every queried object,
    i.e. its object list covers the true photo's object list."""
    hits = 0
    for res, truth in zip(results, truths):
        required = set(object_lists.get(truth, []))
        if not required:
            raise ProtocolError(f"no object list for true photo {truth!r}")
        for candidate in res.ids[:q]:
            if required <= set(object_lists.get(candidate, [])):
                hits += 1
                break
    return 100.0 * hits / len(results)
