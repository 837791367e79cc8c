import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from duet.data import load_manifest
from duet.errors import ConfigError, InputError
from duet.index import (
    GalleryIndex,
    RetrievalResult,
    acc_at_q,
    build_index,
    query_index,
    recall_at_q,
)


def make_index(n=8, d=6, seed=0, ids=None):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, d)).astype(np.float32)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    ids = ids or [f"p/{i:03d}.png" for i in range(n)]
    meta = {i: {"path": i} for i in ids}
    return GalleryIndex(ids=ids, features=feats, metadata=meta,
                        fingerprint="fp", backbone_id="tiny")


# ---- brute-force oracle (independent implementation) ----

def brute_force_rank(features, ids, query):
    scored = []
    for i, row in enumerate(features):
        s = 0.0
        for a, b in zip(row, query):
            s += float(a) * float(b)
        scored.append((-s, ids[i]))
    scored.sort()
    return [pid for _, pid in scored], [-s for s, _ in scored]


def brute_force_acc(rankings, truths, q):
    hits = sum(1 for ranked, t in zip(rankings, truths) if t in ranked[:q])
    return 100.0 * hits / len(truths)


def brute_force_recall(rankings, relevance, q):
    vals = []
    for ranked, rel in zip(rankings, relevance):
        if not rel:
            continue
        vals.append(len(set(ranked[:q]) & rel) / len(rel))
    return sum(vals) / len(vals)


def test_unit_norm_enforced():
    feats = np.ones((3, 4), dtype=np.float32)
    with pytest.raises(ConfigError):
        GalleryIndex(ids=["a", "b", "c"], features=feats, metadata={},
                     fingerprint="x", backbone_id="tiny")


def test_duplicate_ids_rejected():
    feats = np.eye(2, dtype=np.float32)
    with pytest.raises(ConfigError):
        GalleryIndex(ids=["a", "a"], features=feats, metadata={},
                     fingerprint="x", backbone_id="tiny")


def test_query_self_similarity_ranks_first():
    index = make_index(n=10, d=8)
    target = 3
    result = query_index(index, index.features[target], k=5)
    assert result.ids[0] == index.ids[target]
    assert result.scores[0] == pytest.approx(1.0, abs=1e-5)


def test_query_k_zero_empty():
    index = make_index()
    result = query_index(index, index.features[0], k=0)
    assert result.ids == [] and result.scores == []


def test_query_k_exceeds_gallery_warns():
    index = make_index(n=4)
    with pytest.warns(UserWarning, match="exceeds gallery"):
        result = query_index(index, index.features[0], k=99)
    assert len(result.ids) == 4


def test_query_matches_brute_force_oracle():
    index = make_index(n=20, d=8, seed=3)
    rng = np.random.default_rng(5)
    q = rng.normal(size=8).astype(np.float32)
    q /= np.linalg.norm(q)
    result = query_index(index, q, k=20)
    oracle_ids, _ = brute_force_rank(index.features, index.ids, q)
    assert result.ids == oracle_ids


def test_tie_break_ascending_id():
    feats = np.stack([np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                      np.array([0.0, 1.0])]).astype(np.float32)
    ids = ["b", "a", "c"]
    index = GalleryIndex(ids=ids, features=feats, metadata={},
                         fingerprint="x", backbone_id="tiny")
    result = query_index(index, np.array([1.0, 0.0], dtype=np.float32), k=3)
    assert result.ids == ["a", "b", "c"]


def test_fingerprint_mismatch_hard_error():
    index = make_index()
    with pytest.raises(ConfigError, match="fingerprint"):
        query_index(index, index.features[0], k=1, expected_fingerprint="other")


def test_scores_non_increasing_enforced():
    with pytest.raises(ConfigError):
        RetrievalResult(ids=["a", "b"], scores=[0.1, 0.9])


def test_save_load_roundtrip(tmp_path):
    index = make_index(n=5, d=4)
    index.save(tmp_path / "idx")
    loaded = GalleryIndex.load(tmp_path / "idx")
    assert loaded.ids == index.ids
    assert np.array_equal(loaded.features, index.features)
    assert loaded.fingerprint == index.fingerprint


def test_build_index_from_fixture(fixture_dataset, tiny_adapter):
    manifest = load_manifest(fixture_dataset["ambiguous"])
    index = build_index(manifest, tiny_adapter, "fp123")
    assert len(index) == 32
    norms = np.linalg.norm(index.features, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    rebuilt = build_index(manifest, tiny_adapter, "fp123")
    assert np.array_equal(index.features, rebuilt.features)
    assert index.metadata[index.ids[0]].get("class_label") is not None


def test_build_index_skips_unreadable(fixture_dataset, tiny_adapter, tmp_path):
    manifest = load_manifest(fixture_dataset["ambiguous"])
    bad = manifest.root / "photos" / "broken.png"
    bad.write_bytes(b"not a png")
    manifest.gallery.append("photos/broken.png")
    try:
        index = build_index(manifest, tiny_adapter, "fp")
        assert len(index) == 32  # broken image skipped
    finally:
        manifest.gallery.remove("photos/broken.png")
        bad.unlink()


def test_ranking_invariant_to_positive_scaling_before_normalization(tiny_adapter, fixture_dataset):
    manifest = load_manifest(fixture_dataset["ambiguous"])
    index = build_index(manifest, tiny_adapter, "fp")
    rng = np.random.default_rng(0)
    q = rng.normal(size=index.features.shape[1]).astype(np.float32)
    before = query_index(index, q, k=10).ids
    # scaling all raw features by any positive constant then re-normalizing
    # is the identity on unit rows
    scaled = GalleryIndex(ids=index.ids, features=(index.features * 7.3) / 7.3,
                          metadata=index.metadata, fingerprint=index.fingerprint,
                          backbone_id=index.backbone_id)
    after = query_index(scaled, q, k=10).ids
    assert before == after


# ---- metrics ----

def result_from(ids):
    return RetrievalResult(ids=list(ids), scores=list(np.linspace(1, 0, len(ids))))


def test_acc_truth_at_rank_one():
    res = [result_from(["a", "b", "c"])]
    assert acc_at_q(res, ["a"], 5) == 100.0


def test_acc_truth_absent_counts_miss_with_warning():
    res = [result_from(["a", "b"])]
    with pytest.warns(UserWarning, match="absent"):
        value = acc_at_q(res, ["zz"], 2, gallery_ids=["a", "b"])
    assert value == 0.0


def test_recall_all_relevant_found():
    res = [result_from(["a", "b", "c", "d"])]
    assert recall_at_q(res, [{"a", "b"}], 4) == 1.0


def test_recall_half_found():
    res = [result_from(["a", "x", "y", "z"])]
    assert recall_at_q(res, [{"a", "b", "c", "d"}], 4) == pytest.approx(0.25)
    res2 = [result_from(["a", "b", "x", "y"])]
    assert recall_at_q(res2, [{"a", "b", "c", "d"}], 4) == pytest.approx(0.5)


def test_recall_empty_relevance_excluded():
    res = [result_from(["a"]), result_from(["b"])]
    with pytest.warns(UserWarning, match="empty relevance"):
        value = recall_at_q(res, [set(), {"b"}], 1)
    assert value == 1.0


def test_metrics_match_oracle_on_synthetic_galleries():
    rng = np.random.default_rng(42)
    for trial in range(50):
        n = int(rng.integers(5, 101))
        q_count = int(rng.integers(2, 51))
        d = int(rng.integers(3, 10))
        feats = rng.normal(size=(n, d)).astype(np.float32)
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        ids = [f"img{i:04d}" for i in range(n)]
        index = GalleryIndex(ids=ids, features=feats, metadata={},
                             fingerprint="fp", backbone_id="tiny")
        queries = rng.normal(size=(q_count, d)).astype(np.float32)
        truths = [ids[int(rng.integers(0, n))] for _ in range(q_count)]
        relevance = [set(rng.choice(ids, size=int(rng.integers(1, min(6, n) + 1)),
                                    replace=False)) for _ in range(q_count)]
        results, oracle_rankings = [], []
        for qv in queries:
            results.append(query_index(index, qv, k=n))
            oracle_rankings.append(brute_force_rank(feats, ids, qv)[0])
        for q in (1, 5, 10):
            assert acc_at_q(results, truths, q) == brute_force_acc(oracle_rankings, truths, q)
            assert recall_at_q(results, relevance, q) == pytest.approx(
                brute_force_recall(oracle_rankings, relevance, q), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.integers(1, 20))
def test_metric_bounds_and_monotonicity(seed, q):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 30))
    feats = rng.normal(size=(n, 5)).astype(np.float32)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    ids = [f"i{i}" for i in range(n)]
    index = GalleryIndex(ids=ids, features=feats, metadata={},
                         fingerprint="fp", backbone_id="tiny")
    queries = rng.normal(size=(4, 5)).astype(np.float32)
    truths = [ids[int(rng.integers(0, n))] for _ in range(4)]
    results = [query_index(index, qv, k=n) for qv in queries]
    acc_q = acc_at_q(results, truths, q)
    acc_q1 = acc_at_q(results, truths, q + 1)
    assert 0.0 <= acc_q <= 100.0
    assert acc_q1 >= acc_q
    rel = [set(rng.choice(ids, size=min(3, n), replace=False)) for _ in range(4)]
    r_q = recall_at_q(results, rel, q)
    r_q1 = recall_at_q(results, rel, q + 1)
    assert 0.0 <= r_q <= 1.0
    assert r_q1 >= r_q


def test_metric_input_validation():
    res = [result_from(["a"])]
    with pytest.raises(InputError):
        acc_at_q(res, ["a", "b"], 1)
    with pytest.raises(InputError):
        recall_at_q(res, [], 1)
