import io

import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from duet.data import load_manifest, ImageStore
from duet.errors import ConfigError
from duet.index import GalleryIndex, build_index, query_index
from duet.service import ServiceConfig, create_app
from duet.training import Trainer, TrainConfig, load_inference_model
from duet.wordlists import load_phrases


@pytest.fixture(scope="module")
def service_env(tmp_path_factory, fixture_dataset):
    """Checkpoint + matching index over the ambiguous fixture gallery."""
    tmp = tmp_path_factory.mktemp("svc")
    manifest = load_manifest(fixture_dataset["train"])
    manifest.pairs = manifest.pairs[:4]
    manifest.gallery = [p.photo_path for p in manifest.pairs]
    trainer = Trainer(TrainConfig(backbone="tiny", epochs=1, batch_size=2,
                                  val_every=0, decoder_channels=8,
                                  out_dir=str(tmp / "run")))
    ckpt = trainer.fit(manifest)
    adapter, composer, meta = load_inference_model(ckpt)
    gallery_manifest = load_manifest(fixture_dataset["ambiguous"])
    index = build_index(gallery_manifest, adapter, meta["fingerprint"])
    index.save(tmp / "idx")
    return {
        "checkpoint": str(ckpt),
        "index_dir": str(tmp / "idx"),
        "gallery_root": str(gallery_manifest.root),
        "adapter": adapter,
        "composer": composer,
        "meta": meta,
        "index": index,
        "sketch_path": gallery_manifest.root / gallery_manifest.pairs[0].sketch_path,
    }


@pytest.fixture(scope="module")
def client(service_env):
    config = ServiceConfig(checkpoint_path=service_env["checkpoint"],
                           index_dir=service_env["index_dir"],
                           gallery_root=service_env["gallery_root"])
    app = create_app(config)
    return TestClient(app)


def sketch_bytes(service_env):
    return service_env["sketch_path"].read_bytes()


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_meta_endpoint(client, service_env):
    r = client.get("/api/meta")
    assert r.status_code == 200
    body = r.json()
    assert body["gallery_size"] == len(service_env["index"])
    assert body["connectors"] == load_phrases("connecting_word")
    assert body["checkpoint_fingerprint"] == service_env["meta"]["fingerprint"]
    assert body["backbone_id"] == "tiny"


def test_query_basic_contract(client, service_env):
    r = client.post("/api/query",
                    files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")},
                    data={"k": "5"})
    assert r.status_code == 200
    body = r.json()
    assert len(body["results"]) == 5
    scores = [x["score"] for x in body["results"]]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert all("thumbnail_url" in x for x in body["results"])
    assert body["query"]["sketch_sha256"]


def test_query_k_zero_empty(client, service_env):
    r = client.post("/api/query",
                    files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")},
                    data={"k": "0"})
    assert r.status_code == 200
    assert r.json()["results"] == []


def test_query_deterministic(client, service_env):
    payload = {"files": {"sketch": ("s.png", sketch_bytes(service_env), "image/png")},
               "data": {"k": "7", "text": "in red"}}
    a = client.post("/api/query", **payload)
    b = client.post("/api/query", **payload)
    assert a.status_code == b.status_code == 200
    assert a.json() == b.json()


def test_query_matches_in_process_path(client, service_env):
    # an omitted connector means the composer default on both paths
    r = client.post("/api/query",
                    files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")},
                    data={"k": "10", "text": "red"})
    assert r.status_code == 200
    served = [(x["id"], pytest.approx(x["score"], abs=1e-5)) for x in r.json()["results"]]
    with Image.open(service_env["sketch_path"]) as img:
        vec = service_env["composer"].build_inference_query(img, text="red", connector=None)
    local = query_index(service_env["index"], vec, 10)
    assert [i for i, _ in served] == local.ids
    for (_, s), expect in zip(served, local.scores):
        assert s == expect


def test_query_undecodable_image_400(client):
    r = client.post("/api/query", files={"sketch": ("s.png", b"not an image", "image/png")})
    assert r.status_code == 400


def test_query_oversize_400(service_env):
    config = ServiceConfig(checkpoint_path=service_env["checkpoint"],
                           index_dir=service_env["index_dir"],
                           gallery_root=service_env["gallery_root"],
                           max_upload_bytes=10)
    local_client = TestClient(create_app(config))
    r = local_client.post("/api/query",
                          files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")})
    assert r.status_code == 400


def test_image_endpoint(client, service_env):
    known = service_env["index"].ids[0]
    r = client.get(f"/api/image/{known}")
    assert r.status_code == 200
    assert r.headers["content-type"].startswith("image/")
    thumb = client.get(f"/api/image/{known}", params={"thumb": 1})
    assert thumb.status_code == 200
    with Image.open(io.BytesIO(thumb.content)) as img:
        assert max(img.size) <= 256


def test_image_unknown_404(client):
    assert client.get("/api/image/photos/nope.png").status_code == 404


def test_fingerprint_mismatch_409(service_env, tmp_path):
    index = GalleryIndex.load(service_env["index_dir"])
    index.fingerprint = "stale-fingerprint"
    index.save(tmp_path / "stale_idx")
    config = ServiceConfig(checkpoint_path=service_env["checkpoint"],
                           index_dir=str(tmp_path / "stale_idx"),
                           gallery_root=service_env["gallery_root"])
    with pytest.raises(ConfigError):
        create_app(config, strict=True)
    local_client = TestClient(create_app(config, strict=False))
    r = local_client.post("/api/query",
                          files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")})
    assert r.status_code == 409


def test_not_loaded_503(service_env, tmp_path):
    config = ServiceConfig(checkpoint_path=str(tmp_path / "missing.pt"),
                           index_dir=str(tmp_path / "missing_idx"),
                           gallery_root=service_env["gallery_root"])
    local_client = TestClient(create_app(config, strict=False))
    assert local_client.get("/api/meta").status_code == 503
    r = local_client.post("/api/query",
                          files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")})
    assert r.status_code == 503
    assert local_client.get("/healthz").status_code == 200


def test_k_capped(service_env):
    config = ServiceConfig(checkpoint_path=service_env["checkpoint"],
                           index_dir=service_env["index_dir"],
                           gallery_root=service_env["gallery_root"], k_cap=3)
    local_client = TestClient(create_app(config))
    r = local_client.post("/api/query",
                          files={"sketch": ("s.png", sketch_bytes(service_env), "image/png")},
                          data={"k": "50"})
    assert r.status_code == 200
    assert len(r.json()["results"]) == 3
