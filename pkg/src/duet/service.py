"""HTTP service for index management and composed querying.

Stateless over an immutable (checkpoint, index) pair loaded at startup; all
endpoints are read-only. The sketch-studio UI and scripts drive retrieval
through POST /api/query.
"""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .errors import ConfigError
from .index import GalleryIndex, query_index
from .training import load_inference_model
from .wordlists import load_phrases

log = logging.getLogger(__name__)

THUMB_SIDE = 256


@dataclass
class ServiceConfig:
    checkpoint_path: str
    index_dir: str
    gallery_root: str
    host: str = "127.0.0.1"
    port: int = 8000
    max_upload_bytes: int = 4 * 1024 * 1024
    k_cap: int = 100
    cors_origins: list[str] = field(default_factory=lambda: ["*"])

    def __post_init__(self):
        if self.k_cap < 1:
            raise ConfigError("k cap must be >= 1")


class ServiceState:
    def __init__(self):
        self.adapter = None
        self.composer = None
        self.index: GalleryIndex | None = None
        self.fingerprint: str | None = None

    @property
    def ready(self) -> bool:
        return self.index is not None and self.composer is not None


def create_app(config: ServiceConfig, strict: bool = True) -> FastAPI:
    app = FastAPI(title="duet retrieval service")
    app.add_middleware(
        CORSMiddleware, allow_origins=config.cors_origins,
        allow_methods=["*"], allow_headers=["*"],
    )
    state = ServiceState()
    app.state.service = state
    app.state.config = config

    try:
        adapter, composer, meta = load_inference_model(config.checkpoint_path)
        state.adapter = adapter
        state.composer = composer
        state.fingerprint = meta["fingerprint"]
        state.index = GalleryIndex.load(config.index_dir)
        if state.index.fingerprint != state.fingerprint:
            msg = (f"index fingerprint {state.index.fingerprint} does not match "
                   f"checkpoint {state.fingerprint}")
            if strict:
                raise ConfigError(msg)
            log.warning("%s; queries will be rejected with 409", msg)
    except ConfigError:
        raise
    except Exception as e:
        if strict:
            raise
        log.warning("service starting without a loaded index: %s", e)

    def _require_ready():
        if not state.ready:
            raise HTTPException(status_code=503, detail="index not loaded")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/api/meta")
    def meta():
        _require_ready()
        return {
            "gallery_size": len(state.index),
            "backbone_id": state.index.backbone_id,
            "checkpoint_fingerprint": state.fingerprint,
            "connectors": load_phrases("connecting_word"),
            "k_cap": config.k_cap,
        }

    @app.post("/api/query")
    async def query(request: Request, sketch: UploadFile = File(...),
                    text: str | None = Form(default=None),
                    connector: str | None = Form(default=None),
                    k: int = Form(default=10)):
        _require_ready()
        if state.index.fingerprint != state.fingerprint:
            raise HTTPException(status_code=409, detail="index/checkpoint fingerprint mismatch")
        payload = await sketch.read()
        if len(payload) > config.max_upload_bytes:
            raise HTTPException(status_code=400, detail="sketch upload too large")
        try:
            image = Image.open(io.BytesIO(payload))
            image.load()
        except Exception:
            raise HTTPException(status_code=400, detail="sketch is not a decodable image")
        if k < 0:
            raise HTTPException(status_code=400, detail="k must be >= 0")
        k = min(k, config.k_cap, len(state.index))
        text = text if text and text.strip() else None
        vec = state.composer.build_inference_query(image, text=text, connector=connector)
        echo = {
            "sketch_sha256": hashlib.sha256(payload).hexdigest(),
            "text": text,
            "connector": connector,
        }
        result = query_index(state.index, vec, k, echo=echo)
        return {
            "results": [
                {"id": pid, "score": score, "thumbnail_url": f"/api/image/{pid}?thumb=1"}
                for pid, score in zip(result.ids, result.scores)
            ],
            "query": echo,
        }

    @app.get("/api/image/{photo_id:path}")
    def image(photo_id: str, thumb: int = 0):
        _require_ready()
        if photo_id not in state.index.metadata:
            raise HTTPException(status_code=404, detail="unknown photo id")
        path = Path(config.gallery_root) / photo_id
        if not path.exists():
            raise HTTPException(status_code=404, detail="photo file missing")
        if thumb:
            with Image.open(path) as img:
                img = img.convert("RGB")
                img.thumbnail((THUMB_SIDE, THUMB_SIDE))
                buf = io.BytesIO()
                img.save(buf, format="PNG")
            return Response(buf.getvalue(), media_type="image/png")
        suffix = path.suffix.lower()
        media = "image/png" if suffix == ".png" else "image/jpeg"
        return Response(path.read_bytes(), media_type=media)

    return app


def run_service(config: ServiceConfig):
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
