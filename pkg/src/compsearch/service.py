"""HTTP search service over an immutable index and checkpoint.

All state is loaded once at app construction and never mutated, so
concurrent requests are safe and responses depend only on the request
body (timingMs aside). A fingerprint mismatch between index and
checkpoint at startup is a hard refusal, not a warning.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ConfigDict, Field

from .composition import (
    MAX_OBJECTS, AnnotationError, Box, SceneAnnotation, load_categories,
    rasterize,
)
from .gallery import (
    GalleryIndex, checkpoint_fingerprint, load_index, search, textual_search,
)
from .model import encode_query, flatten_embedding, load_checkpoint

PALETTE = [
    (214, 69, 65), (65, 131, 215), (38, 166, 91), (244, 179, 80),
    (142, 68, 173), (240, 98, 146), (0, 148, 133), (121, 85, 72),
    (96, 125, 139), (255, 112, 67),
]


class ServiceError(Exception):
    pass


@dataclass(frozen=True)
class ServiceConfig:
    index_path: str | Path
    checkpoint_path: str | Path
    categories_path: str | Path
    thumb_dir: str | Path | None = None
    max_k: int = 100
    host: str = "127.0.0.1"
    port: int = 8000


class ObjectSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    category: int = Field(ge=0)
    bbox: list[float] = Field(min_length=4, max_length=4)


class SearchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    objects: list[ObjectSpec] = Field(min_length=1, max_length=MAX_OBJECTS)
    k: int = Field(default=10, ge=1)
    mode: Literal["cal", "textual"] = "cal"


def _error(status: int, message: str, field: str | None = None) -> JSONResponse:
    body = {"error": message}
    if field is not None:
        body["field"] = field
    return JSONResponse(status_code=status, content=body)


def _render_thumbnail(scene: SceneAnnotation, size: int = 128) -> bytes:
    from PIL import Image, ImageDraw

    img = Image.new("RGB", (size, size), (248, 248, 248))
    draw = ImageDraw.Draw(img, "RGBA")
    for box in scene.objects:
        color = PALETTE[box.category % len(PALETTE)]
        x0, y0 = box.x * size, box.y * size
        x1, y1 = (box.x + box.w) * size, (box.y + box.h) * size
        draw.rectangle([x0, y0, x1, y1], fill=color + (140,),
                       outline=color, width=2)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(cfg: ServiceConfig) -> FastAPI:
    index: GalleryIndex = load_index(cfg.index_path)
    _, qenc, model_cfg = load_checkpoint(cfg.checkpoint_path)
    expected = index.fingerprint.get("checkpoint")
    if expected is not None and \
            expected != checkpoint_fingerprint(cfg.checkpoint_path):
        raise ServiceError("index fingerprint does not match the checkpoint; "
                           "rebuild the index")
    categories = load_categories(cfg.categories_path)
    if model_cfg.c != len(categories):
        raise ServiceError(f"checkpoint expects {model_cfg.c} categories, "
                           f"file lists {len(categories)}")
    max_k = min(cfg.max_k, index.size)
    scene_by_id = ({s.id: s for s in index.scenes}
                   if index.scenes is not None else {})
    thumb_dir = Path(cfg.thumb_dir) if cfg.thumb_dir is not None else None

    app = FastAPI(title="compsearch")

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"] if p != "body")
        return _error(422, first["msg"], field or None)

    @app.exception_handler(AnnotationError)
    async def annotation_handler(request: Request, exc: AnnotationError):
        return _error(422, str(exc), "objects")

    @app.get("/health")
    def health():
        return {"status": "ok", "gallery": index.size,
                "dout": model_cfg.dout, "categories": len(categories)}

    @app.get("/categories")
    def list_categories():
        return [{"id": i, "name": name} for i, name in enumerate(categories)]

    @app.post("/search")
    def run_search(req: SearchRequest):
        if req.k > max_k:
            return _error(422, f"k must be <= {max_k}", "k")
        for pos, obj in enumerate(req.objects):
            if obj.category >= len(categories):
                return _error(422, f"unknown category {obj.category}",
                              f"objects.{pos}.category")
        boxes = tuple(Box(o.category, *o.bbox) for o in req.objects)
        scene = SceneAnnotation("query", boxes)

        start = time.perf_counter()
        if req.mode == "textual":
            result = textual_search(index, scene.categories(), req.k)
        else:
            cmap = rasterize(scene, model_cfg.c, model_cfg.grid)
            emb = flatten_embedding(
                encode_query(cmap, qenc, feat_hw=model_cfg.feat_hw))
            result = search(index, emb.data[0], req.k)
        elapsed = (time.perf_counter() - start) * 1000.0

        results = [{"id": it.image_id, "score": it.score, "rank": it.rank,
                    "thumbnail": f"/thumb/{it.image_id}"}
                   for it in result.items]
        return {"results": results, "timingMs": elapsed}

    @app.get("/thumb/{image_id}")
    def thumb(image_id: str):
        if thumb_dir is not None:
            path = thumb_dir / f"{image_id}.png"
            if not path.exists():
                return _error(404, f"no thumbnail for {image_id}")
            return Response(path.read_bytes(), media_type="image/png")
        scene = scene_by_id.get(image_id)
        if scene is None:
            return _error(404, f"unknown image id {image_id}")
        return Response(_render_thumbnail(scene), media_type="image/png")

    return app


def serve(cfg: ServiceConfig) -> None:
    import uvicorn

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
