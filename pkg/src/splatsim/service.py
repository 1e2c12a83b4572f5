"""HTTP service exposing a fused scene for interactive rendering and editing.

Renders are stateless: a request captures an immutable snapshot of the
scenario edits and renders against it, so identical requests produce identical
bytes and concurrent renders never observe a half-applied trajectory update.
Trajectory PUTs are the only mutation; they swap the snapshot atomically.
"""
from __future__ import annotations

import io
import threading

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, Response
from pydantic import BaseModel

from .errors import SplatError, UnknownObjectError
from .fusion import (FusedScene, ObjectOffset, compose, edit_from_json,
                     edit_to_json)
from .gaussians import CameraView
from .rasterizer import render
from .scene_io import SceneBundle


class CameraOverride(BaseModel):
    K: list[list[float]]
    cam_to_world: list[list[float]]


class RenderRequest(BaseModel):
    frame_index: int
    camera: CameraOverride | None = None
    edits: list[dict] = []
    width: int | None = None
    height: int | None = None


class TrajectoryUpdate(BaseModel):
    offset: list[float]
    yaw: float = 0.0


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message


def _downscale_view(view: CameraView, width: int | None,
                    height: int | None) -> CameraView:
    if width is None and height is None:
        return view
    w = width or round(view.width * (height / view.height))
    h = height or round(view.height * (w / view.width))
    if w > view.width or h > view.height:
        raise ApiError(400, f"requested {w}x{h} exceeds scene resolution "
                            f"{view.width}x{view.height}")
    if w < 8 or h < 8:
        raise ApiError(400, "render size must be at least 8x8")
    sx, sy = w / view.width, h / view.height
    K = np.array(view.K, dtype=np.float64)
    # Pixel-center aware intrinsics rescale.
    K = np.array([[K[0, 0] * sx, 0.0, (K[0, 2] + 0.5) * sx - 0.5],
                  [0.0, K[1, 1] * sy, (K[1, 2] + 0.5) * sy - 0.5],
                  [0.0, 0.0, 1.0]])
    return CameraView(K=K, cam_to_world=view.cam_to_world, width=w, height=h,
                      frame_index=view.frame_index)


def _parse_edits(raw: list[dict], valid_ids) -> list:
    edits = []
    for i, d in enumerate(raw):
        try:
            edits.append(edit_from_json(d))
        except (SplatError, KeyError, TypeError, ValueError) as e:
            raise ApiError(422, f"edits[{i}]: {e}") from e
    return edits


def _png_bytes(image: torch.Tensor) -> bytes:
    from PIL import Image
    arr = (torch.clamp(image, 0, 1).numpy() * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def create_app(bundle: SceneBundle, fused: FusedScene, threads: int = 1,
               static_dir=None) -> FastAPI:
    app = FastAPI(title="splatsim scenario service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    lock = threading.Lock()
    state = {"trajectory": {}}  # object_id -> ObjectOffset, swapped atomically

    valid_ids = sorted(fused.objects)

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.status, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(p) for p in first.get("loc", ()))
        return JSONResponse(status_code=422, content={
            "code": 422, "message": f"{where}: {first.get('msg', 'invalid')}"})

    @app.exception_handler(UnknownObjectError)
    async def _unknown_object(request: Request, exc: UnknownObjectError):
        return JSONResponse(status_code=404,
                            content={"code": 404, "message": str(exc)})

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/api/scene")
    async def scene_meta():
        return {
            "width": bundle.width,
            "height": bundle.height,
            "frames": [{"index": f.index, "split": f.split,
                        "timestamp": f.timestamp} for f in bundle.frames],
            "objects": valid_ids,
            "bounds_min": bundle.bounds_min.tolist(),
            "bounds_max": bundle.bounds_max.tolist(),
        }

    @app.get("/api/frame/{t}/gt")
    async def frame_gt(t: int):
        try:
            frame = bundle.frame_by_index(t)
        except KeyError:
            raise ApiError(404, f"no frame with index {t}; valid indices are "
                                f"{[f.index for f in bundle.frames]}")
        return FileResponse(bundle.root / frame.image_path,
                            media_type="image/png")

    @app.post("/api/render")
    def render_frame(req: RenderRequest):
        try:
            frame = bundle.frame_by_index(req.frame_index)
        except KeyError:
            raise ApiError(404, f"no frame with index {req.frame_index}")
        if req.camera is not None:
            view = CameraView(K=np.asarray(req.camera.K, dtype=np.float64),
                              cam_to_world=np.asarray(req.camera.cam_to_world,
                                                      dtype=np.float64),
                              width=bundle.width, height=bundle.height,
                              frame_index=frame.index)
        else:
            view = bundle.view(frame)
        view = _downscale_view(view, req.width, req.height)
        edits = _parse_edits(req.edits, valid_ids)
        with lock:
            snapshot = list(state["trajectory"].values())
        cloud, view = compose(fused, frame.index, view, snapshot + edits)
        with torch.no_grad():
            img = render(cloud, view, threads=threads).image
        return Response(content=_png_bytes(img), media_type="image/png")

    @app.put("/api/objects/{object_id}/trajectory")
    async def put_trajectory(object_id: int, update: TrajectoryUpdate):
        if object_id not in fused.objects:
            raise UnknownObjectError(object_id, valid_ids)
        if len(update.offset) != 3:
            raise ApiError(422, "offset: expected 3 components")
        edit = ObjectOffset(object_id=object_id,
                            offset=tuple(float(v) for v in update.offset),
                            yaw=float(update.yaw))
        with lock:
            trajectory = dict(state["trajectory"])
            trajectory[object_id] = edit
            state["trajectory"] = trajectory
        return {"applied": edit_to_json(edit)}

    @app.delete("/api/objects/{object_id}/trajectory")
    async def delete_trajectory(object_id: int):
        if object_id not in fused.objects:
            raise UnknownObjectError(object_id, valid_ids)
        with lock:
            trajectory = dict(state["trajectory"])
            trajectory.pop(object_id, None)
            state["trajectory"] = trajectory
        return {"removed": object_id}

    @app.get("/api/edits")
    async def export_edits():
        with lock:
            snapshot = list(state["trajectory"].values())
        return {"edits": [edit_to_json(e) for e in snapshot]}

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="frontend")

    return app
