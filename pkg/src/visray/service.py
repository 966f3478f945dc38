"""Live render service: pull-based frames over HTTP and WebSocket.

The scene snapshot (dataset + fitted parameters + config) is immutable for
the lifetime of the app; renders are read-only, so concurrent connections
never interleave state. Each WebSocket connection holds at most one
in-flight render and always renders the newest received pose, dropping any
stale queued ones.

Wire formats (also in docs/api.md):
  GET  /scene   -> JSON scene descriptor
  POST /render  -> body {"camera": <camera JSON>, "width"?, "height"?,
                   "quality"?}; reply image/png with X-Render-Millis header
  WS   /stream  -> text messages like the /render body plus "id"; binary
                   replies: 4-byte big-endian JSON header length, JSON
                   header {"id", "render_millis", "width", "height"}, PNG
"""

from __future__ import annotations

import asyncio
import io
import json
import struct
import time

import numpy as np
from fastapi import FastAPI, Response, WebSocket, WebSocketDisconnect
from PIL import Image

from .camera import Camera
from .optim import default_offset_bounds
from .pipeline import render_frame


def _png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class BadRequest(ValueError):
    pass


def _parse_render_request(body: dict, config, default_cam: Camera) -> Camera:
    if not isinstance(body, dict):
        raise BadRequest("body must be a JSON object")
    cam_json = body.get("camera")
    if cam_json is None:
        raise BadRequest("missing field: camera")
    try:
        cam = Camera.from_json_dict(cam_json)
    except (ValueError, TypeError, KeyError) as e:
        raise BadRequest(f"camera: {e}")
    width = int(body.get("width", cam.width))
    height = int(body.get("height", cam.height))
    if (width, height) != (cam.width, cam.height):
        # rescale intrinsics to the requested output resolution
        sx = width / cam.width
        sy = height / cam.height
        cam = Camera(
            fx=cam.fx * sx,
            fy=cam.fy * sy,
            cx=(cam.cx + 0.5) * sx - 0.5,
            cy=(cam.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
            rotation=cam.rotation,
            translation=cam.translation,
        )
    step = max(config.upsample, config.geo_scale)
    if cam.width % step or cam.height % step or cam.width < 2 * step or cam.height < 2 * step:
        raise BadRequest(f"width/height must be multiples of {step} (and at least {2 * step})")
    return cam


def create_app(dataset, params, config, render_workers: int = 1) -> FastAPI:
    app = FastAPI(title="visray render service")
    lo, hi = default_offset_bounds(dataset)
    center = (0.5 * (lo + hi)).tolist()
    mid = 0.5 * (dataset.t_near + dataset.t_far)
    cam0 = dataset.cameras[0]
    step = max(config.upsample, config.geo_scale)

    def render_png(cam: Camera):
        t0 = time.perf_counter()
        out, _ = render_frame(cam, dataset, params, config, workers=render_workers)
        ms = (time.perf_counter() - t0) * 1e3
        return _png_bytes(out.i_hr), ms

    @app.get("/scene")
    def scene():
        return {
            "format": 1,
            "cameras": [c.to_json_dict() for c in dataset.cameras],
            "t_near": dataset.t_near,
            "t_far": dataset.t_far,
            "width": cam0.width,
            "height": cam0.height,
            "size_multiple": step,
            "resolution_options": [
                {"width": cam0.width // k, "height": cam0.height // k}
                for k in (1, 2)
                if cam0.width % (step * k) == 0 and cam0.width // k >= 2 * step
            ],
            "orbit": {"target": center, "radius": float(mid)},
        }

    @app.post("/render")
    async def render(body: dict):
        try:
            cam = _parse_render_request(body, config, cam0)
        except BadRequest as e:
            return Response(
                content=json.dumps({"error": str(e)}), status_code=400, media_type="application/json"
            )
        try:
            png, ms = await asyncio.get_event_loop().run_in_executor(None, render_png, cam)
        except Exception as e:  # render failure surfaces as 500 with a diagnostic
            return Response(
                content=json.dumps({"error": f"render failed: {e}"}),
                status_code=500,
                media_type="application/json",
            )
        return Response(content=png, media_type="image/png", headers={"X-Render-Millis": f"{ms:.2f}"})

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        latest: dict = {}
        fresh = asyncio.Event()
        done = asyncio.Event()

        async def receiver():
            try:
                while True:
                    text = await ws.receive_text()
                    try:
                        msg = json.loads(text)
                    except json.JSONDecodeError:
                        await ws.send_text(json.dumps({"error": "malformed JSON"}))
                        continue
                    latest["msg"] = msg  # newest pose wins; older ones are dropped
                    fresh.set()
            except WebSocketDisconnect:
                pass
            finally:
                done.set()
                fresh.set()

        async def renderer():
            loop = asyncio.get_event_loop()
            while True:
                await fresh.wait()
                if done.is_set():
                    return
                fresh.clear()
                msg = latest.get("msg")
                if msg is None:
                    continue
                req_id = str(msg.get("id", ""))
                try:
                    cam = _parse_render_request(msg, config, cam0)
                except BadRequest as e:
                    await ws.send_text(json.dumps({"id": req_id, "error": str(e)}))
                    continue
                try:
                    png, ms = await loop.run_in_executor(None, render_png, cam)
                except Exception as e:
                    await ws.send_text(json.dumps({"id": req_id, "error": f"render failed: {e}"}))
                    continue
                header = json.dumps(
                    {"id": req_id, "render_millis": round(ms, 2), "width": cam.width, "height": cam.height}
                ).encode()
                if done.is_set():
                    return
                await ws.send_bytes(struct.pack(">I", len(header)) + header + png)

        recv_task = asyncio.create_task(receiver())
        render_task = asyncio.create_task(renderer())
        try:
            await asyncio.wait({recv_task, render_task}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            done.set()
            fresh.set()
            for t in (recv_task, render_task):
                t.cancel()

    return app


def decode_stream_frame(blob: bytes):
    """Split a binary /stream reply into (header dict, png bytes)."""
    (n,) = struct.unpack(">I", blob[:4])
    header = json.loads(blob[4 : 4 + n].decode())
    return header, blob[4 + n :]
