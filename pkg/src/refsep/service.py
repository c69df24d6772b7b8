"""HTTP facade for the interactive annotation loop.

One process serves many sessions. The prior and its pair table are loaded
once and shared read-only; each session owns an uploaded image, an ordered
annotation list, and at most one separation job. Endpoints are deterministic
functions of (session state, request) apart from job latency.
"""

import base64
import dataclasses
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import gmm, imgio
from .errors import InvalidInputError
from .gmm import PATCH_SIZE
from .posterior import build_pair_table, posterior_components, top_candidates
from .separation import ComponentAnnotation, SeparationConfig, separate_gmm_c

MAX_UPLOAD_BYTES = 32 * 1024 * 1024

_CONFIG_KEYS = ("lambda_c", "stride", "beta_schedule", "outer_iters_per_beta",
                "clip_to_physical", "seed", "cg_tol", "cg_max_iters",
                "n_candidates", "selection")


class AnnotationBody(BaseModel):
    x: int
    y: int
    rank: int | None = None
    i: int | None = None
    j: int | None = None
    n: int = 100


class SeparateBody(BaseModel):
    config: dict = {}


class _Session:
    def __init__(self, image, sha):
        self.id = uuid.uuid4().hex
        self.image = image
        self.sha = sha
        self.annotations = []
        self.state = "annotating"
        self.progress = 0.0
        self.result = None
        self.error = None
        self.layer_png = None
        self.lock = threading.Lock()


def _ann_list(session):
    return [{"x": a.col, "y": a.row, "i": a.i, "j": a.j}
            for a in session.annotations]


def create_app(model_path, workers: int = 2,
               max_upload_bytes: int = MAX_UPLOAD_BYTES) -> FastAPI:
    prior = gmm.load_model(model_path)
    table = build_pair_table(prior)
    prior_id = gmm.model_id(prior)
    sessions = {}
    executor = ThreadPoolExecutor(max_workers=max(workers, 1))

    app = FastAPI(title="refsep")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def get_session(sid) -> _Session:
        s = sessions.get(sid)
        if s is None:
            raise HTTPException(404, "unknown session")
        return s

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        data = await request.body()
        if len(data) > max_upload_bytes:
            raise HTTPException(413, "image too large")
        try:
            img = imgio.decode_image(data)
        except InvalidInputError as exc:
            raise HTTPException(415, str(exc))
        if min(img.shape) < PATCH_SIZE:
            raise HTTPException(422, "image smaller than one 8x8 patch")
        img.setflags(write=False)
        s = _Session(img, imgio.bytes_sha256(data))
        sessions[s.id] = s
        return {"session_id": s.id, "width": img.shape[1],
                "height": img.shape[0], "image_sha256": s.sha,
                "prior_id": prior_id}

    def candidates_at(s, x, y, n):
        h, w = s.image.shape
        if not (0 <= y <= h - PATCH_SIZE and 0 <= x <= w - PATCH_SIZE):
            raise HTTPException(422, "point does not admit an interior patch")
        if n < 1:
            raise HTTPException(422, "n must be >= 1")
        yp = s.image[y:y + PATCH_SIZE, x:x + PATCH_SIZE].ravel()
        return top_candidates(posterior_components(yp, prior, table),
                              min(n, prior.k * prior.k))

    @app.get("/v1/sessions/{sid}/candidates")
    def list_candidates(sid: str, x: int, y: int, n: int = 100):
        s = get_session(sid)
        cands = candidates_at(s, x, y, n)
        out = cands.to_json_obj()
        for entry, cand in zip(out, cands.entries):
            thumb = imgio.patch_pair_thumbnail(cand.x1_mean, cand.x2_complement)
            entry["thumbnail_png"] = base64.b64encode(
                imgio.encode_png(thumb, bits=8)).decode("ascii")
        return {"x": x, "y": y, "candidates": out}

    @app.post("/v1/sessions/{sid}/annotations")
    def add_annotation(sid: str, body: AnnotationBody):
        s = get_session(sid)
        with s.lock:
            if s.state != "annotating":
                raise HTTPException(409, f"session is {s.state}")
            if body.rank is not None:
                cands = candidates_at(s, body.x, body.y, body.n)
                if not 0 <= body.rank < len(cands.entries):
                    raise HTTPException(422, "rank out of range")
                entry = cands.entries[body.rank]
                i, j = entry.i, entry.j
            elif body.i is not None and body.j is not None:
                if not (0 <= body.i < prior.k and 0 <= body.j < prior.k):
                    raise HTTPException(422, "component index out of range")
                i, j = body.i, body.j
            else:
                raise HTTPException(422, "need rank or (i, j)")
            h, w = s.image.shape
            if not (0 <= body.y <= h - PATCH_SIZE
                    and 0 <= body.x <= w - PATCH_SIZE):
                raise HTTPException(422, "point does not admit a patch")
            s.annotations.append(
                ComponentAnnotation(row=body.y, col=body.x, i=i, j=j))
            return {"annotations": _ann_list(s)}

    @app.delete("/v1/sessions/{sid}/annotations/{index}")
    def delete_annotation(sid: str, index: int):
        s = get_session(sid)
        with s.lock:
            if s.state != "annotating":
                raise HTTPException(409, f"session is {s.state}")
            if not 0 <= index < len(s.annotations):
                raise HTTPException(422, "annotation index out of range")
            s.annotations.pop(index)
            return {"annotations": _ann_list(s)}

    @app.get("/v1/sessions/{sid}/annotations")
    def list_annotations(sid: str):
        return {"annotations": _ann_list(get_session(sid))}

    def run_job(s: _Session, cfg: SeparationConfig):
        try:
            def on_progress(frac):
                # monotone by construction: stages complete in order
                s.progress = max(s.progress, frac)

            res = separate_gmm_c(s.image, tuple(s.annotations), prior, table,
                                 cfg, progress_cb=on_progress)
            qy = np.round(np.clip(s.image, 0, 1) * 65535).astype(np.int64)
            qx1 = np.minimum(
                np.round(np.clip(res.x1, 0, 1) * 65535).astype(np.int64), qy)
            with s.lock:
                s.result = res
                # integer-domain complement so the two PNGs sum to the upload
                s.layer_png = (imgio.encode_png(qx1 / 65535.0),
                               imgio.encode_png((qy - qx1) / 65535.0))
                s.progress = 1.0
                s.state = "done"
        except Exception as exc:  # noqa: BLE001 - reported via the result poll
            with s.lock:
                s.error = f"{type(exc).__name__}: {exc}"
                s.state = "failed"

    @app.post("/v1/sessions/{sid}/separate", status_code=202)
    def start_separation(sid: str, body: SeparateBody):
        s = get_session(sid)
        with s.lock:
            if s.state != "annotating":
                raise HTTPException(409, f"session is {s.state}")
            bad = set(body.config) - set(_CONFIG_KEYS)
            if bad:
                raise HTTPException(422, f"unknown config keys {sorted(bad)}")
            cfg_obj = dict(body.config)
            if "beta_schedule" in cfg_obj:
                cfg_obj["beta_schedule"] = tuple(
                    float(b) for b in cfg_obj["beta_schedule"])
            try:
                cfg = SeparationConfig(**cfg_obj)
            except (InvalidInputError, TypeError) as exc:
                raise HTTPException(422, str(exc))
            s.state = "separating"
            s.progress = 0.0
        executor.submit(run_job, s, cfg)
        return {"state": "separating"}

    @app.get("/v1/sessions/{sid}/result")
    def get_result(sid: str):
        s = get_session(sid)
        with s.lock:
            out = {"state": s.state, "progress": s.progress}
            if s.state == "failed":
                out["error"] = s.error
            elif s.state == "done":
                out["objective_trace"] = [float(v)
                                          for v in s.result.objective_trace]
                out["converged"] = s.result.converged
                out["warnings"] = list(s.result.warnings)
                out["layers"] = [f"/v1/sessions/{s.id}/layers/1",
                                 f"/v1/sessions/{s.id}/layers/2"]
            return out

    @app.get("/v1/sessions/{sid}/layers/{which}")
    def get_layer(sid: str, which: int):
        s = get_session(sid)
        with s.lock:
            if s.state != "done":
                raise HTTPException(409, f"session is {s.state}")
            if which not in (1, 2):
                raise HTTPException(422, "layer must be 1 or 2")
            return Response(content=s.layer_png[which - 1],
                            media_type="image/png")

    return app
