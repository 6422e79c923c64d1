"""HTTP service exposing the animation pipeline to scripts and the studio UI.

All numeric payloads are plain JSON floats; animation requests are
stateless and produce byte-identical frames to the CLI for the same
inputs (the UI never sees different numbers than the test suite).
"""

from __future__ import annotations

import base64
import tempfile
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from .dataset import load_corpus, split_corpus
from .emotion import EMOTION_LABELS, EmotionSchedule
from .errors import ConfigurationError, CorpusError
from .face_model import obj_text
from .pipeline import AnimateStageError, Bundle, animate
from .trainer import evaluate


class AnimateRequest(BaseModel):
    audio_b64: str | None = None
    audio_path: str | None = None
    schedule: list | dict | None = None
    identity: list[float] | None = None


class EvaluateRequest(BaseModel):
    corpus: str
    split: str = "val"
    seed: int = 0


def create_app(bundle: Bundle) -> FastAPI:
    app = FastAPI(title="emoface", version="0.1.0")
    model = bundle.face_model

    @app.get("/health")
    def health():
        return {"status": "ok", "checkpoint": bundle.checkpoint_hash}

    @app.get("/model")
    def model_info():
        return {
            "dims": {
                "V": model.n_vertices,
                "F": int(model.faces.shape[0]),
                "S": model.n_shape,
                "E": model.n_expression,
                "P": model.n_pose,
            },
            "labels": list(bundle.labels),
            "checkpoint": bundle.checkpoint_hash,
            "fps": 30.0,
            "expression_names": model.expression_names,
            "pose_names": model.pose_names,
            "flags": bundle.flags,
        }

    @app.get("/mesh/template", response_class=PlainTextResponse)
    def mesh_template():
        return obj_text(model.template_vertices, model.faces)

    @app.get("/mesh/basis")
    def mesh_basis():
        return {
            "template": model.template_vertices.tolist(),
            "faces": model.faces.tolist(),
            "shape_basis": model.shape_basis.tolist(),
            "expression_basis": model.expression_basis.tolist(),
            "pose_basis": model.pose_basis.tolist(),
            "lip_keypoints": model.lip_keypoints.tolist(),
        }

    @app.post("/animate")
    def animate_endpoint(req: AnimateRequest):
        if (req.audio_b64 is None) == (req.audio_path is None):
            raise HTTPException(400, detail="provide exactly one of audio_b64 or audio_path")
        try:
            schedule = EmotionSchedule.from_obj(req.schedule) if req.schedule else None
        except ConfigurationError as exc:
            raise HTTPException(
                422, detail={"message": str(exc), "valid_labels": list(EMOTION_LABELS)}
            ) from exc
        identity = None if req.identity is None else np.asarray(req.identity, dtype=np.float64)
        try:
            if req.audio_b64 is not None:
                with tempfile.NamedTemporaryFile(suffix=".wav") as tmp:
                    tmp.write(base64.b64decode(req.audio_b64))
                    tmp.flush()
                    seq = animate(bundle, tmp.name, schedule, identity)
            else:
                path = Path(req.audio_path)
                if not path.exists():
                    raise HTTPException(400, detail=f"no audio file at {path}")
                seq = animate(bundle, path, schedule, identity)
        except ConfigurationError as exc:
            raise HTTPException(
                422, detail={"message": str(exc), "valid_labels": list(EMOTION_LABELS)}
            ) from exc
        except AnimateStageError as exc:
            raise HTTPException(400, detail=str(exc)) from exc
        return seq.to_dict()

    @app.post("/evaluate")
    def evaluate_endpoint(req: EvaluateRequest):
        try:
            corpus = load_corpus(req.corpus)
        except CorpusError as exc:
            raise HTTPException(400, detail=str(exc)) from exc
        if req.split == "all":
            ids = None
        else:
            splits = split_corpus(corpus, seed=req.seed)
            if req.split not in splits:
                raise HTTPException(400, detail=f"unknown split {req.split!r}")
            ids = splits[req.split]
        try:
            return evaluate(bundle, corpus, ids, seed=req.seed)
        except ConfigurationError as exc:
            raise HTTPException(400, detail=str(exc)) from exc

    return app
