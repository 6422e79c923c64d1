"""End-to-end animation path and trained-model bundles.

A bundle directory holds the face model, the four networks, the emotion
signatures, and a manifest with content hashes; its checkpoint hash is the
hash of the manifest file. `animate` drives the full chain:

    audio -> windows -> content/style -> raw params -> emotion priors
          -> smoothing -> user blending -> residual augmentation

and returns a 30 fps (nominal) parameter sequence with provenance hashes.
Meshes are materialized separately, with bilateral symmetry refinement
applied to the vertices at export time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blobs
from .audio import (
    LogMelExtractor,
    StyleEncoder,
    WindowingConfig,
    content_features,
    load_audio,
    style_vector,
    window_audio,
)
from .audio2flame import Audio2FlameNet, predict_params
from .emotion import (
    EMOTION_LABELS,
    EmotionAugmentNet,
    EmotionPredictorNet,
    EmotionSchedule,
    augment,
    blend_condition,
    predict_priors,
    smooth_priors,
)
from .errors import ConfigurationError
from .face_model import (
    FaceModel,
    apply_bilateral_symmetry,
    evaluate_sequence,
    load_model,
    obj_text,
    save_model,
)
from .nets import restore_net, save_net

NOMINAL_FPS = 30.0
MANIFEST_NAME = "manifest.json"


class AnimateStageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass
class AnimationSequence:
    frames: np.ndarray  # (T, 56) face parameters
    frame_times: np.ndarray  # seconds, from the audio windows
    fps: float  # nominal playback rate
    beta: np.ndarray  # identity shape coefficients
    stage: str  # "raw" or "enhanced"
    provenance: dict  # checkpoint / schedule / audio hashes

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "stage": self.stage,
            "beta": self.beta.tolist(),
            "frame_times": self.frame_times.tolist(),
            "frames": self.frames.tolist(),
            "provenance": self.provenance,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(blobs.canonical_json(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "AnimationSequence":
        return cls(
            frames=np.asarray(d["frames"], dtype=np.float64),
            frame_times=np.asarray(d["frame_times"], dtype=np.float64),
            fps=float(d["fps"]),
            beta=np.asarray(d["beta"], dtype=np.float64),
            stage=d["stage"],
            provenance=dict(d["provenance"]),
        )

    @classmethod
    def load_json(cls, path) -> "AnimationSequence":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

_COMPONENTS = {
    "face_model": "face_model.blob",
    "audio2flame": "audio2flame.blob",
    "style_encoder": "style_encoder.blob",
    "emotion_predictor": "emotion_predictor.blob",
    "emotion_augment": "emotion_augment.blob",
    "signatures": "signatures.blob",
}


def save_bundle(
    path,
    *,
    face_model: FaceModel,
    audio2flame: Audio2FlameNet,
    style_encoder: StyleEncoder,
    emotion_predictor: EmotionPredictorNet,
    emotion_augment: EmotionAugmentNet,
    signatures: np.ndarray,
    meta: dict | None = None,
) -> dict:
    """Write all components plus a hash manifest; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_model(face_model, root / _COMPONENTS["face_model"])
    save_net(audio2flame, root / _COMPONENTS["audio2flame"])
    save_net(style_encoder, root / _COMPONENTS["style_encoder"])
    save_net(emotion_predictor, root / _COMPONENTS["emotion_predictor"])
    save_net(emotion_augment, root / _COMPONENTS["emotion_augment"])
    blobs.save_archive(
        root / _COMPONENTS["signatures"], {"signatures": signatures}, {"kind": "signatures"}
    )
    manifest = {
        "kind": "bundle",
        "labels": list(EMOTION_LABELS),
        "meta": meta or {},
        "files": {name: blobs.sha256_file(root / fname) for name, fname in _COMPONENTS.items()},
    }
    (root / MANIFEST_NAME).write_text(blobs.canonical_json(manifest))
    return manifest


class Bundle:
    """A loaded trained-model directory, ready for inference."""

    def __init__(self, root: Path):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.exists():
            raise ConfigurationError(f"no bundle manifest under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.checkpoint_hash = blobs.sha256_file(manifest_path)
        for name, fname in _COMPONENTS.items():
            actual = blobs.sha256_file(self.root / fname)
            if actual != self.manifest["files"][name]:
                raise ConfigurationError(f"bundle component {fname} fails its hash check")

        self.face_model = load_model(self.root / _COMPONENTS["face_model"])
        meta = self.manifest.get("meta", {})
        self.flags = meta.get("flags", {})
        self.smoothing_radius = int(meta.get("smoothing_radius", 2))

        def build_and_restore(cls, name):
            arrays, header = blobs.load_archive(self.root / _COMPONENTS[name])
            net = cls(**header.get("net_config", {}))
            restore_net(net, self.root / _COMPONENTS[name])
            net.eval()
            return net

        self.audio2flame = build_and_restore(Audio2FlameNet, "audio2flame")
        self.style_encoder = build_and_restore(StyleEncoder, "style_encoder")
        self.emotion_predictor = build_and_restore(EmotionPredictorNet, "emotion_predictor")
        self.emotion_augment = build_and_restore(EmotionAugmentNet, "emotion_augment")
        sig_arrays, _ = blobs.load_archive(self.root / _COMPONENTS["signatures"])
        self.signatures = sig_arrays["signatures"]
        self.labels = tuple(self.manifest["labels"])

    @classmethod
    def load(cls, path) -> "Bundle":
        return cls(path)


# ---------------------------------------------------------------------------
# Animate
# ---------------------------------------------------------------------------


def _standardize_per_utterance(vectors: np.ndarray) -> np.ndarray:
    mean = vectors.mean(axis=0)
    std = vectors.std(axis=0)
    return (vectors - mean) / (std + 1e-8)


def animate(
    bundle: Bundle,
    audio_path,
    schedule: EmotionSchedule | None = None,
    identity: np.ndarray | None = None,
    deterministic: bool = True,
) -> AnimationSequence:
    """Full path from a WAV file and a user schedule to face parameters."""
    import torch

    if deterministic:
        torch.set_num_threads(1)
    schedule = schedule or EmotionSchedule()
    model = bundle.face_model
    beta = np.zeros(model.n_shape) if identity is None else np.asarray(identity, dtype=np.float64)
    if beta.shape != (model.n_shape,):
        raise ConfigurationError(
            f"identity must have {model.n_shape} shape coefficients, got {beta.shape}"
        )

    audio_bytes = Path(audio_path).read_bytes()
    provenance = {
        "checkpoint": bundle.checkpoint_hash,
        "schedule": schedule.schedule_hash(),
        "audio": blobs.sha256_bytes(audio_bytes),
    }

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - annotate with the stage name
            raise AnimateStageError(f"{name}: {exc}") from exc

    config = WindowingConfig()
    wave = stage("load_audio", lambda: load_audio(audio_path))
    segments = stage("window_audio", lambda: window_audio(wave, config))
    content = stage(
        "content_features",
        lambda: _standardize_per_utterance(
            content_features(segments, LogMelExtractor()).vectors
        ),
    )
    times = np.array([seg.time for seg in segments])
    window_fps = config.sample_rate / config.stride_samples

    if bundle.flags.get("no_style"):
        style = np.zeros(bundle.audio2flame.style_dim)
    else:
        style = stage("style_vector", lambda: style_vector(content, bundle.style_encoder))
    raw = stage("audio2flame", lambda: predict_params(bundle.audio2flame, content, style))

    if bundle.flags.get("no_emotion_module"):
        return AnimationSequence(
            frames=raw,
            frame_times=times,
            fps=NOMINAL_FPS,
            beta=beta,
            stage="raw",
            provenance=provenance,
        )

    priors = stage("predict_priors", lambda: predict_priors(content, bundle.emotion_predictor))
    smoothed = stage(
        "smooth_priors", lambda: smooth_priors(priors.logits, bundle.smoothing_radius)
    )
    blended = stage("blend_condition", lambda: blend_condition(smoothed, schedule, window_fps))
    enhanced = stage("augment", lambda: augment(raw, blended, bundle.emotion_augment))
    return AnimationSequence(
        frames=enhanced,
        frame_times=times,
        fps=NOMINAL_FPS,
        beta=beta,
        stage="enhanced",
        provenance=provenance,
    )


def sequence_vertices(
    model: FaceModel, seq: AnimationSequence, symmetric: bool = True
) -> np.ndarray:
    """Materialize (T, V, 3) mesh frames, with bilateral symmetry refinement."""
    verts = evaluate_sequence(model, seq.beta, seq.frames)
    if symmetric:
        verts = np.stack([apply_bilateral_symmetry(v, model) for v in verts])
    return verts


def dump_obj_frames(model: FaceModel, seq: AnimationSequence, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    verts = sequence_vertices(model, seq)
    paths = []
    for t in range(seq.n_frames):
        path = out / f"frame_{t:05d}.obj"
        path.write_text(obj_text(verts[t], model.faces))
        paths.append(path)
    return paths
