"""Synthetic oracle corpus: generation, on-disk format, loading, splitting.

Each clip mimics the structure the pipeline assumes of real data:

  - smooth per-frame content vectors drive the mouth through a fixed linear
    map onto the head model's jaw/width modes, with a mild style-dependent
    articulation gain (so the style vector genuinely carries information);
  - a per-clip emotion category and intensity add `intensity * envelope(t) *
    signature` to the expression coefficients;
  - per-frame oracle emotion logits are `kappa * intensity * onehot` plus
    Gaussian noise, mirroring the linear logit/strength relation.

On disk: one directory per clip holding array blobs plus a JSON sidecar,
and a corpus manifest with content hashes and corpus-level statistics.
Loaders verify hashes and also accept externally produced clips in the
same format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import blobs
from .errors import ConfigurationError, CorpusError
from .face_model import (
    FaceModel,
    FlameParams,
    SyntheticModelConfig,
    build_synthetic_model,
    evaluate_mesh,
    load_model,
    mouth_shape,
    save_model,
)
from .emotion import EMOTION_LABELS, N_EMOTIONS

MANIFEST_NAME = "manifest.json"
MODEL_NAME = "model.blob"


@dataclass
class SyntheticCorpusConfig:
    n_clips: int = 200
    duration_range: tuple = (2.0, 4.0)  # seconds
    fps: float = 30.0
    content_dim: int = 192
    style_dim: int = 64
    n_latents: int = 6  # smooth signals behind the content trajectories
    intensity_range: tuple = (0.25, 1.0)
    logit_scale: float = 6.0  # kappa
    logit_noise: float = 0.3  # sigma_n
    signature_scale: float = 3.0  # emotion offsets must dominate param noise
    mouth_coeff_std: float = 0.3  # scale of jaw/width coefficient targets
    style_gain: float = 0.4  # articulation gain from the style vector
    param_noise: float = 0.001
    shape_range: float = 0.3  # identity coefficient amplitude
    content_noise: float = 0.0  # optional noisy-audio corpus variant
    seed: int = 1000
    model: SyntheticModelConfig = field(default_factory=SyntheticModelConfig)

    def __post_init__(self):
        if self.logit_scale <= 0:
            raise ConfigurationError("logit_scale must be positive")
        if self.n_clips < 1:
            raise ConfigurationError("n_clips must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duration_range"] = list(self.duration_range)
        d["intensity_range"] = list(self.intensity_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusConfig":
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            model = dict(d["model"])
            if "half_axes" in model:
                model["half_axes"] = tuple(model["half_axes"])
            if "inner_lip_scale" in model:
                model["inner_lip_scale"] = tuple(model["inner_lip_scale"])
            d["model"] = SyntheticModelConfig(**model)
        d["duration_range"] = tuple(d.get("duration_range", (2.0, 4.0)))
        d["intensity_range"] = tuple(d.get("intensity_range", (0.25, 1.0)))
        return cls(**d)


@dataclass
class Sample:
    clip_id: str
    content: np.ndarray  # (T, C)
    style: np.ndarray  # (64,)
    params: np.ndarray  # (T, 56) ground truth
    logits: np.ndarray  # (T, 7) video-oracle emotion priors
    label: str
    intensity: float
    beta: np.ndarray  # identity shape coefficients
    fps: float

    @property
    def n_frames(self) -> int:
        return self.content.shape[0]


def build_signatures(model: FaceModel, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Per-category expression signatures, orthogonal and mouth-mode-free."""
    n_params = model.n_params
    jaw = model.expression_names.index("jaw_open")
    wide = model.expression_names.index("mouth_wide")
    free = [i for i in range(model.n_expression) if i not in (jaw, wide)]
    raw = rng.normal(size=(len(free), N_EMOTIONS - 1))
    q, _ = np.linalg.qr(raw)
    signatures = np.zeros((N_EMOTIONS, n_params))
    for c in range(1, N_EMOTIONS):
        signatures[c, free] = q[:, c - 1] * scale
    _check_signatures(signatures)
    return signatures


def _check_signatures(signatures: np.ndarray) -> None:
    norms = np.linalg.norm(signatures, axis=1)
    for i in range(1, len(signatures)):
        if norms[i] == 0:
            raise ConfigurationError(f"signature {i} is zero")
        for j in range(i + 1, len(signatures)):
            cos = signatures[i] @ signatures[j] / (norms[i] * norms[j])
            if abs(cos) >= 0.9:
                raise ConfigurationError(
                    f"signatures {i} and {j} collide (cosine {cos:.3f} >= 0.9)"
                )


def _mode_gains(model: FaceModel) -> tuple[float, float]:
    """Mouth descriptor change per unit coefficient of the jaw/width modes."""
    h0, v0 = mouth_shape(model.template_vertices, model)
    zeros = np.zeros(model.n_expression)
    jaw = zeros.copy()
    jaw[model.expression_names.index("jaw_open")] = 1.0
    wide = zeros.copy()
    wide[model.expression_names.index("mouth_wide")] = 1.0
    pose0 = np.zeros(model.n_pose)
    h_w, _ = mouth_shape(evaluate_mesh(model, None, FlameParams(wide, pose0)), model)
    _, v_j = mouth_shape(evaluate_mesh(model, None, FlameParams(jaw, pose0)), model)
    return h_w - h0, v_j - v0


def _clip_durations(config: SyntheticCorpusConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.duration_range
    return rng.uniform(lo, hi, config.n_clips)


def _smooth_latents(t_grid: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    freqs = rng.uniform(0.5, 3.0, n)
    amps = rng.uniform(0.5, 1.5, n)
    phases = rng.uniform(0, 2 * np.pi, n)
    return amps * np.sin(2 * np.pi * freqs * t_grid[:, None] + phases)


def generate_corpus(config: SyntheticCorpusConfig, output_dir) -> dict:
    """Write a deterministic synthetic corpus; returns the manifest dict."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_synthetic_model(config.model, seed=config.seed)
    save_model(model, out / MODEL_NAME)

    root_ss = np.random.SeedSequence(config.seed)
    corpus_rng = np.random.default_rng(root_ss.spawn(1)[0])
    clip_seeds = root_ss.spawn(config.n_clips + 1)[1:]

    signatures = build_signatures(model, corpus_rng, config.signature_scale)
    gain_h, gain_v = _mode_gains(model)
    content_mix = corpus_rng.normal(size=(config.content_dim, config.n_latents)) / np.sqrt(
        config.n_latents
    )
    mouth_map = corpus_rng.normal(size=(2, config.content_dim)) / np.sqrt(config.content_dim)
    style_probe = corpus_rng.normal(size=config.style_dim) / np.sqrt(config.style_dim)
    durations = _clip_durations(config, corpus_rng)

    jaw = model.expression_names.index("jaw_open")
    wide = model.expression_names.index("mouth_wide")
    jaw_pitch = model.n_expression + (
        model.pose_names.index("jaw_pitch") if "jaw_pitch" in model.pose_names else 0
    )

    clips = []
    logit_min = np.full(N_EMOTIONS, np.inf)
    logit_max = np.full(N_EMOTIONS, -np.inf)
    for i in range(config.n_clips):
        rng = np.random.default_rng(clip_seeds[i])
        label_idx = i % N_EMOTIONS
        label = EMOTION_LABELS[label_idx]
        intensity = float(rng.uniform(*config.intensity_range))
        n_frames = max(int(round(durations[i] * config.fps)), 2)
        t_grid = np.arange(n_frames) / config.fps

        latents = _smooth_latents(t_grid, config.n_latents, rng)
        content = latents @ content_mix.T
        if config.content_noise > 0:
            content = content + config.content_noise * rng.normal(size=content.shape)
        style = rng.normal(size=config.style_dim)
        articulation = 1.0 + config.style_gain * np.tanh(style_probe @ style)

        # Mouth descriptor targets -> jaw/width coefficients via mode gains.
        desc = (content @ mouth_map.T) * config.mouth_coeff_std * np.array([gain_h, gain_v])
        desc *= articulation
        coeffs = desc / np.array([gain_h, gain_v])

        envelope = 0.55 + 0.45 * 0.5 * (1.0 - np.cos(2 * np.pi * np.arange(n_frames) / (n_frames - 1)))
        params = np.zeros((n_frames, model.n_params))
        params[:, wide] = coeffs[:, 0]
        params[:, jaw] = coeffs[:, 1]
        params[:, jaw_pitch] = 0.3 * coeffs[:, 1]
        params += intensity * envelope[:, None] * signatures[label_idx][None, :]
        params += config.param_noise * rng.normal(size=params.shape)

        onehot = np.zeros(N_EMOTIONS)
        onehot[label_idx] = 1.0
        logits = config.logit_scale * intensity * onehot + config.logit_noise * rng.normal(
            size=(n_frames, N_EMOTIONS)
        )
        logit_min = np.minimum(logit_min, logits.min(axis=0))
        logit_max = np.maximum(logit_max, logits.max(axis=0))

        beta = rng.uniform(-config.shape_range, config.shape_range, model.n_shape)

        clip_id = f"clip_{i:04d}"
        clip_dir = out / "clips" / clip_id
        clip_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arr in (
            ("content", content),
            ("style", style),
            ("params", params),
            ("logits", logits),
        ):
            path = clip_dir / f"{name}.blob"
            blobs.save_archive(path, {name: arr}, {"kind": "clip_array", "name": name})
            files[f"{name}.blob"] = blobs.sha256_file(path)
        sidecar = {
            "label": label,
            "intensity": intensity,
            "beta": beta.tolist(),
            "n_frames": n_frames,
            "fps": config.fps,
        }
        sidecar_path = clip_dir / "sidecar.json"
        sidecar_path.write_text(blobs.canonical_json(sidecar))
        files["sidecar.json"] = blobs.sha256_file(sidecar_path)
        clips.append({"id": clip_id, "files": files})

    manifest = {
        "kind": "synthetic_corpus",
        "config": config.to_dict(),
        "model_file": MODEL_NAME,
        "model_hash": blobs.sha256_file(out / MODEL_NAME),
        "labels": list(EMOTION_LABELS),
        "signatures": signatures.tolist(),
        "mouth_map": mouth_map.tolist(),
        "style_probe": style_probe.tolist(),
        "stats": {
            "logit_min": logit_min.tolist(),
            "logit_max": logit_max.tolist(),
        },
        "clips": clips,
    }
    (out / MANIFEST_NAME).write_text(blobs.canonical_json(manifest))
    return manifest


@dataclass
class Corpus:
    root: Path
    manifest: dict
    model: FaceModel
    samples: list

    @property
    def config(self) -> SyntheticCorpusConfig:
        return SyntheticCorpusConfig.from_dict(self.manifest["config"])

    @property
    def signatures(self) -> np.ndarray:
        return np.asarray(self.manifest["signatures"], dtype=np.float64)

    @property
    def labels(self) -> tuple:
        return tuple(self.manifest["labels"])

    @property
    def logit_stats(self) -> tuple[np.ndarray, np.ndarray]:
        stats = self.manifest["stats"]
        return (
            np.asarray(stats["logit_min"], dtype=np.float64),
            np.asarray(stats["logit_max"], dtype=np.float64),
        )

    def by_id(self, clip_id: str) -> Sample:
        for s in self.samples:
            if s.clip_id == clip_id:
                return s
        raise KeyError(clip_id)


def _load_clip_array(clip_dir: Path, name: str, expected_hash: str) -> np.ndarray:
    path = clip_dir / f"{name}.blob"
    if not path.exists():
        raise CorpusError(f"missing corpus file {path}")
    if blobs.sha256_file(path) != expected_hash:
        raise CorpusError(f"hash mismatch for corpus file {path}")
    arrays, _ = blobs.load_archive(path)
    return arrays[name]


def load_corpus(path) -> Corpus:
    """Load and hash-verify a corpus written by :func:`generate_corpus`."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise CorpusError(f"no {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text())
    model_path = root / manifest["model_file"]
    if blobs.sha256_file(model_path) != manifest["model_hash"]:
        raise CorpusError(f"hash mismatch for corpus file {model_path}")
    model = load_model(model_path)

    samples = []
    for clip in manifest["clips"]:
        clip_dir = root / "clips" / clip["id"]
        sidecar_path = clip_dir / "sidecar.json"
        if blobs.sha256_file(sidecar_path) != clip["files"]["sidecar.json"]:
            raise CorpusError(f"hash mismatch for corpus file {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text())
        arrays = {
            name: _load_clip_array(clip_dir, name, clip["files"][f"{name}.blob"])
            for name in ("content", "style", "params", "logits")
        }
        samples.append(
            Sample(
                clip_id=clip["id"],
                content=arrays["content"],
                style=arrays["style"],
                params=arrays["params"],
                logits=arrays["logits"],
                label=sidecar["label"],
                intensity=float(sidecar["intensity"]),
                beta=np.asarray(sidecar["beta"], dtype=np.float64),
                fps=float(sidecar["fps"]),
            )
        )
    return Corpus(root=root, manifest=manifest, model=model, samples=samples)


def split_corpus(corpus_or_ids, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Deterministic disjoint exhaustive split into train/val/test id lists."""
    if isinstance(corpus_or_ids, Corpus):
        ids = [s.clip_id for s in corpus_or_ids.samples]
    else:
        ids = list(corpus_or_ids)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError("split ratios must sum to 1")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    bounds = [int(round(c * len(ids))) for c in np.cumsum(ratios)]
    names = ("train", "val", "test")[: len(ratios)]
    out = {}
    start = 0
    for name, end in zip(names, bounds):
        out[name] = shuffled[start:end]
        start = end
    return out


def samples_for(corpus: Corpus, ids: list[str]) -> list[Sample]:
    return [corpus.by_id(i) for i in ids]
