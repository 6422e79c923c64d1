"""Training losses and evaluation metrics.

Losses: masked L1 vertex loss plus a normalized mouth-shape loss,

    L = w1 * L_vx + w2 * L_lm
    L_lm = d1 * |H_p - H_g| + d2 * |V_p - V_g|,   d1 = 1/0.0476, d2 = 1/0.017

both differentiable through the linear face model. Metrics: 24-keypoint
lip movement error in millimeters after a least-squares similarity
alignment, and an emotion confusion matrix over clips classified by
majority vote of sampled frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, DegenerateGeometryError
from .face_model import FaceModel, mouth_shape

MM_PER_METER = 1000.0


@dataclass(frozen=True)
class LossConfig:
    w1: float = 1.0
    w2: float = 1.0
    d1: float = 1.0 / 0.0476
    d2: float = 1.0 / 0.017

    def __post_init__(self):
        if min(self.w1, self.w2, self.d1, self.d2) <= 0:
            raise ConfigurationError("loss weights must be positive")


def _abs(x):
    return torch.abs(x) if torch.is_tensor(x) else np.abs(x)


def vertex_loss(pred_vertices, gt_vertices, mask):
    """Mean absolute difference over masked vertices and all 3 axes."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ConfigurationError("vertex mask selects no vertices")
    if torch.is_tensor(pred_vertices):
        sel = torch.from_numpy(mask)
        diff = _abs(pred_vertices[..., sel, :] - torch.as_tensor(gt_vertices)[..., sel, :])
        return diff.mean()
    diff = _abs(np.asarray(pred_vertices)[..., mask, :] - np.asarray(gt_vertices)[..., mask, :])
    return diff.mean()


def mouth_loss(pred_vertices, gt_vertices, model: FaceModel, config: LossConfig = LossConfig()):
    """d1-weighted width gap plus d2-weighted height gap."""
    h_p, v_p = mouth_shape(pred_vertices, model)
    h_g, v_g = mouth_shape(gt_vertices, model)
    return config.d1 * _abs(h_p - h_g) + config.d2 * _abs(v_p - v_g)


def total_loss(l_vx, l_lm, config: LossConfig = LossConfig()):
    return config.w1 * l_vx + config.w2 * l_lm


def mouth_shape_sequence(vertices, model: FaceModel):
    """Vectorized mouth descriptors over a (T, V, 3) sequence: (H_t, V_t)."""
    ext = model.mouth_extremities

    def dist(a, b):
        d = vertices[:, a, :] - vertices[:, b, :]
        return ((d * d).sum(-1)) ** 0.5

    return dist(ext.left, ext.right), dist(ext.top, ext.bottom)


def sequence_loss(pred_verts, gt_verts, model: FaceModel, config: LossConfig = LossConfig()):
    """Total loss over a (T, V, 3) sequence; mouth term averaged over frames."""
    l_vx = vertex_loss(pred_verts, gt_verts, model.vertex_mask)
    h_p, v_p = mouth_shape_sequence(pred_verts, model)
    h_g, v_g = mouth_shape_sequence(gt_verts, model)
    l_lm = (config.d1 * _abs(h_p - h_g) + config.d2 * _abs(v_p - v_g)).mean()
    return total_loss(l_vx, l_lm, config), l_vx, l_lm


# ---------------------------------------------------------------------------
# Similarity alignment (Umeyama closed form)
# ---------------------------------------------------------------------------


@dataclass
class SimilarityTransform:
    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3), scale=1.0)


def align_similarity(source_points, target_points) -> SimilarityTransform:
    """Least-squares similarity transform source -> target via SVD."""
    src = np.asarray(source_points, dtype=np.float64)
    tgt = np.asarray(target_points, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ConfigurationError("point sets must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 points for a similarity fit")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    sc, tc = src - mu_s, tgt - mu_t
    cov = tc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear or coincident")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    var_s = (sc**2).sum() / n
    scale = float(np.trace(np.diag(d) @ s) / var_s)
    translation = mu_t - scale * rotation @ mu_s
    return SimilarityTransform(rotation=rotation, translation=translation, scale=scale)


# ---------------------------------------------------------------------------
# Lip movement error
# ---------------------------------------------------------------------------


@dataclass
class LipErrorReport:
    distances_mm: np.ndarray  # (T, 24)
    mean_mm: float
    max_mm: float
    transform: SimilarityTransform

    def to_dict(self) -> dict:
        return {
            "mean_mm": self.mean_mm,
            "max_mm": self.max_mm,
            "frames": int(self.distances_mm.shape[0]),
            "keypoints": int(self.distances_mm.shape[1]),
        }


def lip_error(pred_sequence, gt_sequence, model: FaceModel, align: bool = True) -> LipErrorReport:
    """Per-frame per-keypoint lip distances (mm) after sequence alignment.

    One similarity transform is fit on the full-face vertices of the whole
    sequence, then applied to the prediction before measuring the 24 lip
    keypoints against ground truth.
    """
    pred = np.asarray(pred_sequence, dtype=np.float64)
    gt = np.asarray(gt_sequence, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ConfigurationError(
            f"sequences must share shape (T, V, 3); got {pred.shape} vs {gt.shape}"
        )
    if align:
        transform = align_similarity(pred.reshape(-1, 3), gt.reshape(-1, 3))
        pred = transform.apply(pred.reshape(-1, 3)).reshape(gt.shape)
    else:
        transform = SimilarityTransform.identity()
    lips = model.lip_keypoints
    diff = pred[:, lips, :] - gt[:, lips, :]
    distances = np.sqrt((diff**2).sum(axis=2)) * MM_PER_METER
    return LipErrorReport(
        distances_mm=distances,
        mean_mm=float(distances.mean()),
        max_mm=float(distances.max()),
        transform=transform,
    )


def pool_lip_errors(reports: list[LipErrorReport]) -> tuple[float, float]:
    """Overall mean and max over every (sequence, frame, keypoint)."""
    if not reports:
        raise ConfigurationError("no lip error reports to pool")
    all_d = np.concatenate([r.distances_mm.reshape(-1) for r in reports])
    return float(all_d.mean()), float(all_d.max())


# ---------------------------------------------------------------------------
# Emotion consistency
# ---------------------------------------------------------------------------


class SignatureClassifier:
    """Oracle emotion classifier scoring params against category signatures.

    Non-neutral logits are normalized projections onto each category's
    expression signature; the neutral logit is a fixed threshold, so a
    frame reads neutral when nothing projects strongly.
    """

    def __init__(self, signatures, labels, neutral_index: int = 0, neutral_threshold: float = 0.25):
        self.signatures = np.asarray(signatures, dtype=np.float64)
        self.labels = tuple(labels)
        self.neutral_index = neutral_index
        self.neutral_threshold = neutral_threshold
        if self.signatures.shape[0] != len(self.labels):
            raise ConfigurationError("one signature per label required")
        norms = np.linalg.norm(self.signatures, axis=1)
        if any(norms[i] == 0 for i in range(len(norms)) if i != neutral_index):
            raise ConfigurationError("non-neutral signatures must be nonzero")
        self._sq = np.where(norms > 0, norms**2, 1.0)

    def logits(self, params_frame: np.ndarray) -> np.ndarray:
        out = self.signatures @ np.asarray(params_frame, dtype=np.float64) / self._sq
        out[self.neutral_index] = self.neutral_threshold
        return out

    def predict(self, params_frame: np.ndarray) -> int:
        return int(np.argmax(self.logits(params_frame)))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (n_labels, n_labels) int, rows = true
    labels: tuple
    short_clips: list = field(default_factory=list)  # clips sampled with replacement

    def row_normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, np.maximum(sums, 1), dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "counts": self.counts.tolist(),
            "row_normalized": self.row_normalized().tolist(),
            "short_clips": list(self.short_clips),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["true\\pred", *self.labels])
            for i, label in enumerate(self.labels):
                writer.writerow([label, *self.counts[i].tolist()])


def emotion_confusion(
    animations: list[tuple[np.ndarray, str]],
    classifier: SignatureClassifier,
    frames_per_clip: int = 10,
    seed: int = 0,
) -> ConfusionMatrix:
    """Clip-level confusion matrix: majority vote over sampled frames."""
    labels = classifier.labels
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    short = []
    rng = np.random.default_rng(seed)
    for clip_idx, (params, true_label) in enumerate(animations):
        params = np.asarray(params, dtype=np.float64)
        t = params.shape[0]
        if true_label not in labels:
            raise ConfigurationError(f"unknown clip label {true_label!r}")
        if t >= frames_per_clip:
            picks = rng.choice(t, size=frames_per_clip, replace=False)
        else:
            picks = rng.choice(t, size=frames_per_clip, replace=True)
            short.append(clip_idx)
        votes = np.zeros(len(labels), dtype=np.int64)
        for fr in picks:
            votes[classifier.predict(params[fr])] += 1
        pred = int(np.argmax(votes))  # ties resolve to the lowest label index
        counts[labels.index(true_label), pred] += 1
    return ConfusionMatrix(counts=counts, labels=tuple(labels), short_clips=short)
