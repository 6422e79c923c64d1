"""Emotion controller: priors prediction, user blending, residual augmentation.

Per-frame 7-dim emotion logits act as a continuous emotion representation.
At inference they are predicted from audio by a bi-LSTM, smoothed, mean-
centered per utterance, and shifted by the user's scheduled one-hot
condition:

    gamma_t = gamma_user_t + (gamma_audio_t - mean(gamma_audio))

The blended logits are embedded to 128-dim emotion features and drive a
convolutional augment network that adds a residual on top of the raw face
parameters, so a zero residual leaves lip articulation untouched.

Also hosts a Monte-Carlo / closed-form verifier for the linear relation
between logit deviations and emotion strength under the two-class mirrored
Gaussian model (slope 2*mu/sigma^2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import blobs
from .errors import ConfigurationError
from .nets import DTYPE, seeded_init_, to_tensor

EMOTION_LABELS = (
    "neutral",
    "happiness",
    "anger",
    "sadness",
    "disgust",
    "fear",
    "surprise",
)
N_EMOTIONS = len(EMOTION_LABELS)
EMOTION_FEATURE_DIM = 128


@dataclass
class EmotionPriors:
    """Per-frame emotion logits gamma with provenance."""

    logits: np.ndarray  # (T, 7)
    source: str  # video_oracle | audio_predicted | blended
    labels: tuple = EMOTION_LABELS

    def __post_init__(self):
        if self.source not in ("video_oracle", "audio_predicted", "blended"):
            raise ConfigurationError(f"unknown priors source {self.source!r}")
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[1] != len(self.labels):
            raise ConfigurationError("priors must be (T, 7)")
        if not np.all(np.isfinite(self.logits)):
            raise ConfigurationError("priors must be finite")


@dataclass
class EmotionSchedule:
    """User keyframes (time, category, intensity) expanded per frame."""

    keyframes: list = field(default_factory=list)  # [(time, category, intensity)]
    interpolation: str = "hold"  # hold | linear

    def __post_init__(self):
        if self.interpolation not in ("hold", "linear"):
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")
        norm = []
        last_time = None
        for time, category, intensity in self.keyframes:
            if category not in EMOTION_LABELS:
                raise ConfigurationError(
                    f"unknown emotion category {category!r}; "
                    f"valid labels: {', '.join(EMOTION_LABELS)}"
                )
            if not 0.0 <= intensity <= 1.0:
                raise ConfigurationError("intensity must lie in [0, 1]")
            if last_time is not None and time <= last_time:
                raise ConfigurationError("keyframe times must be strictly increasing")
            last_time = time
            norm.append((float(time), str(category), float(intensity)))
        self.keyframes = norm

    def conditions(self, times) -> np.ndarray:
        """Per-frame user condition vectors gamma_u, shape (T, 7)."""
        times = np.asarray(times, dtype=np.float64)
        out = np.zeros((len(times), N_EMOTIONS))
        if not self.keyframes:
            return out
        kf_times = np.array([k[0] for k in self.keyframes])
        vectors = np.zeros((len(self.keyframes), N_EMOTIONS))
        for i, (_, category, intensity) in enumerate(self.keyframes):
            vectors[i, EMOTION_LABELS.index(category)] = intensity
        idx = np.searchsorted(kf_times, times, side="right") - 1
        for t, i in enumerate(idx):
            if i < 0:
                continue  # before the first keyframe: no user condition
            if self.interpolation == "hold" or i + 1 >= len(self.keyframes):
                out[t] = vectors[i]
            else:
                t0, t1 = kf_times[i], kf_times[i + 1]
                w = (times[t] - t0) / (t1 - t0)
                out[t] = (1.0 - w) * vectors[i] + w * vectors[i + 1]
        return out

    def canonical(self) -> dict:
        return {
            "interpolation": self.interpolation,
            "keyframes": [
                {"time": t, "category": c, "intensity": i} for t, c, i in self.keyframes
            ],
        }

    def schedule_hash(self) -> str:
        return blobs.sha256_bytes(blobs.canonical_json(self.canonical()).encode())

    @classmethod
    def from_obj(cls, obj) -> "EmotionSchedule":
        """Accept the on-disk list form or the explicit object form."""
        if isinstance(obj, dict):
            keyframes = obj.get("keyframes", [])
            interpolation = obj.get("interpolation", "hold")
        else:
            keyframes, interpolation = obj, "hold"
        return cls(
            keyframes=[(k["time"], k["category"], k["intensity"]) for k in keyframes],
            interpolation=interpolation,
        )

    @classmethod
    def from_json(cls, path) -> "EmotionSchedule":
        with open(path) as f:
            return cls.from_obj(json.load(f))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class EmotionPredictorNet(nn.Module):
    """Bi-LSTM over content frames -> per-frame 7-dim emotion logits."""

    def __init__(self, content_dim: int = 192, hidden: int = 128, seed: int = 1000):
        super().__init__()
        self.net_config = {"content_dim": content_dim, "hidden": hidden}
        self.lstm = nn.LSTM(content_dim, hidden, bidirectional=True, batch_first=True)
        self.head = nn.Linear(2 * hidden, N_EMOTIONS)
        self.register_buffer("stats_min", torch.zeros(N_EMOTIONS, dtype=DTYPE))
        self.register_buffer("stats_max", torch.ones(N_EMOTIONS, dtype=DTYPE))
        self.register_buffer("stats_set", torch.zeros(1, dtype=DTYPE))
        self.to(DTYPE)
        seeded_init_(self, seed)

    def set_rescale_stats(self, low, high) -> None:
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        if np.any(high <= low):
            raise ConfigurationError("rescale stats need max > min per dimension")
        self.stats_min.copy_(torch.from_numpy(low))
        self.stats_max.copy_(torch.from_numpy(high))
        self.stats_set.fill_(1.0)

    def has_stats(self) -> bool:
        return bool(self.stats_set.item() > 0)

    def forward(self, content: torch.Tensor) -> torch.Tensor:
        if content.ndim != 2 or content.shape[0] < 1:
            raise ConfigurationError("predictor needs a non-empty (T, C) sequence")
        out, _ = self.lstm(content.unsqueeze(0))
        return self.head(out[0])

    def forward_padded(self, content: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Batched forward over zero-padded (B, T, C) clips via packing.

        Packing keeps each clip's recurrence identical to the unbatched
        forward (the backward direction never sees pad frames).
        """
        packed = nn.utils.rnn.pack_padded_sequence(
            content, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out_packed, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(
            out_packed, batch_first=True, total_length=content.shape[1]
        )
        return self.head(out)

    def rescale(self, logits: torch.Tensor) -> torch.Tensor:
        span = self.stats_max - self.stats_min
        return torch.clamp((logits - self.stats_min) / span, 0.0, 1.0)


def rescale_logits(logits: np.ndarray, low, high) -> np.ndarray:
    """Max-min rescale into [0, 1] with the stored corpus statistics."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    return np.clip((logits - low) / (high - low), 0.0, 1.0)


def predict_priors(content, net: EmotionPredictorNet) -> EmotionPriors:
    """Audio-derived priors, max-min rescaled into [0, 1]."""
    if not net.has_stats():
        raise ConfigurationError(
            "predictor has no corpus min/max statistics; call set_rescale_stats first"
        )
    net.eval()
    with torch.no_grad():
        logits = net.rescale(net(to_tensor(content)))
    return EmotionPriors(logits=logits.numpy(), source="audio_predicted")


def smooth_priors(priors: np.ndarray, radius: int) -> np.ndarray:
    """Symmetric moving average over 2*radius+1 frames with edge clamping."""
    if radius < 0:
        raise ConfigurationError("radius must be >= 0")
    priors = np.asarray(priors, dtype=np.float64)
    if radius == 0:
        return priors.copy()
    t = priors.shape[0]
    idx = np.arange(t)
    out = np.zeros_like(priors)
    for off in range(-radius, radius + 1):
        out += priors[np.clip(idx + off, 0, t - 1)]
    return out / (2 * radius + 1)


def blend_condition(audio_priors: np.ndarray, schedule: EmotionSchedule, fps: float) -> np.ndarray:
    """gamma_t = gamma_user_t + (gamma_audio_t - mean(gamma_audio)).

    The per-utterance mean removal makes user conditions shift the audio
    signal instead of fighting it; adding any constant to the audio priors
    leaves the result unchanged.
    """
    audio_priors = np.asarray(audio_priors, dtype=np.float64)
    t = audio_priors.shape[0]
    times = np.arange(t) / float(fps)
    conditions = schedule.conditions(times)
    mean = audio_priors.mean(axis=0)
    # Exact DC removal: a per-dimension constant sequence must cancel to 0.
    const = audio_priors.max(axis=0) == audio_priors.min(axis=0)
    mean = np.where(const, audio_priors[0], mean)
    return conditions + (audio_priors - mean)


class EmotionAugmentNet(nn.Module):
    """Residual augmentation: enhanced = raw + A(layer_norm([embed(gamma), raw])).

    The embedding is a learnable 7x128 matrix; the convolution stack mirrors
    the audio regressor's layer plan with 184 input channels.
    """

    def __init__(self, param_dim: int = 56, hidden: int = 128, seed: int = 1000):
        super().__init__()
        self.net_config = {"param_dim": param_dim, "hidden": hidden}
        self.param_dim = param_dim
        self.embed = nn.Linear(N_EMOTIONS, EMOTION_FEATURE_DIM, bias=False)
        in_ch = EMOTION_FEATURE_DIM + param_dim
        self.norm = nn.LayerNorm(in_ch)
        self.conv = nn.Sequential(
            nn.Conv1d(in_ch, hidden, kernel_size=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, param_dim, kernel_size=1),
        )
        self.to(DTYPE)
        seeded_init_(self, seed)

    @property
    def embedding_matrix(self) -> torch.Tensor:
        return self.embed.weight.T  # (7, 128); row i is category i's feature

    def emotion_features(self, blended: torch.Tensor) -> torch.Tensor:
        return self.embed(blended)

    def zero_final_layer_(self) -> "EmotionAugmentNet":
        with torch.no_grad():
            self.conv[-1].weight.zero_()
            self.conv[-1].bias.zero_()
        return self

    def forward(self, raw: torch.Tensor, blended: torch.Tensor) -> torch.Tensor:
        if raw.shape[0] != blended.shape[0]:
            raise ConfigurationError(
                f"raw params ({raw.shape[0]} frames) and blended priors "
                f"({blended.shape[0]} frames) must have equal length"
            )
        feats = self.emotion_features(blended)
        x = self.norm(torch.cat([feats, raw], dim=1))
        residual = self.conv(x.T.unsqueeze(0))[0].T
        return raw + residual

    def forward_padded(
        self, raw: torch.Tensor, blended: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """Batched forward over zero-padded (B, T, *) clips.

        The layer norm makes pad frames nonzero, so they are re-zeroed
        before the convolutions to match the unbatched zero same-padding;
        outputs past each clip's length must be masked by the caller.
        """
        b, t, _ = raw.shape
        feats = self.emotion_features(blended)
        x = self.norm(torch.cat([feats, raw], dim=2))
        valid = (
            torch.arange(t, device=x.device).unsqueeze(0) < lengths.unsqueeze(1)
        ).to(x.dtype)
        x = x * valid.unsqueeze(2)
        residual = self.conv(x.transpose(1, 2)).transpose(1, 2)
        return raw + residual


def augment(raw: np.ndarray, blended: np.ndarray, net: EmotionAugmentNet) -> np.ndarray:
    """Inference wrapper: numpy in, (T, 56) enhanced parameter sequence out."""
    net.eval()
    with torch.no_grad():
        out = net(to_tensor(raw), to_tensor(blended))
    return out.numpy()


# ---------------------------------------------------------------------------
# Logit-linearity verifier
# ---------------------------------------------------------------------------


@dataclass
class LinearityReport:
    slope: float
    intercept: float
    etas: np.ndarray
    delta_z: np.ndarray
    residuals: np.ndarray
    mode: str

    @property
    def max_abs_residual(self) -> float:
        return float(np.abs(self.residuals).max())


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return slope, float(ym - slope * xm)


def verify_logit_linearity(
    mu: float,
    sigma: float,
    eta_grid,
    n_samples: int = 1_000_000,
    seed: int = 0,
    mode: str = "closed_form",
) -> LinearityReport:
    """Check the two-class mirrored-Gaussian model's logit linearity.

    Class A's strength difference eta is N(mu, sigma^2); class B is its
    mirror. The log density ratio log(f(eta)/f(-eta)) is then linear in
    eta with slope 2*mu/sigma^2; this either evaluates the densities in
    closed form or estimates them from binned Monte-Carlo samples.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    etas = np.asarray(eta_grid, dtype=np.float64)
    if etas.size < 2:
        raise ValueError("eta_grid needs at least two points")

    if mode == "closed_form":
        delta = ((etas + mu) ** 2 - (etas - mu) ** 2) / (2.0 * sigma**2)
    elif mode == "monte_carlo":
        if n_samples < 10_000:
            raise ValueError("monte_carlo mode needs n_samples >= 1e4")
        rng = np.random.default_rng(seed)
        samples_a = rng.normal(mu, sigma, n_samples)
        samples_b = -rng.normal(mu, sigma, n_samples)  # mirrored class
        width = 0.05 * sigma

        def bin_counts(samples):
            lo = np.searchsorted(samples, etas - width / 2.0, side="left")
            hi = np.searchsorted(samples, etas + width / 2.0, side="left")
            return (hi - lo).astype(np.float64)

        samples_a.sort()
        samples_b.sort()
        delta = np.log((bin_counts(samples_a) + 0.5) / (bin_counts(samples_b) + 0.5))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    slope, intercept = _fit_line(etas, delta)
    residuals = delta - (slope * etas + intercept)
    return LinearityReport(
        slope=slope,
        intercept=intercept,
        etas=etas,
        delta_z=delta,
        residuals=residuals,
        mode=mode,
    )
