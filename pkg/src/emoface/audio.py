"""Audio ingestion, windowing, and the two-branch feature extraction.

The audio is resampled to 16 kHz, cut into 100 ms windows with a 33 ms
stride (one window per output animation frame), and each window turned
into a local content vector. A small transformer encoder summarizes the
content sequence into an utterance-level 64-dim style vector.

Content extraction is pluggable: the built-in extractor is a deterministic
log filterbank stack standing in for a large pretrained speech model, and
is kept frozen (pure function of the waveform).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly
from torch import nn

from .errors import AudioFormatError, ConfigurationError
from .nets import DTYPE, seeded_init_, sinusoid_table, to_tensor

TARGET_RATE = 16000
STYLE_DIM = 64
CONTENT_DIM = 192

_WAV_CODECS = {1: "PCM", 3: "IEEE_FLOAT", 6: "ALAW", 7: "MULAW", 0xFFFE: "EXTENSIBLE"}


@dataclass(frozen=True)
class WindowingConfig:
    sample_rate: int = TARGET_RATE
    window_ms: float = 100.0
    stride_ms: float = 33.0
    neighbor_radius: int = 1  # windows attached on each side of a segment

    def __post_init__(self):
        # stride == window is allowed: it degenerates to a non-overlapping tiling.
        if not self.window_ms >= self.stride_ms > 0:
            raise ConfigurationError("window length must be >= stride, both positive")
        if self.neighbor_radius < 0:
            raise ConfigurationError("neighbor_radius must be >= 0")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def stride_samples(self) -> int:
        return int(round(self.stride_ms * self.sample_rate / 1000.0))


@dataclass
class AudioSegment:
    """One analysis window plus its zero-padded neighbor windows."""

    samples: np.ndarray
    left: list = field(default_factory=list)  # chronological, nearest last
    right: list = field(default_factory=list)  # chronological, nearest first
    index: int = 0
    time: float = 0.0  # window center, seconds


@dataclass
class ContentSequence:
    """Per-window content vectors omega with their frame times."""

    vectors: np.ndarray  # (T, C)
    times: np.ndarray  # (T,)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _read_wav_codec(path) -> int:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise AudioFormatError(f"{path} is not a RIFF/WAVE file")
        while True:
            chunk = f.read(8)
            if len(chunk) < 8:
                raise AudioFormatError(f"{path} has no fmt chunk")
            tag, size = chunk[:4], struct.unpack("<I", chunk[4:])[0]
            if tag == b"fmt ":
                return struct.unpack("<H", f.read(2))[0]
            f.seek(size + (size & 1), 1)


def load_audio(path) -> np.ndarray:
    """Decode a WAV file to mono float64 at 16 kHz in [-1, 1]."""
    codec = _read_wav_codec(path)
    if codec not in (1, 3, 0xFFFE):
        name = _WAV_CODECS.get(codec, hex(codec))
        raise AudioFormatError(f"unsupported WAV codec {name} in {path}")
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.dtype == np.int16:
        wave = data / 32768.0
    elif data.dtype == np.int32:
        wave = data / 2147483648.0
    elif data.dtype == np.uint8:
        wave = (data.astype(np.float64) - 128.0) / 128.0
    else:
        wave = data.astype(np.float64)
    if wave.ndim == 2:
        wave = wave.mean(axis=1)
    if rate != TARGET_RATE:
        g = np.gcd(TARGET_RATE, int(rate))
        wave = resample_poly(wave, TARGET_RATE // g, rate // g)
    return np.clip(wave, -1.0, 1.0)


def _window_at(waveform: np.ndarray, start: int, length: int) -> np.ndarray:
    """Window [start, start+length) with zeros outside the waveform."""
    out = np.zeros(length)
    lo, hi = max(start, 0), min(start + length, len(waveform))
    if hi > lo:
        out[lo - start : hi - start] = waveform[lo:hi]
    return out


def window_audio(waveform, config: WindowingConfig = WindowingConfig()) -> list[AudioSegment]:
    """Slice a waveform into overlapping windows with neighbor context."""
    waveform = np.asarray(waveform, dtype=np.float64)
    w, s = config.window_samples, config.stride_samples
    if len(waveform) < w:
        raise ConfigurationError(
            f"waveform of {len(waveform)} samples is shorter than one {w}-sample window"
        )
    count = (len(waveform) - w) // s + 1
    segments = []
    for k in range(count):
        start = k * s
        seg = AudioSegment(
            samples=waveform[start : start + w].copy(),
            left=[
                _window_at(waveform, start - i * s, w)
                for i in range(config.neighbor_radius, 0, -1)
            ],
            right=[
                _window_at(waveform, start + i * s, w)
                for i in range(1, config.neighbor_radius + 1)
            ],
            index=k,
            time=(start + w / 2.0) / config.sample_rate,
        )
        segments.append(seg)
    return segments


# ---------------------------------------------------------------------------
# Content extraction
# ---------------------------------------------------------------------------


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _triangle_bank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_filters, n_fft//2+1) triangular filters on the mel scale."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2.0), n_filters + 2))
    bank = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


class LogMelExtractor:
    """Deterministic log filterbank stack: n_filters x n_hops per window.

    Stands in for a pretrained speech representation model; frozen by
    construction (no state is ever updated during extraction).
    """

    name = "logmel"

    def __init__(
        self,
        n_filters: int = 24,
        n_hops: int = 8,
        sample_rate: int = TARGET_RATE,
        norm_mean=None,
        norm_std=None,
    ):
        self.n_filters = n_filters
        self.n_hops = n_hops
        self.sample_rate = sample_rate
        self.dim = n_filters * n_hops
        self.norm_mean = None if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = None if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        self._bank = None
        self._hop = None

    def _features_for(self, samples: np.ndarray) -> np.ndarray:
        hop = len(samples) // self.n_hops
        if self._bank is None or self._hop != hop:
            self._bank = _triangle_bank(self.n_filters, hop, self.sample_rate)
            self._hop = hop
        sub = samples[: hop * self.n_hops].reshape(self.n_hops, hop)
        spec = np.abs(np.fft.rfft(sub, axis=1)) ** 2
        energies = spec @ self._bank.T
        return np.log(energies + 1e-10).reshape(-1)

    def extract(self, segments: list[AudioSegment]) -> np.ndarray:
        feats = np.stack([self._features_for(seg.samples) for seg in segments])
        if self.norm_mean is not None:
            feats = (feats - self.norm_mean) / np.maximum(self.norm_std, 1e-8)
        return feats

    def with_normalization(self, mean, std) -> "LogMelExtractor":
        return LogMelExtractor(
            self.n_filters, self.n_hops, self.sample_rate, norm_mean=mean, norm_std=std
        )

    @staticmethod
    def fit_normalization(feature_matrices: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        stacked = np.concatenate(feature_matrices, axis=0)
        return stacked.mean(axis=0), stacked.std(axis=0)


EXTRACTORS = {"logmel": LogMelExtractor}


def content_features(segments: list[AudioSegment], extractor) -> ContentSequence:
    """Run a registered extractor over windowed audio."""
    vectors = extractor.extract(segments)
    if vectors.shape != (len(segments), extractor.dim):
        raise ConfigurationError(
            f"extractor {extractor.name!r} produced shape {vectors.shape}, "
            f"expected ({len(segments)}, {extractor.dim})"
        )
    times = np.array([seg.time for seg in segments])
    return ContentSequence(vectors=vectors, times=times)


# ---------------------------------------------------------------------------
# Style encoder
# ---------------------------------------------------------------------------


class StyleEncoder(nn.Module):
    """Four self-attention + add&norm blocks; last-token output is psi."""

    def __init__(
        self,
        in_dim: int = CONTENT_DIM,
        dim: int = STYLE_DIM,
        n_blocks: int = 4,
        n_heads: int = 4,
        use_positional: bool = True,
        seed: int = 1000,
    ):
        super().__init__()
        self.net_config = {
            "in_dim": in_dim,
            "dim": dim,
            "n_blocks": n_blocks,
            "n_heads": n_heads,
            "use_positional": use_positional,
        }
        self.use_positional = use_positional
        self.dim = dim
        self.in_proj = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(
            [nn.MultiheadAttention(dim, n_heads, batch_first=True) for _ in range(n_blocks)]
        )
        self.norms = nn.ModuleList([nn.LayerNorm(dim) for _ in range(n_blocks)])
        self.to(DTYPE)
        seeded_init_(self, seed)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ConfigurationError("style encoder needs a non-empty (T, C) sequence")
        x = self.in_proj(frames).unsqueeze(0)
        if self.use_positional:
            x = x + sinusoid_table(x.shape[1], self.dim).unsqueeze(0)
        for attn, norm in zip(self.blocks, self.norms):
            out, _ = attn(x, x, x, need_weights=False)
            x = norm(x + out)
        return x[0, -1]


def style_vector(content: ContentSequence | np.ndarray, encoder: StyleEncoder) -> np.ndarray:
    """Utterance-level 64-dim style vector from the content sequence."""
    vectors = content.vectors if isinstance(content, ContentSequence) else np.asarray(content)
    if vectors.shape[0] < 1:
        raise ConfigurationError("cannot compute a style vector from an empty sequence")
    encoder.eval()
    with torch.no_grad():
        psi = encoder(to_tensor(vectors))
    return psi.numpy()
