"""Audio-to-face-parameter regressor.

A three-layer 1-D convolutional network maps per-frame content vectors,
each concatenated with the utterance style vector, to 56 face parameters
per frame. The middle layer has kernel 3 with same-padding so each output
frame sees its immediate neighbors; layer widths follow the published
(256, 128) / (128, 128) / (128, 56) channel plan.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError
from .nets import DTYPE, seeded_init_, to_tensor

PARAM_DIM = 56
DEFAULT_SEED = 1000


class Audio2FlameNet(nn.Module):
    def __init__(
        self,
        content_dim: int = 192,
        style_dim: int = 64,
        hidden: int = 128,
        out_dim: int = PARAM_DIM,
        layer_mode: str = "neighborhood",
    ):
        super().__init__()
        if layer_mode not in ("neighborhood", "literal"):
            raise ConfigurationError(f"unknown layer_mode {layer_mode!r}")
        self.net_config = {
            "content_dim": content_dim,
            "style_dim": style_dim,
            "hidden": hidden,
            "out_dim": out_dim,
            "layer_mode": layer_mode,
        }
        self.content_dim = content_dim
        self.style_dim = style_dim
        self.out_dim = out_dim
        self.layer_mode = layer_mode
        in_ch = content_dim + style_dim
        if layer_mode == "neighborhood":
            # kernel 3 / stride 1 middle layer preserves one output per frame
            middle = nn.Conv1d(hidden, hidden, kernel_size=3, padding=1)
        else:
            # literal reading of the published layer tuple: kernel 1, stride 3
            middle = nn.Conv1d(hidden, hidden, kernel_size=1, stride=3)
        self.conv = nn.Sequential(
            nn.Conv1d(in_ch, hidden, kernel_size=1),
            nn.ReLU(),
            middle,
            nn.ReLU(),
            nn.Conv1d(hidden, out_dim, kernel_size=1),
        )
        self.to(DTYPE)

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if content.ndim != 2 or content.shape[0] < 1:
            raise ConfigurationError("content must be a non-empty (T, C) sequence")
        if content.shape[1] != self.content_dim:
            raise ConfigurationError(
                f"content channel count {content.shape[1]} != {self.content_dim}"
            )
        if style.shape != (self.style_dim,):
            raise ConfigurationError(f"style vector must have length {self.style_dim}")
        t = content.shape[0]
        x = torch.cat([content, style.unsqueeze(0).expand(t, -1)], dim=1)
        out = self.conv(x.T.unsqueeze(0))
        return out[0].T

    def forward_padded(
        self, content: torch.Tensor, style: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """Batched forward over zero-padded (B, T, C) clips.

        Pad frames are zeroed before the convolutions, so every valid output
        frame equals the unbatched forward exactly (the middle layer's
        same-padding would feed zeros there anyway). Outputs past each
        clip's length are garbage and must be masked by the caller.
        """
        b, t, _ = content.shape
        x = torch.cat([content, style.unsqueeze(1).expand(b, t, -1)], dim=2)
        valid = (
            torch.arange(t, device=x.device).unsqueeze(0) < lengths.unsqueeze(1)
        ).to(x.dtype)
        x = x * valid.unsqueeze(2)
        out = self.conv(x.transpose(1, 2))
        return out.transpose(1, 2)


def init_weights(seed: int = DEFAULT_SEED, **config) -> Audio2FlameNet:
    """Fresh network with fan-in-scaled uniform weights and zero biases."""
    net = Audio2FlameNet(**config)
    seeded_init_(net, seed)
    return net


def predict_params(net: Audio2FlameNet, content, style) -> np.ndarray:
    """Inference wrapper: numpy in, (T, 56) raw parameter sequence out."""
    net.eval()
    with torch.no_grad():
        out = net(to_tensor(content), to_tensor(style))
    return out.numpy()
