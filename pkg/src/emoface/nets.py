"""Shared helpers for the torch networks: seeded init and checkpoint I/O.

All networks run in float64 so finite-difference gradient checks are
meaningful, and are initialized from an explicit seed so checkpoints and
training runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn

from . import blobs
from .errors import ConfigurationError

DTYPE = torch.float64


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in-scaled uniform weights, zero biases, unit norm gains."""
    gen = torch.Generator().manual_seed(int(seed))

    def uniform_(tensor, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            tensor.uniform_(-bound, bound, generator=gen)

    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            uniform_(m.weight, m.weight.shape[1] * math.prod(m.weight.shape[2:]))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LSTM):
            for name, p in m.named_parameters():
                if name.startswith("weight"):
                    uniform_(p, p.shape[1])
                else:
                    nn.init.zeros_(p)
        elif isinstance(m, nn.MultiheadAttention):
            uniform_(m.in_proj_weight, m.embed_dim)
            if m.in_proj_bias is not None:
                nn.init.zeros_(m.in_proj_bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            uniform_(m.weight, m.weight.shape[1])
    return module


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name in sorted(dict(module.named_parameters())):
        p = dict(module.named_parameters())[name]
        h.update(name.encode())
        h.update(p.detach().numpy().astype("<f8").tobytes())
    return h.hexdigest()


def save_net(module: nn.Module, path, meta: dict | None = None) -> None:
    arrays = {
        name: p.detach().numpy() for name, p in module.state_dict().items()
    }
    header = dict(meta or {})
    header.setdefault("kind", "net")
    header["net_class"] = type(module).__name__
    header["net_config"] = getattr(module, "net_config", {})
    blobs.save_archive(path, arrays, header)


def load_net_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    return blobs.load_archive(path)


def restore_net(module: nn.Module, path) -> dict:
    """Load a checkpoint written by :func:`save_net` into ``module``."""
    arrays, meta = blobs.load_archive(path)
    if meta.get("net_class") != type(module).__name__:
        raise ConfigurationError(
            f"checkpoint at {path} holds a {meta.get('net_class')}, "
            f"expected {type(module).__name__}"
        )
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return meta


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    """Classic sinusoidal positional encoding, (length, dim) float64."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.from_numpy(table.astype(np.float64))


def to_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.to(DTYPE)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
