"""Two-stream feature extraction: per-branch conv encoders, GeM pooling
and concatenation fusion.

The encoder is a deliberately small stack of strided conv stages; channel
widths, normalization and activation are config-driven so the same code
serves both the full-size defaults and the tiny models used for gradient
checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .imaging import Image

GLOBAL_INPUT = (288, 144)
HEAD_SHOULDER_INPUT = (128, 144)


@dataclass(frozen=True)
class BranchConfig:
    """Architecture of one branch encoder."""

    input_hw: tuple[int, int]
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    norm: str = "batch"
    activation: str = "relu"
    conv_bias: bool = True

    def __post_init__(self) -> None:
        if len(self.stage_channels) < 1:
            raise ConfigError("at least one conv stage is required")
        h, w = self.input_hw
        scale = 2 ** len(self.stage_channels)
        if h < scale or w < scale:
            raise ConfigError(
                f"input {self.input_hw} too small for {len(self.stage_channels)} strided stages"
            )
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.activation not in ("relu", "softplus"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


def _activation(name: str) -> nn.Module:
    return nn.ReLU(inplace=False) if name == "relu" else nn.Softplus()


class BranchNet(nn.Module):
    """Convolutional encoder for one granularity branch."""

    def __init__(self, cfg: BranchConfig, branch: str, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.branch = branch
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in cfg.stage_channels:
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=cfg.conv_bias))
            if cfg.norm == "batch":
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(_activation(cfg.activation))
            in_ch = out_ch
        self.encoder = nn.Sequential(*layers)
        if generator is not None:
            self._reinit(generator)

    def _reinit(self, generator: torch.Generator) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=generator)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = self.cfg.input_hw
        if tuple(x.shape[-2:]) != expected:
            raise DataError(
                f"{self.branch} branch expects {expected[0]}x{expected[1]} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        return self.encoder(x)


class GemPooler(nn.Module):
    """Generalized-mean spatial pooling with a learnable exponent.

    p = 1 is average pooling; large p approaches max pooling. The exponent
    is clamped at 1 in the forward pass so it stays a valid mean.
    """

    def __init__(self, p: float = 3.0, eps: float = 1e-6, channels: int | None = None):
        super().__init__()
        if p < 1.0:
            raise ConfigError("GeM exponent must be at least 1")
        if eps <= 0.0:
            raise ConfigError("GeM epsilon must be positive")
        shape = (channels,) if channels is not None else (1,)
        self.p = nn.Parameter(torch.full(shape, float(p)))
        self.eps = eps

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.ndim == 3:
            return self.forward(fmap[None])[0]
        if fmap.ndim != 4:
            raise DataError(f"feature map must be (N,)C x H x W, got shape {tuple(fmap.shape)}")
        p = self.p.clamp(min=1.0)
        if p.shape[0] not in (1, fmap.shape[1]):
            raise DataError(
                f"per-channel exponent has {p.shape[0]} entries for {fmap.shape[1]} channels"
            )
        pc = p[None, :, None, None]
        pooled = fmap.clamp(min=self.eps).pow(pc).mean(dim=(2, 3))
        return pooled.pow(1.0 / p[None, :])


def gem_pool(fmap: torch.Tensor, pooler: GemPooler) -> torch.Tensor:
    """Pool one C x H' x W' map (or a batch of them) to per-channel values."""
    return pooler(fmap)


@dataclass
class EmbeddingBatch:
    """N x D embedding vectors with aligned identity labels."""

    vectors: torch.Tensor
    labels: torch.Tensor
    branch: str = "global"

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DataError(f"embeddings must be N x D with N >= 1, got {tuple(self.vectors.shape)}")
        if not torch.is_tensor(self.labels):
            self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
        if self.labels.shape != (self.vectors.shape[0],):
            raise DataError("one label per embedding row is required")
        if not torch.isfinite(self.vectors.detach()).all():
            raise DataError("embedding vectors must be finite")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def images_to_tensor(images: Sequence[Image], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack images into an N x 3 x H x W tensor scaled to [-1, 1]."""
    if not images:
        raise DataError("empty image batch")
    arrays = np.stack([img.pixels for img in images]).astype(np.float32)
    t = torch.from_numpy(arrays).permute(0, 3, 1, 2).to(dtype)
    return t / 127.5 - 1.0


def extract(net: BranchNet, images: Sequence[Image], training: bool = False) -> torch.Tensor:
    """Run a batch of images through a branch encoder.

    In evaluation mode (the default) the result is a pure function of the
    parameters and the input.
    """
    x = images_to_tensor(images)
    was_training = net.training
    net.train(training)
    try:
        if training:
            return net(x)
        with torch.no_grad():
            return net(x)
    finally:
        net.train(was_training)


def fuse_concat(v_g: EmbeddingBatch, v_h: EmbeddingBatch) -> EmbeddingBatch:
    """Row-wise concatenation of the two granularity embeddings."""
    if len(v_g) != len(v_h):
        raise DataError(f"branch batch sizes differ: {len(v_g)} vs {len(v_h)}")
    if not torch.equal(v_g.labels, v_h.labels):
        raise DataError("joint fusion requires row-aligned identity labels")
    return EmbeddingBatch(
        vectors=torch.cat([v_g.vectors, v_h.vectors], dim=1),
        labels=v_g.labels,
        branch="joint",
    )


_EMB_MAGIC = b"AGME"


def save_embeddings(emb: EmbeddingBatch, path: str | Path) -> None:
    """Write embeddings as a binary matrix with a header plus JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = emb.vectors.detach().cpu().numpy().astype(np.float32)
    labels = emb.labels.cpu().numpy().astype(np.int64)
    n, d = vectors.shape
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<IQQ", 1, n, d))
        f.write(labels.tobytes())
        f.write(vectors.tobytes())
    sidecar = {"n": n, "d": d, "branch": emb.branch, "dtype": "float32", "format_version": 1}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_embeddings(path: str | Path) -> EmbeddingBatch:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != _EMB_MAGIC:
        raise DataError(f"not an embedding file: {path}")
    version, n, d = struct.unpack("<IQQ", blob[4:24])
    if version != 1:
        raise DataError(f"unsupported embedding format version {version}")
    off = 24
    labels = np.frombuffer(blob, dtype=np.int64, count=n, offset=off).copy()
    off += n * 8
    vectors = np.frombuffer(blob, dtype=np.float32, count=n * d, offset=off).reshape(n, d).copy()
    branch = "global"
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        branch = json.loads(sidecar.read_text()).get("branch", branch)
    return EmbeddingBatch(torch.from_numpy(vectors), torch.from_numpy(labels), branch=branch)
