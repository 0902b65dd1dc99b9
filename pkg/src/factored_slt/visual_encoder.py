"""Visual front end: uniform-stride frame downsampling, a small convolutional
backbone applied frame by frame, and a local temporal module that turns
frame-wise features into sign-wise features.

The backbone is deliberately proportionate to 32x32 synthetic inputs and sits
behind this module's interface, so a larger image backbone can be substituted
for real datasets without touching the rest of the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .transformer import FeatureAdapter

TAP_FRAME = "frame_wise"
TAP_SIGN = "sign_wise"
TAP_TEXTUAL = "textual"
TAP_HIDDEN = "hidden"
FEATURE_TAPS = (TAP_FRAME, TAP_SIGN, TAP_TEXTUAL, TAP_HIDDEN)


@dataclass(frozen=True)
class VisualEncoderConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    feature_dim: int = 128
    temporal_kernel: int = 5
    downsample_rate: float = 0.25

    def validate(self) -> None:
        if not self.backbone_channels:
            raise ValueError("backbone_channels must be non-empty")
        if self.feature_dim != self.backbone_channels[-1]:
            raise ValueError(
                "feature_dim must equal the last backbone channel count "
                f"({self.feature_dim} vs {self.backbone_channels[-1]})"
            )
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(
                f"temporal_kernel must be odd and positive, got {self.temporal_kernel}"
            )
        if not 0.0 < self.downsample_rate <= 1.0:
            raise ValueError(
                f"downsample_rate must lie in (0, 1], got {self.downsample_rate}"
            )

    def to_dict(self) -> dict:
        return {
            "backbone_channels": list(self.backbone_channels),
            "feature_dim": self.feature_dim,
            "temporal_kernel": self.temporal_kernel,
            "downsample_rate": self.downsample_rate,
        }

    @staticmethod
    def from_dict(raw: dict) -> "VisualEncoderConfig":
        cfg = VisualEncoderConfig(
            backbone_channels=tuple(raw.get("backbone_channels", (16, 32, 64, 128))),
            feature_dim=int(raw.get("feature_dim", 128)),
            temporal_kernel=int(raw.get("temporal_kernel", 5)),
            downsample_rate=float(raw.get("downsample_rate", 0.25)),
        )
        cfg.validate()
        return cfg


@dataclass
class FeatureSequence:
    """Length-tagged feature matrix with a stage tag.

    values: (B, N, dim); rows at or beyond each sample's length are zero.
    """

    values: torch.Tensor
    lengths: torch.Tensor
    tap: str

    def __post_init__(self):
        if self.tap not in FEATURE_TAPS:
            raise ValueError(f"unknown tap {self.tap!r}, expected one of {FEATURE_TAPS}")
        if self.values.ndim != 3:
            raise ValueError(f"values must be (B, N, dim), got {tuple(self.values.shape)}")
        if int(self.lengths.max()) > self.values.size(1):
            raise ValueError("length exceeds row count")
        if int(self.lengths.min()) < 1:
            raise ValueError("every sample needs at least one valid step")

    @property
    def mask(self) -> torch.Tensor:
        n = self.values.size(1)
        return (
            torch.arange(n, device=self.values.device)[None, :]
            < self.lengths[:, None]
        )

    def zeroed(self) -> torch.Tensor:
        return self.values * self.mask[:, :, None].to(self.values.dtype)


def downsample_indices(num_frames: int, rate: float) -> np.ndarray:
    """Kept frame indices: round(i / rate) for i < ceil(rate * T), clamped to
    the last frame. Strictly increasing and starting at 0; rate 1 keeps all."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    kept = math.ceil(rate * num_frames)
    idx = np.minimum(
        np.floor(np.arange(kept) / rate + 0.5).astype(np.int64), num_frames - 1
    )
    assert idx[0] == 0 and np.all(np.diff(idx) > 0)
    return idx


def downsample_video(frames: np.ndarray | torch.Tensor, rate: float):
    """Select a uniform-stride subset of frames along the first axis."""
    idx = downsample_indices(int(frames.shape[0]), rate)
    if isinstance(frames, torch.Tensor):
        return frames[torch.from_numpy(idx)]
    return frames[idx]


class VisualBackbone(nn.Module):
    """Per-frame convolutional feature extractor: conv3x3 + BN + ReLU + pool
    per block, global average pool at the end. Frames only interact through
    batch-norm batch statistics, so inference mode is strictly frame-wise."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        blocks = []
        in_ch = 3
        for out_ch in channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(),
                    nn.MaxPool2d(2),
                )
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = channels[-1]

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (F, 3, H, W) -> (F, out_dim)
        if frames.ndim != 4 or frames.size(1) != 3:
            raise ValueError(f"expected frames (F, 3, H, W), got {tuple(frames.shape)}")
        min_side = 2 ** len(self.blocks)
        if min(frames.shape[-2:]) < min_side:
            raise ValueError(
                f"frames of size {tuple(frames.shape[-2:])} too small for "
                f"{len(self.blocks)} pooling blocks (need >= {min_side})"
            )
        x = frames
        for block in self.blocks:
            x = block(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class MaskedBatchNorm1d(nn.Module):
    """Batch norm over (B, C, N) that ignores padded time steps.

    Training mode normalizes with statistics of the valid positions only and
    updates running statistics with them; inference mode uses the running
    statistics, which keeps single-sample forwards well defined.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, C, N); mask: (B, N) True at valid positions.
        fmask = mask[:, None, :].to(x.dtype)
        count = fmask.sum()
        if self.training:
            total = (x * fmask).sum(dim=(0, 2))
            mean = total / count
            centered = (x - mean[None, :, None]) * fmask
            var = (centered * centered).sum(dim=(0, 2)) / count
            with torch.no_grad():
                self.num_batches_tracked += 1
                unbiased = var * count / torch.clamp(count - 1, min=1)
                self.running_mean.mul_(1 - self.momentum).add_(
                    self.momentum * mean.detach().to(self.running_mean.dtype)
                )
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * unbiased.detach().to(self.running_var.dtype)
                )
        else:
            mean = self.running_mean.to(x.dtype)
            var = self.running_var.to(x.dtype)
        x_hat = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        return self.weight[None, :, None] * x_hat + self.bias[None, :, None]


class TemporalModule(nn.Module):
    """Local timing aggregation: 1-D convolution over time with same-length
    padding, batch normalization, and a rectifier. Output length equals input
    length, so the sign-wise sequence keeps the downsampled frame count."""

    def __init__(self, channels: int, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"temporal kernel must be odd, got {kernel}")
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.norm = MaskedBatchNorm1d(channels)

    def forward(self, feats: FeatureSequence) -> FeatureSequence:
        if feats.tap != TAP_FRAME:
            raise ValueError(f"temporal module expects frame_wise input, got {feats.tap}")
        mask = feats.mask
        x = feats.zeroed().transpose(1, 2)  # (B, C, N)
        x = self.conv(x)
        x = self.norm(x, mask)
        x = F.relu(x).transpose(1, 2)
        x = x * mask[:, :, None].to(x.dtype)
        return FeatureSequence(values=x, lengths=feats.lengths, tap=TAP_SIGN)


def vl_adapter(feature_dim: int, textual_dim: int, hidden_dim: int | None = None) -> FeatureAdapter:
    """Position-wise MLP mapping sign-wise features into textual space."""
    return FeatureAdapter(feature_dim, textual_dim, hidden_dim)


class VisualEncoder(nn.Module):
    """Downsample, encode frames, aggregate locally: video to sign-wise features."""

    def __init__(self, config: VisualEncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = VisualBackbone(config.backbone_channels)
        self.temporal = TemporalModule(config.feature_dim, config.temporal_kernel)

    def downsample(
        self, videos: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-sample uniform-stride frame selection on a padded batch."""
        rate = self.config.downsample_rate
        new_lengths = torch.tensor(
            [len(downsample_indices(int(t), rate)) for t in lengths],
            dtype=torch.long,
            device=lengths.device,
        )
        n_max = int(new_lengths.max())
        out = videos.new_zeros((videos.size(0), n_max) + videos.shape[2:])
        for i, t in enumerate(lengths.tolist()):
            idx = torch.from_numpy(downsample_indices(int(t), rate))
            out[i, : len(idx)] = videos[i, idx]
        return out, new_lengths

    def encode_frames(
        self, videos: torch.Tensor, lengths: torch.Tensor
    ) -> FeatureSequence:
        """Backbone applied to every valid frame; padded slots stay zero."""
        b, t_max = videos.shape[:2]
        mask = (
            torch.arange(t_max, device=videos.device)[None, :] < lengths[:, None]
        )
        flat = videos[mask]  # (sum_T, H, W, 3) or (sum_T, 3, H, W)
        if flat.size(-1) == 3:
            flat = flat.permute(0, 3, 1, 2).contiguous()
        feats = self.backbone(flat)
        values = feats.new_zeros(b, t_max, feats.size(-1))
        values[mask] = feats
        return FeatureSequence(values=values, lengths=lengths, tap=TAP_FRAME)

    def forward(self, videos: torch.Tensor, lengths: torch.Tensor) -> FeatureSequence:
        down, new_lengths = self.downsample(videos, lengths)
        frame_feats = self.encode_frames(down, new_lengths)
        return self.temporal(frame_feats)

    def frame_features(
        self, videos: torch.Tensor, lengths: torch.Tensor
    ) -> FeatureSequence:
        """Frame-wise tap: backbone features of the downsampled video."""
        down, new_lengths = self.downsample(videos, lengths)
        return self.encode_frames(down, new_lengths)
