"""Minimal active speaker detector: visual front end, audio-visual fusion, detector.

Audio features come from the robust feature generator (or, for the baseline,
from :class:`PlainAudioEncoder`) and are shared by every face track of a scene.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .dsp import InvalidInputError
from .separator import FREQ_BINS, VISUAL_DIM, ShapeError, parse_width_scale, scaled

FEATURE_DIM = 128
TEMPORAL_WIDTH = 5


class VisualFrontEnd(nn.Module):
    """Per-frame linear projection of face embeddings plus a width-5 temporal conv."""

    def __init__(self, dim: int = FEATURE_DIM, in_dim: int = VISUAL_DIM):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)
        self.temporal = nn.Conv1d(dim, dim, TEMPORAL_WIDTH, padding=TEMPORAL_WIDTH // 2)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``frames``: (N, N_v, 512) -> (N, dim, N_v)."""
        if frames.dim() != 3 or frames.shape[1] == 0:
            raise InvalidInputError("face track must contain at least one frame")
        x = torch.relu(self.proj(frames)).transpose(1, 2)
        return torch.relu(self.temporal(x))


class AVFusion(nn.Module):
    """Frame-wise concatenation then a two-layer perceptron."""

    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.fc1 = nn.Conv1d(2 * dim, 2 * dim, 1)
        self.fc2 = nn.Conv1d(2 * dim, 2 * dim, 1)

    def forward(self, audio: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        n = min(audio.shape[-1], visual.shape[-1])
        if n == 0:
            raise InvalidInputError("no overlapping frames between audio and visual features")
        x = torch.cat([audio[..., :n], visual[..., :n]], dim=1)
        return torch.relu(self.fc2(torch.relu(self.fc1(x))))


class Detector(nn.Module):
    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.temporal = nn.Conv1d(2 * dim, dim, TEMPORAL_WIDTH, padding=TEMPORAL_WIDTH // 2)
        self.out = nn.Conv1d(dim, 1, 1)

    def logits(self, fused: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.temporal(fused))).squeeze(1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(fused))


class ASDHead(nn.Module):
    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.dim = dim
        self.visual = VisualFrontEnd(dim)
        self.fusion = AVFusion(dim)
        self.detector = Detector(dim)

    def forward(self, audio: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """``audio``: (N, dim, N_a) per track (rows may repeat a scene's features);
        ``frames``: (N, N_v, 512). Returns (N, min(N_a, N_v)) scores in (0, 1)."""
        if audio.shape[1] != self.dim:
            raise ShapeError(f"audio features must be {self.dim}-d, got {audio.shape[1]}")
        return self.detector(self.fusion(audio, self.visual(frames)))


class PlainAudioEncoder(nn.Module):
    """Baseline audio feature extractor straight from a 256 x T magnitude spectrogram.

    Two stride-2 convs bring the input to 64 x T/4, four stride-(2,1) convs then
    shrink frequency to 4 rows, which are average pooled.
    """

    def __init__(self, dim: int = FEATURE_DIM, width_scale=1):
        super().__init__()
        ws = parse_width_scale(width_scale)
        c1, c2 = scaled(64, ws), scaled(128, ws)
        self.convs = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.BatchNorm2d(c1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.BatchNorm2d(c2), nn.ReLU(),
            nn.Conv2d(c2, c2, 3, stride=(2, 1), padding=1), nn.ReLU(),
            nn.Conv2d(c2, c2, 3, stride=(2, 1), padding=1), nn.ReLU(),
            nn.Conv2d(c2, dim, 3, stride=(2, 1), padding=1), nn.ReLU(),
            nn.Conv2d(dim, dim, 3, stride=(2, 1), padding=1), nn.ReLU(),
        )
        self.out_dim = dim

    def forward(self, mag: torch.Tensor) -> torch.Tensor:
        if mag.dim() != 4 or mag.shape[2] != FREQ_BINS:
            raise ShapeError(f"expected (B, 1, {FREQ_BINS}, T) input, got {tuple(mag.shape)}")
        x = self.convs(mag)
        return F.avg_pool2d(x, (x.shape[-2], 1)).squeeze(-2)
