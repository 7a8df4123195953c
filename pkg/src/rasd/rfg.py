"""Robust feature generator: decoder feature-map fusion and the bridge network ``g``."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .separator import DECODER_CHANNELS, FM_NAMES, ShapeError, parse_width_scale, scaled

DEFAULT_COMBO = ("FM3", "FM5")
# the six feature-map selections compared in the ablation matrix
ABLATION_COMBOS = (
    ("FM3",),
    ("FM4",),
    ("FM5",),
    ("FM4", "FM5"),
    ("FM3", "FM4", "FM5"),
    ("FM3", "FM5"),
)
G_CHANNELS = (256, 128, 128)
AUDIO_FRAMES_PER_VISUAL = 4


class ConfigError(ValueError):
    pass


def fm_channels(name: str, width_scale=1) -> int:
    return scaled(DECODER_CHANNELS[FM_NAMES.index(name)], width_scale)


def normalize_combo(combo) -> tuple[str, ...]:
    if isinstance(combo, str):
        combo = [c.strip() for c in combo.split(",") if c.strip()]
    combo = tuple(combo)
    if not combo:
        raise ConfigError("feature-map combination must not be empty")
    unknown = [c for c in combo if c not in FM_NAMES]
    if unknown:
        raise ConfigError(f"unknown feature maps {unknown}; choose from {FM_NAMES}")
    return tuple(sorted(set(combo), key=FM_NAMES.index))


def upsample_replicate(fm: torch.Tensor, target_hw) -> torch.Tensor:
    """Nearest-neighbour block replication of the last two axes up to ``target_hw``."""
    h, w = fm.shape[-2:]
    th, tw = target_hw
    if th % h or tw % w:
        raise ShapeError(f"cannot replicate {h}x{w} onto {th}x{tw}: ratios are not integral")
    out = fm
    if th != h:
        out = out.repeat_interleave(th // h, dim=-2)
    if tw != w:
        out = out.repeat_interleave(tw // w, dim=-1)
    return out


def fuse(fms: dict, combo=DEFAULT_COMBO, target: str = "FM5") -> torch.Tensor:
    """Replicate the selected maps onto the ``target`` map's grid and stack them on channels.

    The grid is always FM5's (64 x T/4 at full width), so ``g`` sees the same
    spatial size whichever maps are selected.
    """
    combo = normalize_combo(combo)
    th, tw = fms[target].shape[-2:]
    return torch.cat([upsample_replicate(fms[name], (th, tw)) for name in combo], dim=1)


class FeatureBridge(nn.Module):
    """``g``: stride-(2,1) 3x3 convolutions over frequency then average pooling.

    Maps ``C x 64 x T/4`` fused maps to one ``out_dim`` vector per visual frame.
    """

    def __init__(self, in_channels: int, channels=G_CHANNELS, width_scale=1):
        super().__init__()
        self.width_scale = parse_width_scale(width_scale)
        layers = []
        prev = in_channels
        for c in channels:
            c = scaled(c, self.width_scale)
            layers += [nn.Conv2d(prev, c, 3, stride=(2, 1), padding=1), nn.ReLU()]
            prev = c
        self.convs = nn.Sequential(*layers)
        self.n_down = len(channels)
        self.out_dim = prev

    def forward(self, fused: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        if fused.shape[-2] % (2 ** self.n_down):
            raise ShapeError(f"frequency size {fused.shape[-2]} not divisible by {2 ** self.n_down}")
        x = fused
        for layer in self.convs:
            if trace is not None and isinstance(layer, nn.Conv2d):
                trace.append(tuple(x.shape[1:]))
            x = layer(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        # AvgPool over the remaining frequency rows (8 x 1 at the default plan)
        return F.avg_pool2d(x, (x.shape[-2], 1)).squeeze(-2)


class RobustFeatureGenerator(nn.Module):
    """Feature-map fusion plus ``g``; the separator itself is owned by the caller."""

    def __init__(self, width_scale=1, combo=DEFAULT_COMBO, channels=G_CHANNELS):
        super().__init__()
        self.width_scale = parse_width_scale(width_scale)
        self.combo = normalize_combo(combo)
        in_ch = sum(fm_channels(n, self.width_scale) for n in self.combo)
        self.g = FeatureBridge(in_ch, channels, self.width_scale)
        self.out_dim = self.g.out_dim

    def forward(self, fms: dict, trace: list | None = None) -> torch.Tensor:
        fused = fuse(fms, self.combo)
        if trace is not None:
            trace.append(tuple(fused.shape[1:]))
        return self.g(fused, trace=trace)


def visual_frames(n_audio_frames: int) -> int:
    return n_audio_frames // AUDIO_FRAMES_PER_VISUAL


def align(a: torch.Tensor, b: torch.Tensor):
    """Truncate both tensors to their common length on the last axis."""
    n = min(a.shape[-1], b.shape[-1])
    return a[..., :n], b[..., :n]

