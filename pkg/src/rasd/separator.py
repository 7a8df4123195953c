"""Visually conditioned U-Net speech separator.

Seven stride-2 4x4 convolutions down to a ``C x 2 x T/128`` bottleneck, a
spatially replicated visual vector concatenated there, and seven transposed
convolutions back up with skip concatenations. The first six decoder outputs
(FM1..FM6) are exposed for the feature generator; the last one is squashed
into a ratio mask.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FREQ_BINS = 256
VISUAL_DIM = 512
MIN_FRAMES = 256
TIME_MULTIPLE = 128

ENCODER_CHANNELS = (64, 128, 256, 512, 512, 512, 512)
DECODER_CHANNELS = (512, 512, 512, 256, 128, 64)
FM_NAMES = ("FM1", "FM2", "FM3", "FM4", "FM5", "FM6")
WIDTH_SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


class ShapeError(ValueError):
    pass


def parse_width_scale(value) -> Fraction:
    ws = Fraction(str(value)) if not isinstance(value, Fraction) else value
    if ws not in WIDTH_SCALES:
        raise ValueError(f"width_scale must be one of 1, 1/2, 1/4, 1/8; got {value}")
    return ws


def scaled(channels: int, width_scale) -> int:
    return max(1, int(channels * Fraction(width_scale)))


def padded_length(n_frames: int) -> int:
    return max(MIN_FRAMES, TIME_MULTIPLE * math.ceil(n_frames / TIME_MULTIPLE))


def pad_time(mag):
    """Zero-pad the time axis (last axis) to :func:`padded_length`.

    Works on numpy arrays and torch tensors; returns ``(padded, original_T)``.
    """
    n = mag.shape[-1]
    if mag.shape[-2] != FREQ_BINS:
        raise ShapeError(f"expected {FREQ_BINS} frequency bins, got {mag.shape[-2]}")
    extra = padded_length(n) - n
    if isinstance(mag, torch.Tensor):
        return F.pad(mag, (0, extra)), n
    widths = [(0, 0)] * (mag.ndim - 1) + [(0, extra)]
    return np.pad(mag, widths), n


def match_and_concat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Concatenate on channels, zero-padding the spatially smaller tensor."""
    h = max(a.shape[-2], b.shape[-2])
    w = max(a.shape[-1], b.shape[-1])

    def grow(x):
        dh, dw = h - x.shape[-2], w - x.shape[-1]
        return F.pad(x, (0, dw, 0, dh)) if dh or dw else x

    return torch.cat([grow(a), grow(b)], dim=1)


class Separator(nn.Module):
    def __init__(self, width_scale=1):
        super().__init__()
        self.width_scale = parse_width_scale(width_scale)
        enc = [scaled(c, self.width_scale) for c in ENCODER_CHANNELS]
        dec = [scaled(c, self.width_scale) for c in DECODER_CHANNELS]
        self.enc_channels = tuple(enc)
        self.dec_channels = tuple(dec)
        self.visual_channels = scaled(VISUAL_DIM, self.width_scale)

        self.encoder = nn.ModuleList()
        in_ch = 1
        for i, out_ch in enumerate(enc):
            layers = [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(0.2))
            self.encoder.append(nn.Sequential(*layers))
            in_ch = out_ch

        skips = enc[:-1][::-1]  # conv6 .. conv1 outputs
        self.decoder = nn.ModuleList()
        in_ch = enc[-1] + self.visual_channels
        for out_ch, skip in zip(dec, skips):
            self.decoder.append(nn.Sequential(
                nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            ))
            in_ch = out_ch + skip
        self.output = nn.ConvTranspose2d(in_ch, 1, 4, stride=2, padding=1)

    def condition(self, visual: torch.Tensor) -> torch.Tensor:
        # narrower profiles average-pool the 512-d vector down to the bottleneck width
        if self.visual_channels == visual.shape[-1]:
            return visual
        return F.adaptive_avg_pool1d(visual.unsqueeze(1), self.visual_channels).squeeze(1)

    def forward(self, mag: torch.Tensor, visual: torch.Tensor, trace: list | None = None):
        """``mag``: (B, 1, 256, T_padded); ``visual``: (B, 512).

        Returns ``(mask, {"FM1": ..., ..., "FM6": ...})`` with the mask still at
        the padded length. If ``trace`` is a list, every layer's input shape is
        appended to it (used by the shape-conformance checks).
        """
        if mag.dim() != 4 or mag.shape[1] != 1 or mag.shape[2] != FREQ_BINS:
            raise ShapeError(f"expected (B, 1, {FREQ_BINS}, T) input, got {tuple(mag.shape)}")
        if visual.shape[-1] != VISUAL_DIM:
            raise ShapeError(f"visual condition must be {VISUAL_DIM}-d, got {visual.shape[-1]}")
        x = mag
        skips = []
        for layer in self.encoder:
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
            x = layer(x)
            skips.append(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        v = self.condition(visual)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        x = torch.cat([x, v], dim=1)
        fms = {}
        for name, layer, skip in zip(FM_NAMES, self.decoder, skips[:-1][::-1]):
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
            y = layer(x)
            fms[name] = y
            x = match_and_concat(y, skip)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        mask = torch.sigmoid(self.output(x))
        return mask, fms


def table_param_count(width_scale=1) -> int:
    """Closed-form parameter count of :class:`Separator` from the layer plan.

    Kept independent of the module so tests can cross-check it.
    """
    ws = parse_width_scale(width_scale)
    enc = [scaled(c, ws) for c in ENCODER_CHANNELS]
    dec = [scaled(c, ws) for c in DECODER_CHANNELS]
    vis = scaled(VISUAL_DIM, ws)
    total = 0
    prev = 1
    for i, c in enumerate(enc):
        total += 16 * prev * c + c + (2 * c if i > 0 else 0)
        prev = c
    prev = enc[-1] + vis
    for c, skip in zip(dec, enc[:-1][::-1]):
        total += 16 * prev * c + c + 2 * c
        prev = c + skip
    total += 16 * prev + 1
    return total


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic fan-in scaled initialization for every conv / linear weight."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
                w = m.weight
                if isinstance(m, nn.ConvTranspose2d):
                    # stride-2 4x4 transpose conv: each output sees in_ch * 4 taps
                    fan_in = w.shape[0] * (w[0, 0].numel() // 4)
                else:
                    fan_in = w[0].numel()
                bound = math.sqrt(6.0 / fan_in)  # He-uniform
                w.copy_((torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.reset_running_stats()
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
