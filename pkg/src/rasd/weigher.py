"""Dynamic weight generator: per-frame sound-type posteriors and separation-loss weights.

Noise-type class ids: 0 = clean_speech, 1 = speech_with_noise, 2 = no_speech.
"""
from __future__ import annotations

import torch
from torch import nn

from .dsp import InvalidInputError
from .separator import FREQ_BINS, ShapeError, parse_width_scale, scaled

CLEAN, WITH_NOISE, NO_SPEECH = 0, 1, 2
N_CLASSES = 3
CONV_CHANNELS = (64, 64, 128, 128, 256, 256)
HEAD_CHANNELS = (256, 64)


def _head(in_ch: int, hidden, out_ch: int) -> nn.Sequential:
    layers = []
    prev = in_ch
    for h in hidden:
        layers += [nn.Conv1d(prev, h, 1), nn.ReLU()]
        prev = h
    layers.append(nn.Conv1d(prev, out_ch, 1))
    return nn.Sequential(*layers)


class WeightGenerator(nn.Module):
    def __init__(self, width_scale=1):
        super().__init__()
        self.width_scale = parse_width_scale(width_scale)
        layers = []
        prev = 1
        for c in CONV_CHANNELS:
            c = scaled(c, self.width_scale)
            layers += [nn.Conv2d(prev, c, 3, stride=(2, 1), padding=1), nn.ReLU()]
            prev = c
        self.convs = nn.Sequential(*layers)
        rows = FREQ_BINS // 2 ** len(CONV_CHANNELS)
        self.flat_dim = prev * rows
        hidden = [scaled(h, self.width_scale) for h in HEAD_CHANNELS]
        self.cls_head = _head(self.flat_dim, hidden, N_CLASSES)
        self.weight_head = _head(self.flat_dim, hidden, 1)

    def forward(self, mag: torch.Tensor, trace: list | None = None):
        """``mag``: (B, 1, 256, T) pre-mix speech spectrogram.

        Returns ``(probs (B, 3, T), weights (B, T))``.
        """
        if mag.dim() != 4 or mag.shape[2] != FREQ_BINS:
            raise ShapeError(f"expected (B, 1, {FREQ_BINS}, T) input, got {tuple(mag.shape)}")
        x = mag
        for layer in self.convs:
            if trace is not None and isinstance(layer, nn.Conv2d):
                trace.append(tuple(x.shape[1:]))
            x = layer(x)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        x = x.reshape(x.shape[0], -1, x.shape[-1])
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        probs = torch.softmax(self.cls_head(x), dim=1)
        weights = torch.sigmoid(self.weight_head(x)).squeeze(1)
        return probs, weights


def _check_labels(labels: torch.Tensor):
    if labels.numel() and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise InvalidInputError(f"noise-type labels must be in {{0, 1, 2}}, got range "
                                f"[{int(labels.min())}, {int(labels.max())}]")


def classification_loss(probs, labels, class_weights, eps: float = 1e-12):
    """Class-weighted cross-entropy, averaged over frames (and batch items).

    ``probs``: (..., 3, T); ``labels``: (..., T) integer ids.
    """
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels)
    cls_w = torch.as_tensor(class_weights, dtype=probs.dtype)
    picked = probs.gather(-2, labels.unsqueeze(-2)).squeeze(-2)
    return (-cls_w[labels] * torch.log(picked.clamp_min(eps))).mean()


def weigher_loss(probs, labels, weights, class_weights):
    """Classification loss plus ``mean |w - 1|`` (keeps the weights from collapsing to 0)."""
    probs = torch.as_tensor(probs)
    weights = torch.as_tensor(weights, dtype=probs.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != weights.shape or probs.shape[-1] != labels.shape[-1]:
        raise InvalidInputError(
            f"length mismatch: probs {tuple(probs.shape)}, labels {tuple(labels.shape)}, "
            f"weights {tuple(weights.shape)}")
    return classification_loss(probs, labels, class_weights) + (weights - 1).abs().mean()


def apply_weights(frame_losses, weights):
    """Mean over frames (then batch) of ``weights[t] * frame_losses[t]``."""
    frame_losses = torch.as_tensor(frame_losses)
    weights = torch.as_tensor(weights, dtype=frame_losses.dtype)
    if frame_losses.shape != weights.shape:
        raise InvalidInputError(f"length mismatch: {tuple(frame_losses.shape)} vs {tuple(weights.shape)}")
    return (weights * frame_losses).mean(dim=-1).mean()


def fixed_weights(labels, value: float):
    """Constant ``value`` on speech_with_noise frames and 1 everywhere else."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels)
    w = torch.ones(labels.shape, dtype=torch.float64)
    w[labels == WITH_NOISE] = float(value)
    return w
