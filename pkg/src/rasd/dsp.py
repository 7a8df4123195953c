"""Spectral front end: STFT/ISTFT, magnitudes, frequency resampling, mixing and ratio masks.

All functions operate on plain numpy arrays. Spectrograms are laid out as
``(freq_bins, frames)``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 1022
WIN_LENGTH = 1022
HOP = 160
N_BINS = N_FFT // 2 + 1  # 512
MODEL_BINS = 256
MASK_EPS = 1e-8

EVAL_ALPHAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class InvalidInputError(ValueError):
    """Raised when an array violates a shape or content precondition."""


@lru_cache(maxsize=None)
def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    # periodic Hann
    n = np.arange(length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    w.setflags(write=False)
    return w


def num_frames(n_samples: int, hop: int = HOP) -> int:
    return 1 + n_samples // hop


def stft(samples, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered STFT with reflection padding and a Hann window.

    Returns a complex array of shape ``(n_fft // 2 + 1, 1 + len(samples) // hop)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("stft expects a non-empty 1-d signal")
    pad = n_fft // 2
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, (pad, pad), mode=mode)
    n_frames = 1 + (xp.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * hann_window(n_fft), n=n_fft, axis=1).T


def istft(spec, length: int | None = None, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Inverse of :func:`stft` by weighted overlap-add.

    ``length`` trims (or zero-extends) the output; by default the output has
    ``hop * (frames - 1)`` samples.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != n_fft // 2 + 1:
        raise InvalidInputError(f"expected {n_fft // 2 + 1} frequency bins, got shape {spec.shape}")
    n_frames = spec.shape[1]
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * hop
        out[s:s + n_fft] += frames[t]
        norm[s:s + n_fft] += win ** 2
    pad = n_fft // 2
    if length is None:
        length = hop * (n_frames - 1)
    out = out[pad:pad + length]
    norm = norm[pad:pad + length]
    if np.any(norm[: out.size] < 1e-10):
        raise FloatingPointError("overlap-add window normalization has a zero denominator")
    y = out / norm
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return y


def magnitude(spec) -> np.ndarray:
    return np.abs(np.asarray(spec))


@lru_cache(maxsize=None)
def freq_interp_matrix(src_bins: int = N_BINS, dst_bins: int = MODEL_BINS) -> np.ndarray:
    """``(dst_bins, src_bins)`` linear-interpolation operator over bin index.

    Output bin ``j`` samples source position ``j * (src_bins - 1) / (dst_bins - 1)``,
    so the first and last bins are reproduced exactly.
    """
    if dst_bins > src_bins:
        raise NotImplementedError("frequency upsampling is not supported")
    pos = np.arange(dst_bins) * (src_bins - 1) / (dst_bins - 1)
    lo = np.minimum(np.floor(pos).astype(int), src_bins - 2)
    frac = pos - lo
    mat = np.zeros((dst_bins, src_bins))
    mat[np.arange(dst_bins), lo] = 1.0 - frac
    mat[np.arange(dst_bins), lo + 1] += frac
    mat.setflags(write=False)
    return mat


def resample_freq(mag, target_bins: int = MODEL_BINS) -> np.ndarray:
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2:
        raise InvalidInputError("resample_freq expects a (freq, time) matrix")
    if target_bins > mag.shape[0]:
        raise NotImplementedError(f"cannot resample {mag.shape[0]} bins up to {target_bins}")
    if target_bins == mag.shape[0]:
        return mag.copy()
    # clip guards the -0.0/1e-17 round-off from the interpolation weights
    return np.maximum(freq_interp_matrix(mag.shape[0], target_bins) @ mag, 0.0)


def model_spectrogram(samples) -> np.ndarray:
    """Waveform -> 256 x T magnitude spectrogram fed to every network."""
    return resample_freq(magnitude(stft(samples)))


def mix(speech, noise, alpha: float) -> np.ndarray:
    """``speech + alpha * noise``, no normalization or clipping."""
    speech = np.asarray(speech, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if speech.shape != noise.shape:
        raise InvalidInputError(f"length mismatch: speech {speech.shape} vs noise {noise.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        # speech + 0*noise would turn -0.0 into +0.0 and break bit identity
        return speech.copy()
    return speech + alpha * noise


def raw_ratio(mag_speech, mag_mix, eps: float = MASK_EPS) -> np.ndarray:
    """Unclamped speech/mixture magnitude ratio (diagnostic; may exceed 1)."""
    mag_speech = np.asarray(mag_speech, dtype=np.float64)
    mag_mix = np.asarray(mag_mix, dtype=np.float64)
    if mag_speech.shape != mag_mix.shape:
        raise InvalidInputError(f"shape mismatch: {mag_speech.shape} vs {mag_mix.shape}")
    return mag_speech / (mag_mix + eps)


def ratio_mask(mag_speech, mag_mix, eps: float = MASK_EPS) -> np.ndarray:
    return np.clip(raw_ratio(mag_speech, mag_mix, eps), 0.0, 1.0)


def apply_mask(mask, mag_mix) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    mag_mix = np.asarray(mag_mix, dtype=np.float64)
    if mask.shape != mag_mix.shape:
        raise InvalidInputError(f"shape mismatch: {mask.shape} vs {mag_mix.shape}")
    return mask * mag_mix


def snr_db(reference, estimate) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    n = min(reference.size, estimate.size)
    reference, estimate = reference[:n], estimate[:n]
    err = np.sum((reference - estimate) ** 2)
    sig = np.sum(reference ** 2)
    return float(10.0 * np.log10((sig + 1e-20) / (err + 1e-20)))
