"""Joint model wiring and batch materialization.

Three audio front ends share the same detector head:

* ``rfg``      separator decoder maps -> ``g`` -> detector (the robust pipeline)
* ``baseline`` plain convolutional encoder on the noisy spectrogram
* ``cascade``  separator mask applied to the mixture, fed to a plain encoder
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import dsp
from .asd_head import FEATURE_DIM, ASDHead, PlainAudioEncoder
from .corpus import Corpus, MixSpec, fit_noise
from .losses import (DEFAULT_LAMBDAS, LossBreakdown, asd_loss, frame_l1, separation_loss,
                     total_loss)
from .rfg import DEFAULT_COMBO, RobustFeatureGenerator, normalize_combo
from .separator import Separator, init_params, pad_time, parse_width_scale, scaled
from .weigher import WeightGenerator, apply_weights, fixed_weights, weigher_loss

MODES = ("rfg", "baseline", "cascade")
COMPRESSIONS = ("none", "log")
# magnitudes well below this count as silence under log compression
LOG_FLOOR = 1e-4


@dataclass
class ModelConfig:
    mode: str = "rfg"
    width_scale: str = "1/8"
    combo: tuple = DEFAULT_COMBO
    use_weigher: bool = True
    fixed_weight: float | None = None
    # "detach": weights act as constants inside the weighted separation loss;
    # "coupled": the separation loss also back-propagates into the weight generator
    weight_coupling: str = "detach"
    # "sample" replaces each frame weight by its clip's mean before weighting the separation loss
    weight_granularity: str = "frame"
    # "log" feeds log1p(|X| / LOG_FLOOR) to every network; "none" feeds the raw magnitude
    input_compression: str = "log"

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        parse_width_scale(self.width_scale)
        self.combo = normalize_combo(self.combo)
        if self.weight_coupling not in ("detach", "coupled"):
            raise ValueError(f"weight_coupling must be 'detach' or 'coupled', got {self.weight_coupling!r}")
        if self.weight_granularity not in ("frame", "sample"):
            raise ValueError(f"weight_granularity must be 'frame' or 'sample', got {self.weight_granularity!r}")
        if self.input_compression not in COMPRESSIONS:
            raise ValueError(f"input_compression must be one of {COMPRESSIONS}, got {self.input_compression!r}")
        if self.fixed_weight is not None and not 0.0 <= self.fixed_weight <= 1.0:
            raise ValueError(f"fixed weight must be in [0, 1], got {self.fixed_weight}")
        return self


class RASDModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        ws = parse_width_scale(cfg.width_scale)
        dim = scaled(FEATURE_DIM, ws)
        self.separator = Separator(ws) if cfg.mode in ("rfg", "cascade") else None
        self.rfg = RobustFeatureGenerator(ws, cfg.combo) if cfg.mode == "rfg" else None
        self.encoder = PlainAudioEncoder(dim, ws) if cfg.mode in ("baseline", "cascade") else None
        dwl = self.separator is not None and cfg.use_weigher and cfg.fixed_weight is None
        self.weigher = WeightGenerator(ws) if dwl else None
        self.head = ASDHead(self.rfg.out_dim if self.rfg is not None else dim)

    def networks(self) -> dict:
        nets = {"separator": self.separator, "rfg": self.rfg, "encoder": self.encoder,
                "weigher": self.weigher, "asd_head": self.head}
        return {k: v for k, v in nets.items() if v is not None}

    def compress(self, mag: torch.Tensor) -> torch.Tensor:
        if self.cfg.input_compression == "log":
            return torch.log1p(mag / LOG_FLOOR)
        return mag

    def forward(self, batch: dict) -> dict:
        mix = batch["mix_mag"]
        n_t = mix.shape[-1]
        out = {}
        if self.separator is not None:
            padded, _ = pad_time(self.compress(mix))
            mask, fms = self.separator(padded, batch["visual_cond"])
            out["mask"] = mask[:, 0, :, :n_t]
            if self.rfg is not None:
                audio = self.rfg(fms)
            else:
                # two-stage cascade: the detector only sees the separated magnitude
                separated = (mask[..., :n_t] * mix).detach()
                audio = self.encoder(pad_time(self.compress(separated))[0])
        else:
            audio = self.encoder(pad_time(self.compress(mix))[0])
        out["audio_feat"] = audio
        per_track = audio[batch["track_scene"]]
        out["scores"] = self.head(per_track, batch["frames"])
        if self.weigher is not None:
            probs, weights = self.weigher(self.compress(batch["speech_mag"]))
            out["probs"], out["weights"] = probs, weights
        return out

    def losses(self, batch: dict, out: dict, lambdas=DEFAULT_LAMBDAS, ss_weights=None) -> LossBreakdown:
        """Composite loss; ``ss_weights`` pins the separation-loss weights to given constants."""
        scores = out["scores"]
        labels = batch["track_labels"][:, : scores.shape[-1]]
        l_asd = asd_loss(scores, labels)
        zero = scores.new_zeros(())
        l_ss, l_w = zero, zero
        if "mask" in out:
            if self.weigher is not None:
                w = out["weights"]
                w_ss = w if self.cfg.weight_coupling == "coupled" else w.detach()
                if ss_weights is not None:
                    w_ss = ss_weights
                if self.cfg.weight_granularity == "sample":
                    w_ss = w_ss.mean(-1, keepdim=True).expand_as(w_ss)
                l_ss = apply_weights(frame_l1(out["mask"], batch["mask_gt"]), w_ss)
                l_w = weigher_loss(out["probs"], batch["frame_labels"], w, batch["class_weights"])
            elif self.cfg.fixed_weight is not None:
                w = fixed_weights(batch["frame_labels"], self.cfg.fixed_weight).to(scores.dtype)
                l_ss = apply_weights(frame_l1(out["mask"], batch["mask_gt"]), w)
            else:
                l_ss = separation_loss(out["mask"], batch["mask_gt"])
        return total_loss(l_asd, l_ss, l_w, lambdas)


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> RASDModel:
    model = RASDModel(cfg)
    init_params(model, seed)
    return model.to(dtype)


# ---------------------------------------------------------------- batches

class SpectrogramCache:
    """Complex STFTs of clean speech keyed by scene id (speech never changes between epochs)."""

    def __init__(self):
        self._stft = {}
        self._mag = {}

    def speech(self, scene):
        if scene.id not in self._stft:
            spec = dsp.stft(scene.audio)
            self._stft[scene.id] = spec
            self._mag[scene.id] = dsp.resample_freq(dsp.magnitude(spec))
        return self._stft[scene.id], self._mag[scene.id]


def materialize(corpus: Corpus, spec: MixSpec, cache: SpectrogramCache | None = None) -> dict:
    """Arrays for one mixture: spectrograms, ground-truth mask, labels and tracks."""
    scene = corpus.scene(spec.speech_id)
    cache = cache or SpectrogramCache()
    speech_stft, speech_mag = cache.speech(scene)
    if spec.alpha == 0.0:
        mix_mag = speech_mag
    else:
        noise = fit_noise(corpus.noise(spec.noise_id).audio, scene.audio.size, spec.offset)
        # the STFT is linear, so mixing in the time-frequency domain equals STFT(mix(...))
        mix_stft = speech_stft + spec.alpha * dsp.stft(noise)
        mix_mag = dsp.resample_freq(dsp.magnitude(mix_stft))
    return {
        "id": scene.id,
        "alpha": spec.alpha,
        "mix_mag": mix_mag,
        "speech_mag": speech_mag,
        "mask_gt": dsp.ratio_mask(speech_mag, mix_mag),
        "frame_labels": scene.frame_labels(),
        "visual_cond": scene.visual_condition(),
        "frames": [t.frames for t in scene.tracks],
        "track_labels": [t.labels for t in scene.tracks],
        "person_ids": [t.person_id for t in scene.tracks],
    }


def collate(items: list, class_weights, dtype=torch.float32) -> dict:
    """Stack items of equal duration into one batch; tracks are flattened across scenes."""
    n_t = {it["mix_mag"].shape[-1] for it in items}
    if len(n_t) != 1:
        raise ValueError(f"batch items must share one duration, got frame counts {sorted(n_t)}")

    def stack(key):
        return torch.as_tensor(np.stack([it[key] for it in items]), dtype=dtype)

    frames, labels, owner, keys = [], [], [], []
    for i, it in enumerate(items):
        for f, l, pid in zip(it["frames"], it["track_labels"], it["person_ids"]):
            frames.append(f)
            labels.append(l)
            owner.append(i)
            keys.append((it["id"], pid))
    return {
        "mix_mag": stack("mix_mag")[:, None],
        "speech_mag": stack("speech_mag")[:, None],
        "mask_gt": stack("mask_gt"),
        "frame_labels": torch.as_tensor(np.stack([it["frame_labels"] for it in items])),
        "visual_cond": stack("visual_cond"),
        "frames": torch.as_tensor(np.stack(frames), dtype=dtype),
        "track_labels": torch.as_tensor(np.stack(labels), dtype=dtype),
        "track_scene": torch.as_tensor(owner, dtype=torch.long),
        "track_keys": keys,
        "class_weights": torch.as_tensor(class_weights, dtype=dtype),
        "alphas": [it["alpha"] for it in items],
    }
