"""Synthetic audio-visual scenes, noise banks, WAV ingestion and the mixing protocol.

A scene is one speech waveform (optionally carrying baked-in "inherent" noise)
plus 1-3 face tracks of 512-d per-frame embeddings at 25 fps. Exactly one
track belongs to the speaker; its first embedding dimension follows the
speech envelope. The remaining tracks "mouth" on their own independent
schedule, so the visual stream alone cannot tell who is talking.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import EVAL_ALPHAS, SAMPLE_RATE

FPS = 25
SAMPLES_PER_VISUAL = SAMPLE_RATE // FPS
EMBED_DIM = 512
NOISE_RMS = 0.1
CROSSFADE = SAMPLE_RATE // 100  # 10 ms

NOISE_LABELS = ("clean_speech", "speech_with_noise", "no_speech")
NOISE_CATEGORIES = ("white", "pink", "hum", "chirp", "impulsive")


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    duration_s: float = 2.0
    min_faces: int = 1
    max_faces: int = 3
    p_silent: float = 0.25       # scenes with no voiced region at all
    p_inherent: float = 0.0      # per voiced scene
    inherent_level: float = 0.5  # inherent-noise RMS relative to speech RMS
    speech_rms: float = 0.05     # RMS over voiced samples
    visual_noise: float = 0.03
    activity_threshold: float = 0.5

    def validate(self):
        if not 1.0 <= self.duration_s <= 8.0:
            raise ConfigError(f"duration_s must be within [1, 8], got {self.duration_s}")
        if not 1 <= self.min_faces <= self.max_faces <= 3:
            raise ConfigError(f"face counts must satisfy 1 <= min <= max <= 3, got "
                              f"{self.min_faces}..{self.max_faces}")
        for name in ("p_silent", "p_inherent"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if self.inherent_level < 0 or self.speech_rms <= 0:
            raise ConfigError("levels must be positive")
        return self


@dataclass
class FaceTrack:
    person_id: str
    frames: np.ndarray  # (N_v, 512)
    labels: np.ndarray  # (N_v,) 0/1


@dataclass
class Scene:
    id: str
    audio: np.ndarray            # A_speech, already containing any inherent noise
    noise_label: str
    activity: np.ndarray         # (N_v,) speaker activity
    tracks: list
    envelope: np.ndarray | None = None   # sample-rate speech envelope
    inherent: np.ndarray | None = None   # the baked-in noise component
    params: dict = field(default_factory=dict)
    split: str = "train"

    @property
    def duration_s(self) -> float:
        return self.audio.size / SAMPLE_RATE

    def frame_labels(self) -> np.ndarray:
        """Noise-type class id for every STFT frame (0 clean, 1 with noise, 2 no speech)."""
        n = dsp.num_frames(self.audio.size)
        voiced = voiced_audio_frames(self.envelope, n)
        speech_cls = 1 if self.noise_label == "speech_with_noise" else 0
        return np.where(voiced, speech_cls, 2).astype(np.int64)

    def visual_condition(self) -> np.ndarray:
        """Mean embedding over every frame of every track in the scene."""
        return np.concatenate([t.frames for t in self.tracks]).mean(axis=0)


@dataclass
class NoiseClip:
    id: str
    audio: np.ndarray
    category: str
    split: str = "train"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MixSpec:
    speech_id: str
    noise_id: str
    alpha: float
    split: str
    offset: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.split not in ("train", "val"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.split == "val" and self.alpha not in EVAL_ALPHAS:
            raise ConfigError(f"validation alpha must be one of {EVAL_ALPHAS}, got {self.alpha}")


# ---------------------------------------------------------------- generators

def _onoff_schedule(rng, n_frames: int, on=(8, 25), off=(5, 20)) -> np.ndarray:
    """Binary per-visual-frame schedule of alternating on/off runs."""
    out = np.zeros(n_frames)
    state = rng.random() < 0.5
    i = 0
    while i < n_frames:
        lo, hi = on if state else off
        run = int(rng.integers(lo, hi + 1))
        out[i:i + run] = float(state)
        i += run
        state = not state
    return out


def _smooth_envelope(schedule: np.ndarray, n_samples: int) -> np.ndarray:
    """Upsample a frame schedule to audio rate with raised-cosine 40 ms edges."""
    raw = np.repeat(schedule, SAMPLES_PER_VISUAL)[:n_samples]
    if raw.size < n_samples:
        raw = np.pad(raw, (0, n_samples - raw.size))
    ramp = np.hanning(SAMPLES_PER_VISUAL + 1)
    ramp /= ramp.sum()
    return np.clip(np.convolve(raw, ramp, mode="same"), 0.0, 1.0)


def frame_means(envelope: np.ndarray, n_frames: int) -> np.ndarray:
    seg = envelope[: n_frames * SAMPLES_PER_VISUAL]
    return seg.reshape(n_frames, SAMPLES_PER_VISUAL).mean(axis=1)


def voiced_audio_frames(envelope, n_frames: int, threshold: float = 0.5) -> np.ndarray:
    if envelope is None:
        return np.ones(n_frames, dtype=bool)
    idx = np.minimum(np.arange(n_frames) * dsp.HOP, envelope.size - 1)
    return envelope[idx] >= threshold


def _harmonic_speech(rng, envelope: np.ndarray) -> np.ndarray:
    n = envelope.size
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 220.0)
    vib_rate, vib_phase = rng.uniform(2.0, 5.0), rng.uniform(0, 2 * np.pi)
    drift = rng.uniform(-0.1, 0.1)
    f0_t = f0 * (1.0 + 0.04 * np.sin(2 * np.pi * vib_rate * t + vib_phase) + drift * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0_t) / SAMPLE_RATE
    formants = rng.uniform([300, 900, 2000], [800, 1800, 3200])
    out = np.zeros(n)
    k_max = int(4000 // (f0 * 1.15))
    for k in range(1, k_max + 1):
        fk = k * f0
        gain = sum(np.exp(-0.5 * ((fk - f) / 200.0) ** 2) for f in formants)
        out += (0.3 + gain) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out * envelope


def synth_noise(seed: int, category: str, duration_s: float = 3.0) -> NoiseClip:
    """Parametric non-speech noise, RMS-normalized to 0.1."""
    if category not in NOISE_CATEGORIES:
        raise ConfigError(f"unknown noise category {category!r}; choose from {NOISE_CATEGORIES}")
    rng = np.random.default_rng([int(seed), NOISE_CATEGORIES.index(category)])
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if category == "white":
        x = rng.standard_normal(n)
    elif category == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0
        x = np.fft.irfft(spec, n)
    elif category == "hum":
        base = rng.choice([50.0, 60.0]) * rng.uniform(0.98, 1.02)
        x = np.zeros(n)
        for k in range(1, int(480 // base) + 1):
            x += rng.uniform(0.3, 1.0) / k * np.sin(2 * np.pi * k * base * t + rng.uniform(0, 2 * np.pi))
        x += 0.02 * rng.standard_normal(n)
    elif category == "chirp":
        f_lo, f_hi = rng.uniform(200, 600), rng.uniform(2000, 5000)
        period = rng.uniform(0.4, 1.2)
        frac = (t % period) / period
        inst = f_lo * (f_hi / f_lo) ** frac
        x = np.sin(2 * np.pi * np.cumsum(inst) / SAMPLE_RATE)
    else:  # impulsive
        x = 0.01 * rng.standard_normal(n)
        decay = np.exp(-np.arange(800) / rng.uniform(60, 200))
        for start in rng.integers(0, n, size=int(rng.integers(8, 20) * duration_s)):
            burst = rng.standard_normal(800) * decay * rng.uniform(0.5, 1.5)
            end = min(n, start + burst.size)
            x[start:end] += burst[: end - start]
    x = x - x.mean()
    x *= NOISE_RMS / np.sqrt(np.mean(x ** 2))
    x = _f32(x)
    return NoiseClip(id=f"noise-{category}-{seed}", audio=x, category=category,
                     params={"seed": int(seed), "category": category, "duration_s": duration_s})


def synth_scene(seed: int, params: SceneConfig | None = None, scene_id: str | None = None,
                silent: bool | None = None) -> Scene:
    """Deterministic synthetic scene; ``silent`` overrides the random voicing draw."""
    cfg = (params or SceneConfig()).validate()
    rng = np.random.default_rng([int(seed), 7919])
    n = int(round(cfg.duration_s * SAMPLE_RATE))
    n_v = int(np.floor(cfg.duration_s * FPS))

    is_silent = (rng.random() < cfg.p_silent) if silent is None else silent
    schedule = np.zeros(n_v) if is_silent else _onoff_schedule(rng, n_v)
    if not is_silent and schedule.sum() == 0:
        schedule[n_v // 4: n_v // 2] = 1.0
    envelope = _smooth_envelope(schedule, n)
    clean = _harmonic_speech(rng, envelope)
    voiced = envelope >= cfg.activity_threshold
    if voiced.any():
        clean *= cfg.speech_rms / np.sqrt(np.mean(clean[voiced] ** 2))

    has_noise = voiced.any() and rng.random() < cfg.p_inherent
    inherent = np.zeros(n)
    if has_noise:
        cat = NOISE_CATEGORIES[int(rng.integers(len(NOISE_CATEGORIES)))]
        clip = synth_noise(int(rng.integers(2**31)), cat, cfg.duration_s + 0.1)
        inherent = fit_noise(clip.audio, n) * (cfg.inherent_level * cfg.speech_rms / NOISE_RMS)
    audio = _f32(clean + inherent)
    envelope = _f32(envelope)

    if not voiced.any():
        label = "no_speech"
    elif has_noise:
        label = "speech_with_noise"
    else:
        label = "clean_speech"

    env_frames = frame_means(envelope, n_v)
    activity = (env_frames >= cfg.activity_threshold).astype(np.int64)

    n_faces = int(rng.integers(cfg.min_faces, cfg.max_faces + 1))
    speaker = int(rng.integers(n_faces))
    tracks = []
    for i in range(n_faces):
        identity = rng.standard_normal(EMBED_DIM) * 0.5
        jitter = _lowpass_noise(rng, (n_v, EMBED_DIM), 0.1)
        frames = identity[None, :] + jitter
        if i == speaker:
            mouth = env_frames
            labels = activity.copy()
        else:
            mouth = frame_means(_smooth_envelope(_onoff_schedule(rng, n_v), n), n_v)
            labels = np.zeros(n_v, dtype=np.int64)
        frames[:, 0] = mouth + cfg.visual_noise * rng.standard_normal(n_v)
        tracks.append(FaceTrack(person_id=f"p{i}", frames=frames, labels=labels))

    sid = scene_id or f"scene-{seed}"
    return Scene(id=sid, audio=audio, noise_label=label, activity=activity, tracks=tracks,
                 envelope=envelope, inherent=inherent,
                 params={"seed": int(seed), **asdict(cfg), "silent": bool(is_silent)})


def _f32(x: np.ndarray) -> np.ndarray:
    # keep generated audio float32-representable so WAV round trips are exact
    return x.astype(np.float32).astype(np.float64)


def _lowpass_noise(rng, shape, scale: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    kernel = np.hanning(9)
    kernel /= np.sqrt(np.sum(kernel ** 2))
    return scale * np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, x)


# ---------------------------------------------------------------- noise fitting

def fit_noise(noise: np.ndarray, length: int, offset: int = 0, crossfade: int = CROSSFADE) -> np.ndarray:
    """Loop ``noise`` with equal-power crossfades, then crop ``length`` samples from ``offset``."""
    noise = np.asarray(noise, dtype=np.float64)
    need = offset + length
    if noise.size >= need:
        return noise[offset:need].copy()
    if noise.size <= 2 * crossfade:
        raise ConfigError("noise clip too short to loop")
    period = noise.size - crossfade
    fade = np.sin(0.5 * np.pi * (np.arange(crossfade) + 0.5) / crossfade)
    copies = 1 + int(np.ceil((need - noise.size) / period))
    out = np.zeros(period * copies + crossfade)
    for k in range(copies):
        seg = noise.copy()
        if k > 0:
            seg[:crossfade] *= fade
        if k < copies - 1:
            seg[-crossfade:] *= fade[::-1]
        out[k * period: k * period + noise.size] += seg
    return out[offset:need]


# ---------------------------------------------------------------- WAV I/O

def write_wav(path, samples, sample_rate: int = SAMPLE_RATE, pcm16: bool = False):
    """Mono WAV: IEEE float32 by default, PCM16 when ``pcm16``."""
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        fmt, bits = 1, 16
    else:
        data = samples.astype("<f4").tobytes()
        fmt, bits = 3, 32
    block = bits // 8
    header = b"RIFF" + (36 + len(data)).to_bytes(4, "little") + b"WAVE"
    header += b"fmt " + (16).to_bytes(4, "little") + fmt.to_bytes(2, "little")
    header += (1).to_bytes(2, "little") + sample_rate.to_bytes(4, "little")
    header += (sample_rate * block).to_bytes(4, "little") + block.to_bytes(2, "little")
    header += bits.to_bytes(2, "little")
    header += b"data" + len(data).to_bytes(4, "little")
    Path(path).write_bytes(header + data)


def ingest_wav(path) -> np.ndarray:
    """Read a mono 16 kHz PCM16 or float32 WAV into float64 samples in [-1, 1]."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], int.from_bytes(raw[pos + 4:pos + 8], "little")
        body = raw[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    tag = int.from_bytes(fmt[0:2], "little")
    channels = int.from_bytes(fmt[2:4], "little")
    rate = int.from_bytes(fmt[4:8], "little")
    bits = int.from_bytes(fmt[14:16], "little")
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: real tag in the subformat GUID
        tag = int.from_bytes(fmt[24:26], "little")
    if channels != 1:
        raise FormatError(f"{path}: expected 1 channel, found {channels}")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    if tag == 1 and bits == 16:
        return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    if tag == 3 and bits == 32:
        return np.frombuffer(data, dtype="<f4").astype(np.float64)
    raise FormatError(f"{path}: expected PCM16 or float32 samples, found format {tag} with {bits} bits")


# ---------------------------------------------------------------- labels and weights

def class_weights(label_counts) -> np.ndarray:
    """Inverse-frequency class weights ``sum(n) / (K * n_c)``.

    The label-weighted mean of the result is exactly 1.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("label_counts must be a non-empty 1-d sequence")
    if np.any(counts < 1):
        raise ConfigError(f"every class needs at least one label, got counts {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def frame_label_counts(scenes) -> np.ndarray:
    counts = np.zeros(3, dtype=np.int64)
    for s in scenes:
        counts += np.bincount(s.frame_labels(), minlength=3)
    return counts


# ---------------------------------------------------------------- corpus and protocol

@dataclass
class Corpus:
    train: list
    val: list
    noise_train: list
    noise_val: list
    seed: int = 0

    def __post_init__(self):
        self._scenes = {s.id: s for s in self.train + self.val}
        self._noise = {c.id: c for c in self.noise_train + self.noise_val}

    def scene(self, sid: str) -> Scene:
        return self._scenes[sid]

    def noise(self, nid: str) -> NoiseClip:
        return self._noise[nid]


def build_corpus(seed: int, n_train: int, n_val: int, scene_cfg: SceneConfig | None = None,
                 noise_per_family: int = 25, val_noise_fraction: float = 0.2,
                 noise_duration_s: float = 3.0) -> Corpus:
    scene_cfg = scene_cfg or SceneConfig()
    root = np.random.default_rng([int(seed), 104729])
    seeds = root.integers(0, 2**31, size=n_train + n_val)
    train = [synth_scene(int(s), scene_cfg, f"train-{i:04d}") for i, s in enumerate(seeds[:n_train])]
    val = [synth_scene(int(s), scene_cfg, f"val-{i:04d}") for i, s in enumerate(seeds[n_train:])]
    for s in val:
        s.split = "val"
    n_val_noise = int(round(noise_per_family * val_noise_fraction))
    noise_train, noise_val = [], []
    for cat in NOISE_CATEGORIES:
        nseeds = root.integers(0, 2**31, size=noise_per_family)
        for j, ns in enumerate(nseeds):
            clip = synth_noise(int(ns), cat, noise_duration_s)
            is_val = j >= noise_per_family - n_val_noise
            clip.id = f"{'val' if is_val else 'train'}-{cat}-{j:03d}"
            clip.split = "val" if is_val else "train"
            (noise_val if is_val else noise_train).append(clip)
    return Corpus(train, val, noise_train, noise_val, seed=int(seed))


def sample_train_mix(epoch: int, index: int, rng_seed: int, corpus: Corpus) -> MixSpec:
    """Per-(epoch, item) noise pairing: uniform noise clip, uniform offset, alpha ~ U[0, 1]."""
    if not corpus.train or not corpus.noise_train:
        raise StateError("training manifests are empty")
    rng = np.random.default_rng([int(rng_seed), int(epoch), int(index), 31337])
    clip = corpus.noise_train[int(rng.integers(len(corpus.noise_train)))]
    offset = int(rng.integers(clip.audio.size))
    alpha = float(rng.random())
    return MixSpec(corpus.train[index].id, clip.id, alpha, "train", offset)


def build_eval_grid(corpus: Corpus, seed: int, scenes=None) -> list:
    """One frozen noise pairing per validation scene, replicated over the six alphas."""
    scenes = corpus.val if scenes is None else scenes
    noise = corpus.noise_val or corpus.noise_train
    rng = np.random.default_rng([int(seed), 271828])
    grid = []
    for s in scenes:
        clip = noise[int(rng.integers(len(noise)))]
        offset = int(rng.integers(clip.audio.size))
        for a in EVAL_ALPHAS:
            grid.append(MixSpec(s.id, clip.id, a, "val", offset))
    return grid


def write_grid(path, grid, seed: int):
    lines = [json.dumps({"header": True, "seed": int(seed), "alphas": list(EVAL_ALPHAS)}, sort_keys=True)]
    lines += [json.dumps(asdict(m), sort_keys=True) for m in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path):
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows or not rows[0].get("header"):
        raise FormatError(f"{path}: missing grid header record")
    return [MixSpec(**r) for r in rows[1:]], rows[0]["seed"]


def mixture(corpus: Corpus, spec: MixSpec) -> tuple[np.ndarray, np.ndarray]:
    """Materialize ``(mixed, speech)`` waveforms for one MixSpec."""
    scene = corpus.scene(spec.speech_id)
    noise = fit_noise(corpus.noise(spec.noise_id).audio, scene.audio.size, spec.offset)
    return dsp.mix(scene.audio, noise, spec.alpha), scene.audio


# ---------------------------------------------------------------- manifests on disk

def rle_encode(labels) -> list:
    """Run-length encoding as ``[[value, run], ...]``."""
    out = []
    for v in np.asarray(labels).tolist():
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def rle_decode(runs) -> np.ndarray:
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs]) if runs else np.zeros(0, np.int64)


def write_corpus(corpus: Corpus, root) -> dict:
    """Write WAVs, embeddings and JSON-lines manifests under ``root``."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "visual").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, scenes in (("train", corpus.train), ("val", corpus.val)):
        lines = []
        for s in scenes:
            wav = f"audio/{s.id}.wav"
            write_wav(root / wav, s.audio)
            env = f"audio/{s.id}.env.npy"
            np.save(root / env, s.envelope.astype(np.float32))
            tracks = []
            for t in s.tracks:
                emb = f"visual/{s.id}-{t.person_id}.npy"
                np.save(root / emb, t.frames.astype(np.float32))
                tracks.append({"person_id": t.person_id, "embeddings": emb,
                               "label_run_length_encoding": rle_encode(t.labels)})
            lines.append(json.dumps({
                "id": s.id, "path": wav, "envelope": env, "generator_params": s.params,
                "split": split, "noise_label": s.noise_label,
                "duration_s": round(s.duration_s, 6), "tracks": tracks,
            }, sort_keys=True))
        p = root / f"manifest_{split}.jsonl"
        p.write_text("\n".join(lines) + ("\n" if lines else ""))
        paths[split] = p
    for split, clips in (("train", corpus.noise_train), ("val", corpus.noise_val)):
        lines = []
        for c in clips:
            wav = f"audio/{c.id}.wav"
            write_wav(root / wav, c.audio)
            lines.append(json.dumps({"id": c.id, "path": wav, "generator_params": c.params,
                                     "split": split, "category": c.category,
                                     "duration_s": round(c.audio.size / SAMPLE_RATE, 6)},
                                    sort_keys=True))
        p = root / f"noise_{split}.jsonl"
        p.write_text("\n".join(lines) + ("\n" if lines else ""))
        paths[f"noise_{split}"] = p
    return paths


def _read_jsonl(path):
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def load_corpus(root, seed: int = 0) -> Corpus:
    """Load a corpus written by :func:`write_corpus` (or hand-made manifests).

    Scene records need ``path`` (WAV) and per-track ``embeddings`` (.npy,
    N_v x 512) plus ``label_run_length_encoding``; ``envelope`` is optional and,
    when missing, every frame of a speech clip counts as voiced.
    """
    root = Path(root)
    needed = [root / f for f in ("manifest_train.jsonl", "manifest_val.jsonl", "noise_train.jsonl")]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing manifests: {', '.join(missing)}; run `rasd synth-data` first")

    def scenes(split):
        out = []
        for r in _read_jsonl(root / f"manifest_{split}.jsonl"):
            audio = ingest_wav(root / r["path"])
            env = np.load(root / r["envelope"]).astype(np.float64) if r.get("envelope") else None
            if env is None and r["noise_label"] == "no_speech":
                env = np.zeros(audio.size)
            tracks = []
            for t in r["tracks"]:
                frames = np.load(root / t["embeddings"]).astype(np.float64)
                labels = rle_decode(t["label_run_length_encoding"])
                if frames.shape[0] != labels.size:
                    raise FormatError(f"{r['id']}/{t['person_id']}: {frames.shape[0]} frames vs "
                                      f"{labels.size} labels")
                tracks.append(FaceTrack(t["person_id"], frames, labels))
            activity = np.max([t.labels for t in tracks], axis=0)
            out.append(Scene(r["id"], audio, r["noise_label"], activity, tracks, envelope=env,
                             params=r.get("generator_params", {}), split=split))
        return out

    def noise(split):
        p = root / f"noise_{split}.jsonl"
        if not p.exists():
            return []
        return [NoiseClip(r["id"], ingest_wav(root / r["path"]), r["category"], split,
                          r.get("generator_params", {})) for r in _read_jsonl(p)]

    return Corpus(scenes("train"), scenes("val"), noise("train"), noise("val"), seed=seed)
