"""Frame-level average precision, the six-alpha robustness sweep and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .corpus import Corpus, MixSpec, fit_noise
from .dsp import EVAL_ALPHAS
from .model import RASDModel, SpectrogramCache, collate, materialize


class UndefinedMetricError(ValueError):
    pass


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of every positive, ranking by descending score.

    Ties keep their input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class EvalReport:
    per_alpha: dict = field(default_factory=dict)     # "0.2" -> {"ap", "mask_l1", "recon_snr_db"}
    average_ap: float = float("nan")
    weight_trajectory: list = field(default_factory=list)
    config_digest: str = ""
    label: str = ""

    def ap(self, alpha: float) -> float:
        return self.per_alpha[alpha_key(alpha)]["ap"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def alpha_key(alpha: float) -> str:
    return f"{float(alpha):.1f}"


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def expand_mask(mask: np.ndarray) -> np.ndarray:
    """Linear interpolation of a 256-bin mask back onto the 512 STFT bins."""
    src = np.arange(mask.shape[0]) * (dsp.N_BINS - 1) / (mask.shape[0] - 1)
    dst = np.arange(dsp.N_BINS)
    return np.stack([np.interp(dst, src, col) for col in mask.T], axis=1)


def reconstruct(mask: np.ndarray, mix_wave: np.ndarray) -> np.ndarray:
    """Masked mixture magnitude with mixture phase, back to a waveform."""
    spec = dsp.stft(mix_wave)
    return dsp.istft(expand_mask(mask) * spec, length=mix_wave.size)


def mask_quality(masks, items, mix_waves=None, speech_waves=None) -> tuple[float, float]:
    """Mean ``|M_gt - M_pred|`` and mean reconstruction SNR (dB) against the pre-mix speech.

    The SNR is a speech-quality proxy; it is not PESQ. It is only computed when
    waveforms are supplied.
    """
    l1 = float(np.mean([np.mean(np.abs(it["mask_gt"] - m)) for m, it in zip(masks, items)]))
    if mix_waves is None:
        return l1, float("nan")
    snrs = [dsp.snr_db(s, reconstruct(m, x)) for m, x, s in zip(masks, mix_waves, speech_waves)]
    return l1, float(np.mean(snrs))


@torch.no_grad()
def predict(model: RASDModel, items: list, cls_w, batch_size: int = 8):
    """Run the model in eval mode; returns per-item masks (or None) and per-track scores."""
    model.eval()
    dtype = next(model.parameters()).dtype
    masks, scores = [], []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        batch = collate(chunk, cls_w, dtype)
        out = model(batch)
        k = 0
        for j, it in enumerate(chunk):
            masks.append(out["mask"][j].double().numpy() if "mask" in out else None)
            n_tracks = len(it["frames"])
            scores.append(out["scores"][k:k + n_tracks].double().numpy())
            k += n_tracks
    return masks, scores


def score_records(items, scores) -> list:
    """Flatten predictions into ``{video_id, person_id, frame_index, score, label}`` records."""
    rows = []
    for it, sc in zip(items, scores):
        for pid, labels, s in zip(it["person_ids"], it["track_labels"], sc):
            n = min(len(labels), len(s))
            for f in range(n):
                rows.append({"video_id": it["id"], "person_id": pid, "frame_index": f,
                             "score": float(s[f]), "label": int(labels[f]), "alpha": it["alpha"]})
    return rows


def ap_from_records(rows) -> float:
    return average_precision([r["score"] for r in rows], [r["label"] for r in rows])


def evaluate_specs(model: RASDModel, corpus: Corpus, specs: list, cls_w, batch_size: int = 8) -> dict:
    """Pooled frame AP and mean mask L1 over arbitrary mixtures (e.g. fresh training draws)."""
    cache = SpectrogramCache()
    items = [materialize(corpus, m, cache) for m in specs]
    masks, scores = predict(model, items, cls_w, batch_size)
    out = {"ap": ap_from_records(score_records(items, scores)), "mask_l1": None}
    if masks and masks[0] is not None:
        out["mask_l1"] = mask_quality(masks, items)[0]
    return out


def sweep_alpha(model: RASDModel, corpus: Corpus, grid: list, cls_w, batch_size: int = 8,
                with_snr: bool = True, label: str = "", cfg: dict | None = None,
                records: list | None = None) -> EvalReport:
    """Per-alpha frame-level AP, mask L1 and reconstruction SNR over a frozen grid."""
    alphas = sorted({m.alpha for m in grid})
    if set(alphas) != set(EVAL_ALPHAS):
        raise ValueError(f"eval grid must cover exactly {EVAL_ALPHAS}, got {alphas}")
    cache = SpectrogramCache()
    report = EvalReport(label=label, config_digest=config_digest(cfg or {}))
    for a in EVAL_ALPHAS:
        specs = [m for m in grid if m.alpha == a]
        items = [materialize(corpus, m, cache) for m in specs]
        masks, scores = predict(model, items, cls_w, batch_size)
        rows = score_records(items, scores)
        if records is not None:
            records.extend(rows)
        entry = {"ap": ap_from_records(rows), "mask_l1": None, "recon_snr_db": None}
        if masks and masks[0] is not None:
            mix_w = speech_w = None
            if with_snr:
                mix_w, speech_w = zip(*(mixture_waves(corpus, m) for m in specs))
            l1, snr = mask_quality(masks, items, mix_w, speech_w)
            entry["mask_l1"] = l1
            entry["recon_snr_db"] = snr if with_snr else None
        report.per_alpha[alpha_key(a)] = entry
    report.average_ap = float(np.mean([v["ap"] for v in report.per_alpha.values()]))
    return report


def mixture_waves(corpus: Corpus, spec: MixSpec):
    scene = corpus.scene(spec.speech_id)
    noise = fit_noise(corpus.noise(spec.noise_id).audio, scene.audio.size, spec.offset)
    return dsp.mix(scene.audio, noise, spec.alpha), scene.audio


# ---------------------------------------------------------------- files

def _fmt(v):
    return "" if v is None else repr(float(v))


def emit_report(report: EvalReport, path) -> dict:
    """Write ``<path>.json``, ``<path>.csv`` (one row per alpha) and ``<path>_ap_curve.csv``."""
    base = Path(path)
    if base.suffix:
        base = base.with_suffix("")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        files = {"json": base.with_suffix(".json"), "csv": base.with_suffix(".csv"),
                 "curve": base.parent / f"{base.name}_ap_curve.csv"}
        files["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "ap", "mask_l1", "recon_snr_db"])
        for k in sorted(report.per_alpha, key=float):
            e = report.per_alpha[k]
            w.writerow([k, _fmt(e["ap"]), _fmt(e["mask_l1"]), _fmt(e["recon_snr_db"])])
        files["csv"].write_text(buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "alpha", "ap"])
        for k in sorted(report.per_alpha, key=float):
            w.writerow([report.label or "model", k, _fmt(report.per_alpha[k]["ap"])])
        files["curve"].write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write report to {base}: {exc}") from exc
    return files


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_results(rows, path):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
