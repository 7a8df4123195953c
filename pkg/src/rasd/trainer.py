"""Joint optimisation under the composite loss, checkpointing and gradient verification."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .corpus import Corpus, class_weights, frame_label_counts, sample_train_mix
from .losses import DEFAULT_LAMBDAS, LossBreakdown
from .model import ModelConfig, RASDModel, SpectrogramCache, build_model, collate, materialize
from .separator import parse_width_scale
from .weigher import CLEAN, WITH_NOISE

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, components: dict):
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {json.dumps(components)}")


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay_per_epoch: float = 0.95
    batch_size: int = 4
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    precision: str = "float32"
    lambdas: tuple = DEFAULT_LAMBDAS
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError(f"lr decay must be in (0, 1], got {self.lr_decay_per_epoch}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if len(self.lambdas) != 3:
            raise ValueError("lambdas needs exactly three values")
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["model"]["combo"] = list(self.model.combo)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**{**d.pop("model", {})})
        model.combo = tuple(model.combo)
        if "lambdas" in d:
            d["lambdas"] = tuple(d["lambdas"])
        return cls(model=model, **d)


def corpus_class_weights(corpus: Corpus) -> np.ndarray:
    counts = frame_label_counts(corpus.train)
    if np.any(counts == 0):
        # an absent class never contributes to the loss; keep the others' weights finite
        log.warning("noise-type classes absent from training frames: %s", np.flatnonzero(counts == 0).tolist())
        counts = np.maximum(counts, 1)
    return class_weights(counts)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_per_epoch ** epoch


@dataclass
class TrainState:
    cfg: TrainConfig
    model: RASDModel
    optimizer: torch.optim.Optimizer
    class_weights: np.ndarray
    epoch: int = 0
    step: int = 0
    log: list = field(default_factory=list)
    weight_trajectory: list = field(default_factory=list)
    last_out: dict | None = None

    @property
    def dtype(self):
        return DTYPES[self.cfg.precision]


def set_deterministic(flag: bool = True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def init_state(cfg: TrainConfig, cls_w) -> TrainState:
    cfg.validate()
    set_deterministic(cfg.deterministic)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, cfg.seed, DTYPES[cfg.precision])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    return TrainState(cfg, model, opt, np.asarray(cls_w, dtype=np.float64))


def train_step(batch: dict, state: TrainState) -> tuple[TrainState, LossBreakdown]:
    """One forward/backward/Adam update on ``batch``."""
    model = state.model
    model.train()
    out = model(batch)
    br = model.losses(batch, out, state.cfg.lambdas)
    if not br.is_finite():
        raise NonFiniteLossError(state.step, br.as_floats())
    state.optimizer.zero_grad(set_to_none=True)
    br.total.backward()
    state.optimizer.step()
    state.step += 1
    state.last_out = {k: v.detach() for k, v in out.items()}
    return state, br


def steps_per_epoch(cfg: TrainConfig, n_train: int) -> int:
    return math.ceil(n_train / cfg.batch_size)


def epoch_batches(cfg: TrainConfig, corpus: Corpus, epoch: int):
    """Index batches for one epoch, shuffled deterministically from (seed, epoch)."""
    order = np.random.default_rng([cfg.seed, epoch, 17]).permutation(len(corpus.train))
    return [order[i:i + cfg.batch_size].tolist() for i in range(0, len(order), cfg.batch_size)]


def make_batch(corpus: Corpus, indices, epoch: int, seed: int, cls_w, dtype, cache=None) -> dict:
    specs = [sample_train_mix(epoch, i, seed, corpus) for i in indices]
    return collate([materialize(corpus, s, cache) for s in specs], cls_w, dtype)


def fit(cfg: TrainConfig, corpus: Corpus, state: TrainState | None = None, on_epoch=None,
        on_step=None) -> TrainState:
    """Train for ``cfg.epochs`` (or until ``cfg.max_steps``), logging every step."""
    cfg.validate()
    if state is None:
        state = init_state(cfg, corpus_class_weights(corpus))
    cache = SpectrogramCache()
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch(cfg, len(corpus.train))
    while state.step < total_steps:
        epoch = state.epoch
        lr = lr_at_epoch(cfg, epoch)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        w_sum = np.zeros(2)
        w_cnt = np.zeros(2)
        for indices in epoch_batches(cfg, corpus, epoch):
            if state.step >= total_steps:
                break
            batch = make_batch(corpus, indices, epoch, cfg.seed, state.class_weights, state.dtype, cache)
            state, br = train_step(batch, state)
            row = {"step": state.step, "epoch": epoch, "lr": lr, **br.as_floats()}
            weights = state.last_out.get("weights")
            if weights is not None:
                labels = batch["frame_labels"]
                for j, cls in enumerate((CLEAN, WITH_NOISE)):
                    sel = labels == cls
                    w_sum[j] += float(weights[sel].sum())
                    w_cnt[j] += int(sel.sum())
            state.log.append(row)
            if on_step is not None:
                on_step(state, row)
        traj = {"epoch": epoch, "step": state.step,
                "mean_weight_clean": float(w_sum[0] / w_cnt[0]) if w_cnt[0] else None,
                "mean_weight_with_noise": float(w_sum[1] / w_cnt[1]) if w_cnt[1] else None}
        if state.model.weigher is not None:
            state.weight_trajectory.append(traj)
        log.info("epoch %d done at step %d: %s", epoch, state.step, state.log[-1] if state.log else {})
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            arrays[f"optim/{n}/step"] = np.asarray(float(st["step"]))
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["class_weights"] = state.class_weights
    meta = {
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "width_scale": str(parse_width_scale(state.cfg.model.width_scale)),
        "lr": state.optimizer.param_groups[0]["lr"],
        "weight_trajectory": state.weight_trajectory,
    }
    checkpoint.write_container(path, arrays, meta)


def load_checkpoint(path, expect_width_scale=None) -> TrainState:
    arrays, meta = checkpoint.read_container(path)
    cfg = TrainConfig.from_dict(meta["config"])
    if expect_width_scale is not None and \
            parse_width_scale(expect_width_scale) != parse_width_scale(meta["width_scale"]):
        raise CheckpointMismatchError(
            f"checkpoint width_scale {meta['width_scale']} does not match requested {expect_width_scale}")
    state = init_state(cfg, arrays["class_weights"])
    sd = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    state.model.load_state_dict(sd)
    for n, p in state.model.named_parameters():
        key = f"optim/{n}/exp_avg"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{n}/step"].reshape(-1)[0])),
                "exp_avg": torch.from_numpy(arrays[key]),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"]),
            }
    for g in state.optimizer.param_groups:
        g["lr"] = meta["lr"]
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"]))
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.weight_trajectory = meta.get("weight_trajectory", [])
    return state


# ---------------------------------------------------------------- gradient check

GRADCHECK_NETWORKS = ("separator", "rfg", "weigher", "asd_head")


def _loss_value(model, batch, lambdas, ss_weights=None) -> torch.Tensor:
    out = model(batch)
    return model.losses(batch, out, lambdas, ss_weights).total


def jitter_biases(model: nn.Module, seed: int, scale: float):
    """Replace every bias with U(-scale, scale) noise.

    Zero biases plus zero-padded inputs leave many ReLU inputs exactly on the
    kink, where one-sided and central differences disagree by construction.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * scale)


def grad_check(model: RASDModel, batch: dict, eps: float = 1e-6, n_coords: int = 200,
               seed: int = 0, lambdas=DEFAULT_LAMBDAS, networks=GRADCHECK_NETWORKS,
               floor: float = 1e-6, bias_jitter: float = 0.05) -> dict:
    """Central finite differences against autograd on sampled parameter coordinates.

    Works on a copy of ``model`` (biases jittered, see :func:`jitter_biases`).
    Under the stop-gradient contract the separation-loss weights are pinned to
    their unperturbed values while differencing, so both sides differentiate
    the same function.

    Returns ``{network: {"max_rel_error", "max_abs_error", "n"}, ..., "max_rel_error": overall}``.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model")
    model = copy.deepcopy(model)
    if bias_jitter:
        jitter_biases(model, seed, bias_jitter)
    model.train()
    model.zero_grad(set_to_none=True)
    out = model(batch)
    pinned = None
    if "weights" in out and model.cfg.weight_coupling == "detach":
        pinned = out["weights"].detach().clone()
    model.losses(batch, out, lambdas).total.backward()
    rng = np.random.default_rng(seed)
    nets = model.networks()
    report = {}
    worst = 0.0
    for name in networks:
        net = nets.get(name)
        if net is None:
            continue
        params = [p for p in net.parameters() if p.requires_grad]
        sizes = np.array([p.numel() for p in params])
        flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        max_rel = max_abs = 0.0
        with torch.no_grad():
            for f in flat:
                k = int(np.searchsorted(bounds, f, side="right"))
                p = params[k]
                j = int(f - (bounds[k - 1] if k else 0))
                view = p.view(-1)
                analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
                orig = float(view[j])
                view[j] = orig + eps
                up = float(_loss_value(model, batch, lambdas, pinned))
                view[j] = orig - eps
                down = float(_loss_value(model, batch, lambdas, pinned))
                view[j] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic - numeric)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(analytic), abs(numeric), floor))
        report[name] = {"max_rel_error": max_rel, "max_abs_error": max_abs, "n": int(flat.size)}
        worst = max(worst, max_rel)
    report["max_rel_error"] = worst
    return report


def save_log(state: TrainState, path):
    """Loss log as JSON lines (one record per step)."""
    lines = [json.dumps(r, sort_keys=True) for r in state.log]
    Path(path).write_text("\n".join(lines) + "\n")
