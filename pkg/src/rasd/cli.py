"""Command-line entry point: ``rasd {synth-data,train,eval,gradcheck,ablate}``.

Every command resolves defaults, an optional JSON ``--config`` file and flags
into one nested config, writes it to ``resolved_config.json`` in its output
directory, and can be re-run from that file alone.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .checkpoint import IntegrityError, VersionError
from .corpus import (NOISE_LABELS, ConfigError, FormatError, MixSpec, SceneConfig, StateError,
                     build_corpus, build_eval_grid, load_corpus, read_grid, write_corpus, write_grid)
from .losses import DEFAULT_LAMBDAS
from .model import COMPRESSIONS, ModelConfig, build_model, collate, materialize
from .rfg import ABLATION_COMBOS, normalize_combo
from .separator import WIDTH_SCALES, parse_width_scale
from .trainer import (CheckpointMismatchError, TrainConfig, corpus_class_weights, fit, grad_check,
                      load_checkpoint, save_checkpoint, save_log, set_deterministic)

log = logging.getLogger("rasd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4
DEFAULT_DATA_DIR = "rasd_data"

DEFAULTS = {
    "seed": 0,
    "data_dir": None,
    "out_dir": None,
    "force": False,
    "synth": {
        "n_train": 200,
        "n_val": 50,
        "noise_per_family": 25,
        "val_noise_fraction": 0.2,
        "noise_duration_s": 3.0,
        # marginal share of all scenes that carry inherent noise
        "inherent_noise_rate": 0.0,
        "scene": {k: v for k, v in vars(SceneConfig()).items() if k != "p_inherent"},
    },
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "model")},
    "model": TrainConfig().to_dict()["model"],
    "eval": {"checkpoint": None, "batch_size": 8, "with_snr": True},
    "gradcheck": {"eps": 1e-6, "n_coords": 200, "n_scenes": 2, "duration_s": 1.0,
                  "tolerance": GRADCHECK_TOLERANCE},
    "ablate": {"steps": 200, "include_modes": ["baseline", "cascade"]},
}


class UsageError(ValueError):
    """Bad configuration or flags (exit code 2)."""


class VerificationFailure(RuntimeError):
    """A verification command found a violation (exit code 4)."""


# ---------------------------------------------------------------- config resolution

def merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[k] = merge_strict(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    data.pop("command", None)
    return data


def resolve(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = merge_strict(cfg, load_config_file(args.config))
    flags = {
        "seed": args.seed,
        "data_dir": args.data_dir,
        "out_dir": args.out,
    }
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    if args.force:
        cfg["force"] = True
    if cfg["data_dir"] is None:
        cfg["data_dir"] = os.environ.get("RASD_DATA_DIR", DEFAULT_DATA_DIR)
    m, t = cfg["model"], cfg["train"]
    if args.width_scale is not None:
        m["width_scale"] = args.width_scale
    if args.fm_combo is not None:
        m["combo"] = args.fm_combo
    if args.fixed_weight is not None:
        m["fixed_weight"] = args.fixed_weight
    if args.input_compression is not None:
        m["input_compression"] = args.input_compression
    if args.lambdas is not None:
        t["lambdas"] = list(args.lambdas)
    if args.deterministic:
        t["deterministic"] = True
    for key in ("steps", "epochs", "lr", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            t["max_steps" if key == "steps" else key] = v
    if getattr(args, "inherent_noise_rate", None) is not None:
        cfg["synth"]["inherent_noise_rate"] = args.inherent_noise_rate
    for key in ("n_train", "n_val", "noise_per_family"):
        v = getattr(args, key, None)
        if v is not None:
            cfg["synth"][key] = v
    if getattr(args, "checkpoint", None) is not None:
        cfg["eval"]["checkpoint"] = args.checkpoint
    if getattr(args, "ablate_steps", None) is not None:
        cfg["ablate"]["steps"] = args.ablate_steps
    if cfg["out_dir"] is None:
        cfg["out_dir"] = str(Path("runs") / args.command)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        parse_width_scale(cfg["model"]["width_scale"])
        cfg["model"]["combo"] = list(normalize_combo(cfg["model"]["combo"]))
        scene_config(cfg).validate()
        train_config(cfg).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def scene_config(cfg: dict) -> SceneConfig:
    s = cfg["synth"]
    scene = SceneConfig(**s["scene"])
    rate = float(s["inherent_noise_rate"])
    voiced = 1.0 - scene.p_silent
    if not 0.0 <= rate <= voiced:
        raise UsageError(f"inherent noise rate must lie in [0, {voiced}] (the voiced share), got {rate}")
    scene.p_inherent = rate / voiced if voiced > 0 else 0.0
    return scene


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["lambdas"] = tuple(t["lambdas"])
    model = ModelConfig(**{**cfg["model"], "combo": tuple(cfg["model"]["combo"])})
    return TrainConfig(seed=int(cfg["seed"]), model=model, **t)


def prepare_out_dir(path, force: bool, marker: str | None = None) -> Path:
    out = Path(path)
    probe = out / marker if marker else out
    occupied = probe.exists() if marker else (out.exists() and any(out.iterdir()))
    if occupied and not force:
        raise UsageError(f"output {out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def snapshot(cfg: dict, out: Path, command: str):
    (out / "resolved_config.json").write_text(
        json.dumps({"command": command, **cfg}, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------- commands

def label_histogram(scenes) -> dict:
    counts = {k: 0 for k in NOISE_LABELS}
    for s in scenes:
        counts[s.noise_label] += 1
    return counts


def cmd_synth_data(cfg: dict) -> int:
    s = cfg["synth"]
    out = prepare_out_dir(cfg["data_dir"], cfg["force"], marker="manifest_train.jsonl")
    corpus = build_corpus(cfg["seed"], s["n_train"], s["n_val"], scene_config(cfg),
                          s["noise_per_family"], s["val_noise_fraction"], s["noise_duration_s"])
    write_corpus(corpus, out)
    write_grid(out / "eval_grid.jsonl", build_eval_grid(corpus, cfg["seed"]), cfg["seed"])
    snapshot(cfg, out, "synth-data")
    hist = label_histogram(corpus.train + corpus.val)
    log.info("wrote %d train / %d val scenes, %d noise clips to %s; labels %s",
             len(corpus.train), len(corpus.val), len(corpus.noise_train) + len(corpus.noise_val), out, hist)
    print(json.dumps({"data_dir": str(out), "label_histogram": hist}, sort_keys=True))
    return EXIT_OK


def _load_data(cfg: dict):
    return load_corpus(cfg["data_dir"], seed=cfg["seed"])


def _eval_grid(cfg: dict, corpus):
    path = Path(cfg["data_dir"]) / "eval_grid.jsonl"
    if path.exists():
        grid, _ = read_grid(path)
        return grid
    return build_eval_grid(corpus, cfg["seed"])


def run_training(cfg: dict, corpus, out: Path, tag: str = ""):
    tcfg = train_config(cfg)

    def on_epoch(state):
        last = state.log[-1] if state.log else {}
        traj = state.weight_trajectory[-1] if state.weight_trajectory else {}
        log.info("%sepoch %d step %d losses %s weights %s", tag, state.epoch - 1, state.step,
                 {k: round(last.get(k, float("nan")), 5) for k in ("l_asd", "l_ss", "l_w", "total")},
                 traj)

    state = fit(tcfg, corpus, on_epoch=on_epoch)
    save_checkpoint(state, out / "checkpoint.rasd")
    save_log(state, out / "loss_log.jsonl")
    (out / "weight_trajectory.json").write_text(json.dumps(state.weight_trajectory, indent=2) + "\n")
    return state


def cmd_train(cfg: dict) -> int:
    corpus = _load_data(cfg)
    out = prepare_out_dir(cfg["out_dir"], cfg["force"])
    snapshot(cfg, out, "train")
    state = run_training(cfg, corpus, out)
    print(json.dumps({"checkpoint": str(out / "checkpoint.rasd"), "steps": state.step,
                      "final": state.log[-1] if state.log else None}, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    corpus = _load_data(cfg)
    out = prepare_out_dir(cfg["out_dir"], cfg["force"])
    snapshot(cfg, out, "eval")
    ckpt = cfg["eval"]["checkpoint"]
    if ckpt:
        state = load_checkpoint(ckpt, expect_width_scale=cfg["model"]["width_scale"])
        model, cls_w, traj = state.model, state.class_weights, state.weight_trajectory
        model_cfg = state.cfg.to_dict()
    else:
        tcfg = train_config(cfg)
        set_deterministic(tcfg.deterministic)
        model = build_model(tcfg.model, tcfg.seed)
        cls_w, traj, model_cfg = corpus_class_weights(corpus), [], tcfg.to_dict()
    records = []
    report = evalkit.sweep_alpha(model, corpus, _eval_grid(cfg, corpus), cls_w,
                                 batch_size=cfg["eval"]["batch_size"], with_snr=cfg["eval"]["with_snr"],
                                 label=model_cfg["model"]["mode"], cfg=model_cfg, records=records)
    report.weight_trajectory = traj
    evalkit.emit_report(report, out / "report")
    evalkit.write_results(records, out / "results.jsonl")
    print(json.dumps({"average_ap": report.average_ap,
                      "ap": {k: v["ap"] for k, v in report.per_alpha.items()}}, sort_keys=True))
    return EXIT_OK


def gradcheck_batch(cfg: dict, dtype=torch.float64):
    g = cfg["gradcheck"]
    scene_cfg = scene_config(cfg)
    scene_cfg.duration_s = g["duration_s"]
    scene_cfg.p_silent = 0.0
    scene_cfg.p_inherent = 0.5
    corpus = build_corpus(cfg["seed"], g["n_scenes"], 0, scene_cfg, noise_per_family=1, val_noise_fraction=0.0,
                          noise_duration_s=g["duration_s"])
    items = [materialize(corpus, MixSpec(s.id, corpus.noise_train[i].id, 0.5, "train"))
             for i, s in enumerate(corpus.train)]
    return collate(items, np.ones(3), dtype)


def weigher_separation_grad(model, batch, lambdas) -> float:
    """Largest |d L_SS / d theta| over weight-generator parameters."""
    if model.weigher is None:
        return 0.0
    model.zero_grad(set_to_none=True)
    out = model(batch)
    model.losses(batch, out, lambdas).l_ss.backward()
    worst = max((float(p.grad.abs().max()) for p in model.weigher.parameters() if p.grad is not None),
                default=0.0)
    model.zero_grad(set_to_none=True)
    return worst


def cmd_gradcheck(cfg: dict) -> int:
    out = prepare_out_dir(cfg["out_dir"], cfg["force"])
    snapshot(cfg, out, "gradcheck")
    tcfg = train_config(cfg)
    tcfg.precision = "float64"
    set_deterministic(True)
    model = build_model(tcfg.model, tcfg.seed, torch.float64)
    batch = gradcheck_batch(cfg)
    g = cfg["gradcheck"]
    report = grad_check(model, batch, eps=g["eps"], n_coords=g["n_coords"], seed=tcfg.seed,
                        lambdas=tcfg.lambdas)
    report["weigher_grad_from_separation_loss"] = weigher_separation_grad(model, batch, tcfg.lambdas)
    (out / "gradcheck.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report, sort_keys=True))
    failed = report["max_rel_error"] >= g["tolerance"]
    if model.cfg.weight_coupling == "detach":
        failed |= report["weigher_grad_from_separation_loss"] != 0.0
    if failed:
        raise VerificationFailure(f"gradient check failed: max relative error {report['max_rel_error']:.3g}")
    return EXIT_OK


def ablation_runs(cfg: dict) -> list:
    runs = [("rfg_" + "+".join(c), {"mode": "rfg", "combo": list(c)}) for c in ABLATION_COMBOS]
    for mode in cfg["ablate"]["include_modes"]:
        runs.append((mode, {"mode": mode}))
    return runs


def cmd_ablate(cfg: dict) -> int:
    corpus = _load_data(cfg)
    out = prepare_out_dir(cfg["out_dir"], cfg["force"])
    snapshot(cfg, out, "ablate")
    grid = _eval_grid(cfg, corpus)
    summary = {}
    for name, overrides in ablation_runs(cfg):
        run_cfg = copy.deepcopy(cfg)
        run_cfg["model"].update(overrides)
        run_cfg["train"]["max_steps"] = cfg["ablate"]["steps"]
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        snapshot(run_cfg, run_dir, "train")
        state = run_training(run_cfg, corpus, run_dir, tag=f"[{name}] ")
        report = evalkit.sweep_alpha(state.model, corpus, grid, state.class_weights,
                                     batch_size=cfg["eval"]["batch_size"], with_snr=False, label=name,
                                     cfg=state.cfg.to_dict())
        report.weight_trajectory = state.weight_trajectory
        evalkit.emit_report(report, out / f"report_{name}")
        summary[name] = {"average_ap": report.average_ap,
                         "ap": {k: v["ap"] for k, v in report.per_alpha.items()}}
        log.info("%s average AP %.4f", name, report.average_ap)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


# ---------------------------------------------------------------- argument parsing

def _width(value: str) -> str:
    try:
        parse_width_scale(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (same layout as resolved_config.json)")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir", help="data root (default: $RASD_DATA_DIR or ./rasd_data)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--width-scale", type=_width,
                        help="network width: " + ", ".join(str(w) for w in WIDTH_SCALES))
    common.add_argument("--lambda", dest="lambdas", type=float, nargs=3, metavar=("ASD", "SS", "W"),
                        help=f"loss weights (default {' '.join(map(str, DEFAULT_LAMBDAS))})")
    common.add_argument("--fm-combo", help="comma-separated decoder maps, e.g. FM3,FM5")
    common.add_argument("--fixed-weight", type=float,
                        help="replace the weight generator by a constant weight on noisy frames")
    common.add_argument("--input-compression", choices=COMPRESSIONS,
                        help="network input: log1p-compressed magnitude (log, default) or raw magnitude (none)")
    common.add_argument("-v", "--verbose", action="store_true")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    train_flags.add_argument("--epochs", type=int)
    train_flags.add_argument("--lr", type=float)
    train_flags.add_argument("--batch-size", type=int)

    parser = _Parser(prog="rasd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--inherent-noise-rate", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--noise-per-family", type=int)
    sub.add_parser("train", parents=[common, train_flags], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="alpha sweep on the frozen eval grid")
    p.add_argument("--checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p = sub.add_parser("ablate", parents=[common, train_flags],
                       help="feature-map combinations plus baseline and cascade")
    p.add_argument("--ablate-steps", type=int)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, parse errors exit 2; hand the code back instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, CheckpointMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, StateError, IntegrityError, VersionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
