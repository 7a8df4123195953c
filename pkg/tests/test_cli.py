import json

import pytest

from rasd import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth-data", "--data-dir", root, "--seed", 1, "--n-train", 6, "--n-val", 10,
               "--noise-per-family", 2) == 0
    return root


def test_synth_data_outputs_and_refusal(data, capsys):
    for name in ("manifest_train.jsonl", "manifest_val.jsonl", "noise_train.jsonl", "eval_grid.jsonl",
                 "resolved_config.json"):
        assert (data / name).exists(), name
    assert run("synth-data", "--data-dir", data) == cli.EXIT_CONFIG
    assert "--force" in capsys.readouterr().err


def test_defaults_match_documented_sizes():
    assert (cli.DEFAULTS["synth"]["n_train"], cli.DEFAULTS["synth"]["n_val"],
            cli.DEFAULTS["synth"]["noise_per_family"]) == (200, 50, 25)
    assert tuple(cli.DEFAULTS["train"]["lambdas"]) == (0.1, 1.0, 0.1)


def test_synth_data_same_seed_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth-data", "--data-dir", tmp_path / d, "--n-train", 3, "--n-val", 2,
                   "--noise-per-family", 1) == 0
    for name in ("manifest_train.jsonl", "manifest_val.jsonl", "eval_grid.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_inherent_noise_rate_histogram(tmp_path, capsys):
    assert run("synth-data", "--data-dir", tmp_path, "--inherent-noise-rate", 0.5, "--n-train", 300,
               "--n-val", 100, "--noise-per-family", 1) == 0
    hist = json.loads(capsys.readouterr().out)["label_histogram"]
    total = sum(hist.values())
    assert hist["clean_speech"] / total == pytest.approx(0.25, abs=0.05)
    assert hist["speech_with_noise"] / total == pytest.approx(0.50, abs=0.05)
    assert hist["no_speech"] / total == pytest.approx(0.25, abs=0.05)


def test_inherent_noise_rate_out_of_range(tmp_path):
    assert run("synth-data", "--data-dir", tmp_path, "--inherent-noise-rate", 0.9) == cli.EXIT_CONFIG


def test_unknown_config_key_is_config_error(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    assert run("train", "--config", cfg, "--data-dir", data, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_bad_flags_are_config_errors(tmp_path, data):
    assert run("train", "--width-scale", "1/3", "--data-dir", data) == cli.EXIT_CONFIG
    assert run("train", "--fm-combo", "FM9", "--data-dir", data, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert run("nonsense") == cli.EXIT_CONFIG


def test_missing_manifests_is_data_error(tmp_path, capsys):
    assert run("train", "--data-dir", tmp_path / "empty", "--out", tmp_path / "o") == cli.EXIT_DATA
    assert "synth-data" in capsys.readouterr().err


def test_data_dir_from_environment(tmp_path, data, monkeypatch):
    monkeypatch.setenv("RASD_DATA_DIR", str(data))
    assert run("train", "--steps", 1, "--out", tmp_path / "t") == 0


def test_train_logs_and_snapshot_rerun(tmp_path, data, capsys):
    out = tmp_path / "t"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 2, "--batch-size", 2,
               "--lambda", 0.1, 1, 0.1, "--deterministic") == 0
    rows = [json.loads(line) for line in (out / "loss_log.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and all({"l_asd", "l_ss", "l_w", "total"} <= set(r) for r in rows)
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["command"] == "train" and snap["train"]["lambdas"] == [0.1, 1.0, 0.1]
    assert (out / "weight_trajectory.json").exists() and (out / "checkpoint.rasd").exists()
    # existing outputs are refused without --force
    assert run("train", "--data-dir", data, "--out", out, "--steps", 2) == cli.EXIT_CONFIG
    capsys.readouterr()
    # the snapshot alone reproduces the run
    again = tmp_path / "again"
    assert run("train", "--config", out / "resolved_config.json", "--out", again) == 0
    assert (again / "loss_log.jsonl").read_bytes() == (out / "loss_log.jsonl").read_bytes()
    assert (again / "checkpoint.rasd").read_bytes() == (out / "checkpoint.rasd").read_bytes()
    assert run("train", "--config", out / "resolved_config.json", "--out", again, "--force") == 0


def test_fixed_weight_mode(tmp_path, data):
    out = tmp_path / "fw"
    assert run("train", "--data-dir", data, "--out", out, "--steps", 1, "--fixed-weight", 0.85) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["model"]["fixed_weight"] == 0.85
    assert run("train", "--data-dir", data, "--out", tmp_path / "bad", "--fixed-weight", 1.5) == cli.EXIT_CONFIG


def test_eval_untrained_near_positive_rate(tmp_path, data):
    out = tmp_path / "e"
    assert run("eval", "--data-dir", data, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    records = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
    pos_rate = sum(r["label"] for r in records) / len(records)
    for alpha, entry in report["per_alpha"].items():
        assert entry["ap"] == pytest.approx(pos_rate, abs=0.1), alpha


def test_eval_checkpoint_width_mismatch(tmp_path, data):
    assert run("train", "--data-dir", data, "--out", tmp_path / "t", "--steps", 1) == 0
    assert run("eval", "--data-dir", data, "--out", tmp_path / "e", "--checkpoint",
               tmp_path / "t" / "checkpoint.rasd", "--width-scale", "1/4") == cli.EXIT_CONFIG
    assert run("eval", "--data-dir", data, "--out", tmp_path / "e2", "--checkpoint",
               tmp_path / "missing.rasd") == cli.EXIT_DATA


def test_gradcheck_exit_codes(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"gradcheck": {"n_coords": 3}}))
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "ok") == 0
    report = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert report["max_rel_error"] < 1e-4 and report["weigher_grad_from_separation_loss"] == 0.0
    cfg.write_text(json.dumps({"gradcheck": {"n_coords": 3, "tolerance": 0.0}}))
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "strict") == cli.EXIT_VERIFY


def test_ablate_emits_one_report_per_combo(tmp_path, data):
    out = tmp_path / "ab"
    cfg = tmp_path / "a.json"
    cfg.write_text(json.dumps({"ablate": {"steps": 1, "include_modes": ["baseline", "cascade"]},
                               "eval": {"batch_size": 16}}))
    assert run("ablate", "--config", cfg, "--data-dir", data, "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    combos = [k for k in summary if k.startswith("rfg_")]
    assert len(combos) == 6 and {"baseline", "cascade"} <= set(summary)
    for name in summary:
        assert (out / f"report_{name}.json").exists()
