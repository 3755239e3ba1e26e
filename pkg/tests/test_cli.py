"""Config file handling and the command-line pipeline, run in-process
through main()."""

import json
import math

import numpy as np
import pytest

from ctxmdp.chain import load_chain_csv
from ctxmdp.cli import main
from ctxmdp.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_text,
    load_config,
    parse_config_text,
)
from ctxmdp.inference import load_checkpoint
from ctxmdp.trajectory import load_dataset


# ---------------------------------------------------------------------------
# config files


def test_parse_config_text_basics():
    raw = parse_config_text(
        "# comment\n\nenv = switching_linear\n  seed=4  \nchi = 1.0, -1.0\n"
    )
    assert raw == {"env": "switching_linear", "seed": "4", "chi": "1.0, -1.0"}


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("seed 4", "expected key = value"),
        ("= 4", "empty key"),
        ("seed = 1\nseed = 2", "duplicate key"),
    ],
)
def test_parse_config_text_errors_name_the_line(text, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert fragment in str(err.value)


def test_config_from_dict_types_and_unknown_keys():
    cfg = config_from_dict(
        {"seed": "9", "alpha": "12.5", "chi": "1,-1,0.5", "hidden": "16,16",
         "prior": "dirichlet"}
    )
    assert cfg.seed == 9
    assert cfg.alpha == 12.5
    assert cfg.chi == (1.0, -1.0, 0.5)
    assert cfg.hidden == (16, 16)
    assert cfg.prior == "dirichlet"
    with pytest.raises(ConfigError):
        config_from_dict({"pior": "hdp"})
    with pytest.raises(ConfigError):
        config_from_dict({"prior": "flat"})
    with pytest.raises(ConfigError):
        config_from_dict({"k_trunc": "0"})


def test_config_text_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=3, chi=(2.0, -0.5), hidden=(8,), alpha=17.0)
    path = tmp_path / "cfg.txt"
    path.write_text(config_to_text(cfg))
    assert load_config(str(path)) == cfg


def test_default_log_std_init_matches_declared_noise_scale():
    assert ExperimentConfig().log_std_init == pytest.approx(math.log(0.1))


# ---------------------------------------------------------------------------
# the command-line pipeline


def _tiny_config(tmp_path, name="cfg.txt", **extra):
    base = dict(
        env="switching_linear",
        cooloff=3,
        env_horizon=12,
        k_trunc=2,
        prior="hdp",
        alpha=8.0,
        kappa=1.2,
        hidden="8",
        batch_size=4,
        model_epochs_warm=2,
        model_epochs=1,
        n_warm=3,
        n_traj=1,
        n_epochs=1,
        eval_episodes=2,
        cem_horizon=3,
        cem_pops=6,
        cem_elite=2,
        cem_traces=1,
        cem_iters=1,
        seed=0,
    )
    base.update(extra)
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return str(path)


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def test_pipeline_gen_fit_distill_eval_control(tmp_path):
    cfg = _tiny_config(tmp_path)
    out = tmp_path / "run"

    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    dataset = load_dataset(str(out / "dataset.jsonl"))
    assert len(dataset) == 3
    assert dataset[0].states.shape == (13, 2)
    assert dataset[0].true_z is not None
    # the echoed config is a byte-for-byte copy of the input file
    assert (out / "config.txt").read_bytes() == open(cfg, "rb").read()

    assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
    vp = load_checkpoint(str(out / "model"))
    assert vp.K == 2
    chain = load_chain_csv(str(out / "chain.csv"))
    assert np.allclose(chain.R.sum(axis=1), 1.0)
    train_log = _read_jsonl(out / "train_log.jsonl")
    fit_metrics = _read_jsonl(out / "metrics.jsonl")
    assert len(train_log) == 2
    assert all("wall_ms" in rec for rec in train_log)
    assert all("wall_ms" not in rec for rec in fit_metrics)

    assert main(["distill", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "distill.json").read_text())
    assert set(manifest) == {"epsilon", "kept", "removed", "stationary_full"}
    assert manifest["epsilon"] == 0.01
    assert sorted(manifest["kept"] + manifest["removed"]) == [0, 1]

    assert main(["eval-model", "--config", cfg, "--out", str(out)]) == 0
    eval_metrics = _read_jsonl(out / "metrics.jsonl")
    assert len(eval_metrics) == 3
    for rec in eval_metrics:
        assert 0.0 <= rec["decode_accuracy"] <= 1.0
        assert np.isfinite(rec["log_evidence"])
    with open(out / "zseq.csv") as fh:
        header = fh.readline().strip()
        rows = fh.read().splitlines()
    assert header == "traj,t,true_z,decoded_z"
    assert len(rows) == 3 * 12
    with open(out / "beliefs.csv") as fh:
        bh = fh.readline().strip()
    assert bh.startswith("t,b_0") and bh.endswith("decoded_z,true_z")

    assert main(["control", "--config", cfg, "--out", str(out)]) == 0
    returns = _read_jsonl(out / "returns.jsonl")
    agents = {rec["agent"] for rec in returns}
    assert agents == {"belief_mpc", "oracle_mpc", "random"}
    assert len(returns) == 3 * 2
    summary = _read_jsonl(out / "metrics.jsonl")
    assert {rec["agent"] for rec in summary} == agents


def test_control_with_learned_model_skips_oracle(tmp_path):
    out = tmp_path / "run"
    cfg = _tiny_config(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
    cfg2 = _tiny_config(
        tmp_path, name="cfg2.txt", model=str(out / "model"), eval_episodes=1
    )
    assert main(["control", "--config", cfg2, "--out", str(out / "c")]) == 0
    returns = _read_jsonl(out / "c" / "returns.jsonl")
    agents = {rec["agent"] for rec in returns}
    # a learned model has arbitrary labels, so no oracle run is offered
    assert agents == {"belief_mpc", "random"}


def test_experiment_writes_all_artifacts(tmp_path):
    cfg = _tiny_config(tmp_path)
    out = tmp_path / "exp"
    assert main(["experiment", "--config", cfg, "--out", str(out)]) == 0
    metrics = _read_jsonl(out / "metrics.jsonl")
    assert len(metrics) == 1
    rec = metrics[0]
    assert set(rec) == {
        "epoch", "elbo", "active_contexts", "distilled_contexts",
        "dataset_trajectories", "mean_return_belief", "std_return_belief",
        "mean_return_random", "mean_misidentified",
    }
    assert rec["dataset_trajectories"] == 4  # 3 warm + 1 collected
    assert (out / "model.json").exists() and (out / "model.bin").exists()
    load_checkpoint(str(out / "model"))
    returns = _read_jsonl(out / "returns.jsonl")
    assert {r["agent"] for r in returns} == {"belief_mpc", "random"}
    with open(out / "zseq.csv") as fh:
        assert fh.readline().strip() == "traj,t,true_z,decoded_z"
        assert len(fh.read().splitlines()) == 12
    chain = load_chain_csv(str(out / "chain.csv"))
    assert chain.n_contexts >= 1


def test_seeded_runs_are_byte_identical(tmp_path):
    cfg = _tiny_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["experiment", "--config", cfg, "--out", str(out_b)]) == 0
    for name in ("metrics.jsonl", "returns.jsonl", "chain.csv", "beliefs.csv",
                 "zseq.csv"):
        a = (out_a / name).read_bytes()
        b = (out_b / name).read_bytes()
        assert a == b, f"{name} differs between identically seeded runs"


def test_cli_overrides(tmp_path):
    cfg = _tiny_config(tmp_path)
    out = tmp_path / "o"
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
    dataset = load_dataset(str(out / "dataset.jsonl"))
    assert all(t.seed == 7 for t in dataset)
    assert main(["fit", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
    assert (
        main(
            ["distill", "--config", cfg, "--out", str(out), "--epsilon", "0.25"]
        )
        == 0
    )
    manifest = json.loads((out / "distill.json").read_text())
    assert manifest["epsilon"] == 0.25


def test_missing_dataset_gives_error_manifest(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    out = tmp_path / "bad"
    rc = main(["fit", "--config", cfg, "--out", str(out)])
    assert rc == 1
    manifest = json.loads((out / "error.json").read_text())
    assert manifest["command"] == "fit"
    assert manifest["type"] in ("FileNotFoundError", "OSError")
    err = capsys.readouterr().err
    assert json.loads(err.strip())["command"] == "fit"


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key = 1\n")
    rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err
    rc = main(["gen-data", "--config", str(tmp_path / "missing.txt")])
    assert rc == 2


def test_config_echo_without_file_uses_defaults(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--seed", "1"]) == 0
    text = (out / "config.txt").read_text()
    parsed = config_from_dict(parse_config_text(text))
    assert parsed.seed == 1
    assert parsed.env == "switching_linear"
