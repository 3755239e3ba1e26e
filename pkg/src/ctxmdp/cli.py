"""Command-line runner: data generation, model fitting, distillation,
model evaluation, control evaluation, and the full closed-loop
experiment.

Every subcommand takes `--config <path>` (flat key=value file),
`--seed`, `--out`, `--prior`, `--epsilon` overrides.  Runs echo their
configuration into the output directory, write JSONL/CSV artifacts, and
exit 0 on success or nonzero with an error manifest (error.json).
Timing is kept out of metrics.jsonl so repeated seeded runs are
byte-identical; wall-clock lives in train_log.jsonl only.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .belief import decode_accuracy, decode_contexts, filter_trajectory, write_belief_trace_csv
from .chain import DistillResult, distill, save_chain_csv
from .config import ConfigError, ExperimentConfig, config_to_text, load_config
from .control import (
    BeliefMpcAgent,
    CemConfig,
    OracleMpcAgent,
    PlannerModel,
    RandomAgent,
    evaluate,
    true_model,
)
from .envs import make_env, rollout
from .inference import (
    TrainConfig,
    VariationalParams,
    extract_chain,
    fit,
    load_checkpoint,
    message_pass,
    save_checkpoint,
)
from .prior import HdpHyper
from .trajectory import Trajectory, load_dataset, save_dataset


# ---------------------------------------------------------------------------
# config plumbing


def _effective_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "prior", None) is not None:
        overrides["prior"] = args.prior
    if getattr(args, "epsilon", None) is not None:
        overrides["epsilon_train"] = args.epsilon
        overrides["epsilon_test"] = args.epsilon
    return dc_replace(cfg, **overrides) if overrides else cfg


def _echo_config(cfg: ExperimentConfig, args, out: Path) -> None:
    if args.config:
        out.joinpath("config.txt").write_bytes(Path(args.config).read_bytes())
    else:
        out.joinpath("config.txt").write_text(config_to_text(cfg))


def _build_env(cfg: ExperimentConfig):
    return make_env(
        cfg.env,
        cooloff=cfg.cooloff,
        mode=cfg.context_mode,
        stay_prob=cfg.stay_prob,
        chi=cfg.chi,
        horizon=cfg.env_horizon,
    )


def _build_hyper(cfg: ExperimentConfig) -> HdpHyper:
    return HdpHyper(
        K=cfg.k_trunc,
        gamma=cfg.gamma,
        alpha=cfg.alpha,
        kappa=cfg.kappa,
        theta_prior_std=cfg.theta_prior_std,
    )


def _build_train_config(cfg: ExperimentConfig, epochs: int, seed: int) -> TrainConfig:
    return TrainConfig(
        kind=cfg.prior,
        epochs=epochs,
        batch_size=cfg.batch_size,
        lr_theta=cfg.lr_theta,
        lr_mu=cfg.lr_mu,
        lr_nu=cfg.lr_nu,
        clip_norm=cfg.clip_norm,
        n_mu_samples=cfg.n_mu_samples,
        distill_every=cfg.distill_every or None,
        epsilon_train=cfg.epsilon_train,
        hidden_sizes=cfg.hidden,
        log_std_init=cfg.log_std_init,
        seed=seed,
    )


def _build_cem(cfg: ExperimentConfig) -> CemConfig:
    return CemConfig(
        horizon=cfg.cem_horizon,
        n_pops=cfg.cem_pops,
        n_elite=cfg.cem_elite,
        n_traces=cfg.cem_traces,
        n_iters=cfg.cem_iters,
        lr=cfg.cem_lr,
        init_std=cfg.cem_init_std,
        discount=cfg.cem_discount,
    )


def _rng_pair(*entropy: int):
    ss = np.random.SeedSequence(entropy=tuple(int(x) for x in entropy))
    a, b = ss.spawn(2)
    return (
        np.random.Generator(np.random.Philox(a)),
        np.random.Generator(np.random.Philox(b)),
    )


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _strip_timing(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def _dataset_path(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.dataset) if cfg.dataset else out / "dataset.jsonl"


def _model_base(cfg: ExperimentConfig, out: Path) -> str:
    return cfg.model if cfg.model else str(out / "model")


def _distilled_model(
    vp: VariationalParams, env, epsilon: float
) -> tuple[PlannerModel, DistillResult]:
    full = extract_chain(vp)
    res = distill(full, epsilon, mode="mpc")
    thetas = [vp.thetas[k] for k in res.kept]
    model = PlannerModel(
        chain=res.chain,
        thetas=thetas,
        reward_fn=env.reward_batch,
        action_limit=env.action_limit,
    )
    return model, res


def _warm_dataset(cfg: ExperimentConfig, env, n: int) -> list[Trajectory]:
    agent = RandomAgent(env.action_dim, env.action_limit)
    out = []
    for i in range(n):
        env_rng, agent_rng = _rng_pair(cfg.seed, 101, i)
        out.append(rollout(env, agent, env_rng, agent_rng, seed_label=cfg.seed))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args, out)
    env = _build_env(cfg)
    dataset = _warm_dataset(cfg, env, cfg.n_warm)
    path = _dataset_path(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, str(path))
    print(f"wrote {len(dataset)} trajectories to {path}")
    return {"dataset": str(path)}


def cmd_fit(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args, out)
    dataset = load_dataset(str(_dataset_path(cfg, out)))
    hyper = _build_hyper(cfg)
    tc = _build_train_config(cfg, cfg.model_epochs_warm, cfg.seed)
    vp, log = fit(dataset, hyper, tc)
    base = _model_base(cfg, out)
    save_checkpoint(vp, base)
    _write_jsonl(out / "train_log.jsonl", log)
    _write_jsonl(out / "metrics.jsonl", _strip_timing(log))
    save_chain_csv(extract_chain(vp), str(out / "chain.csv"))
    final = [r for r in log if "elbo" in r][-1]
    print(
        f"fit {cfg.prior}: {len(log)} epochs, final elbo {final['elbo']:.4f}, "
        f"active contexts {final['active_contexts']}"
    )
    return {"model": base, "chain": str(out / "chain.csv")}


def cmd_distill(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args, out)
    vp = load_checkpoint(_model_base(cfg, out))
    full = extract_chain(vp)
    res = distill(full, cfg.epsilon_test, mode="mpc")
    save_chain_csv(res.chain, str(out / "chain.csv"))
    manifest = {
        "epsilon": cfg.epsilon_test,
        "kept": [int(k) for k in res.kept],
        "removed": [int(k) for k in res.removed],
        "stationary_full": [float(x) for x in res.stationary],
    }
    with open(out / "distill.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    print(
        f"distilled {full.n_contexts} -> {len(res.kept)} contexts "
        f"at epsilon {cfg.epsilon_test}"
    )
    return {"chain": str(out / "chain.csv"), "manifest": str(out / "distill.json")}


def cmd_eval_model(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args, out)
    vp = load_checkpoint(_model_base(cfg, out))
    dataset = load_dataset(str(_dataset_path(cfg, out)))
    if not dataset:
        raise ValueError("empty dataset")
    env = _build_env(cfg)
    model, res = _distilled_model(vp, env, cfg.epsilon_test)

    metrics, zrows = [], []
    for i, traj in enumerate(dataset):
        table = message_pass(model.chain, model.thetas, traj)
        decoded = np.argmax(table.marginals, axis=1)
        rec = {"traj": i, "log_evidence": float(table.log_evidence)}
        if traj.true_z is not None:
            rec["decode_accuracy"] = decode_accuracy(
                decoded, traj.true_z, model.chain.n_contexts
            )
            for t in range(traj.T):
                zrows.append((i, t, int(traj.true_z[t]), int(decoded[t])))
        else:
            for t in range(traj.T):
                zrows.append((i, t, "", int(decoded[t])))
        metrics.append(rec)
    _write_jsonl(out / "metrics.jsonl", metrics)

    with open(out / "zseq.csv", "w") as fh:
        fh.write("traj,t,true_z,decoded_z\n")
        for row in zrows:
            fh.write(",".join(str(v) for v in row) + "\n")

    first = dataset[0]
    beliefs = filter_trajectory(model.chain, model.thetas, first)
    write_belief_trace_csv(
        out / "beliefs.csv", beliefs, np.argmax(beliefs, axis=1), first.true_z
    )
    accs = [m["decode_accuracy"] for m in metrics if "decode_accuracy" in m]
    msg = f"evaluated {len(dataset)} trajectories"
    if accs:
        msg += f", mean decode accuracy {float(np.mean(accs)):.3f}"
    print(msg)
    return {
        "metrics": str(out / "metrics.jsonl"),
        "beliefs": str(out / "beliefs.csv"),
        "zseq": str(out / "zseq.csv"),
    }


def cmd_control(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args, out)
    env = _build_env(cfg)
    cem = _build_cem(cfg)

    agents: list[tuple[str, object]] = []
    if cfg.model:
        vp = load_checkpoint(cfg.model)
        model, _ = _distilled_model(vp, env, cfg.epsilon_test)
        agents.append(
            ("belief_mpc", BeliefMpcAgent(model, cem, replan_every=cfg.replan_every))
        )
    else:
        # no learned model: plan against the exact dynamics when exposed
        model = true_model(env)
        agents.append(
            ("belief_mpc", BeliefMpcAgent(model, cem, replan_every=cfg.replan_every))
        )
        agents.append(
            ("oracle_mpc", OracleMpcAgent(model, cem, replan_every=cfg.replan_every))
        )
    agents.append(("random", RandomAgent(env.action_dim, env.action_limit)))

    records, summary = [], []
    for name, agent in agents:
        result = evaluate(agent, env, cfg.eval_episodes, cfg.seed, agent_name=name)
        records.extend(result.to_records())
        line = {
            "agent": name,
            "episodes": cfg.eval_episodes,
            "mean_return": result.mean,
            "std_return": result.std,
        }
        if result.misidentified is not None:
            line["mean_misidentified"] = float(np.mean(result.misidentified))
        summary.append(line)
        print(f"{name}: mean return {result.mean:.3f} +- {result.std:.3f}")
    _write_jsonl(out / "returns.jsonl", records)
    _write_jsonl(out / "metrics.jsonl", summary)
    return {"returns": str(out / "returns.jsonl"), "metrics": str(out / "metrics.jsonl")}


def run_experiment(cfg: ExperimentConfig, args=None) -> dict:
    """Closed-loop pipeline: warm-start data from a random agent, fit the
    switching model, then alternate planner-driven data collection,
    refitting, distillation, and evaluation."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args is not None:
        _echo_config(cfg, args, out)
    else:
        out.joinpath("config.txt").write_text(config_to_text(cfg))
    env = _build_env(cfg)
    hyper = _build_hyper(cfg)
    cem = _build_cem(cfg)

    dataset = _warm_dataset(cfg, env, cfg.n_warm)
    dataset_file = out / "dataset.jsonl"
    save_dataset(dataset, str(dataset_file))

    tc = _build_train_config(cfg, cfg.model_epochs_warm, cfg.seed)
    vp, train_log = fit(dataset, hyper, tc)
    model, res = _distilled_model(vp, env, cfg.epsilon_test)
    save_chain_csv(model.chain, str(out / "chain.csv"))

    metrics: list[dict] = []
    final_eval_records: list[dict] = []
    for epoch in range(1, cfg.n_epochs + 1):
        if cfg.n_traj > 0:
            agent = BeliefMpcAgent(model, cem, replan_every=cfg.replan_every)
            for i in range(cfg.n_traj):
                env_rng, agent_rng = _rng_pair(cfg.seed, 300 + epoch, i)
                dataset.append(
                    rollout(env, agent, env_rng, agent_rng, seed_label=cfg.seed)
                )
            save_dataset(dataset, str(dataset_file))

        tc_e = _build_train_config(cfg, cfg.model_epochs, cfg.seed + 1000 * epoch)
        vp, log_e = fit(dataset, hyper, tc_e, init_vp=vp)
        train_log.extend(log_e)
        model, res = _distilled_model(vp, env, cfg.epsilon_test)
        save_chain_csv(model.chain, str(out / "chain.csv"))

        eval_seed = cfg.seed * 100003 + epoch
        belief_agent = BeliefMpcAgent(model, cem, replan_every=cfg.replan_every)
        r_belief = evaluate(
            belief_agent, env, cfg.eval_episodes, eval_seed, agent_name="belief_mpc"
        )
        r_random = evaluate(
            RandomAgent(env.action_dim, env.action_limit),
            env,
            cfg.eval_episodes,
            eval_seed,
            agent_name="random",
        )
        if epoch == cfg.n_epochs:
            final_eval_records = r_belief.to_records() + r_random.to_records()

        trained = [r for r in log_e if "elbo" in r]
        metrics.append(
            {
                "epoch": epoch,
                "elbo": float(trained[-1]["elbo"]) if trained else None,
                "active_contexts": int(trained[-1]["active_contexts"])
                if trained
                else int(vp.active.sum()),
                "distilled_contexts": len(res.kept),
                "dataset_trajectories": len(dataset),
                "mean_return_belief": r_belief.mean,
                "std_return_belief": r_belief.std,
                "mean_return_random": r_random.mean,
                "mean_misidentified": float(np.mean(r_belief.misidentified)),
            }
        )
        print(
            f"epoch {epoch}: contexts {len(res.kept)}, "
            f"belief return {r_belief.mean:.3f}, random {r_random.mean:.3f}"
        )

    base = str(out / "model")
    save_checkpoint(vp, base)
    _write_jsonl(out / "train_log.jsonl", train_log)
    _write_jsonl(out / "metrics.jsonl", metrics)
    _write_jsonl(out / "returns.jsonl", final_eval_records)

    # belief trace of one fresh closed-loop episode under the final model
    trace_agent = BeliefMpcAgent(model, cem, replan_every=cfg.replan_every)
    env_rng, agent_rng = _rng_pair(cfg.seed, 900)
    traj = rollout(env, trace_agent, env_rng, agent_rng, seed_label=cfg.seed)
    beliefs = filter_trajectory(model.chain, model.thetas, traj)
    write_belief_trace_csv(
        out / "beliefs.csv", beliefs, np.argmax(beliefs, axis=1), traj.true_z
    )
    decoded = decode_contexts(model.chain, model.thetas, traj)
    with open(out / "zseq.csv", "w") as fh:
        fh.write("traj,t,true_z,decoded_z\n")
        for t in range(traj.T):
            fh.write(f"0,{t},{int(traj.true_z[t])},{int(decoded[t])}\n")

    return {
        "chain": str(out / "chain.csv"),
        "beliefs": str(out / "beliefs.csv"),
        "zseq": str(out / "zseq.csv"),
        "metrics": str(out / "metrics.jsonl"),
        "returns": str(out / "returns.jsonl"),
        "model": base,
    }


def cmd_experiment(cfg: ExperimentConfig, args) -> dict:
    return run_experiment(cfg, args)


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "distill": cmd_distill,
    "eval-model": cmd_eval_model,
    "control": cmd_control,
    "experiment": cmd_experiment,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxmdp",
        description="Switching-dynamics model learning, belief filtering, "
        "and belief-aware MPC.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate a random-agent trajectory dataset",
        "fit": "fit the switching dynamics model on a dataset",
        "distill": "remove low-occupancy contexts from a fitted model",
        "eval-model": "decode contexts and score a fitted model on a dataset",
        "control": "evaluate planning agents in closed loop",
        "experiment": "full loop: collect, fit, distill, control, evaluate",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=str, default=None, help="flat key=value file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument(
            "--prior",
            choices=("hdp", "dirichlet", "mle"),
            default=None,
            help="prior kind override",
        )
        p.add_argument(
            "--epsilon", type=float, default=None, help="distillation threshold"
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
    except (ConfigError, OSError) as exc:
        print(json.dumps({"error": str(exc), "stage": "config"}), file=sys.stderr)
        return 2
    try:
        _COMMANDS[args.command](cfg, args)
        return 0
    except Exception as exc:  # noqa: BLE001 - manifest + nonzero exit by contract
        manifest = {
            "error": str(exc),
            "type": type(exc).__name__,
            "command": args.command,
        }
        try:
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "error.json", "w") as fh:
                json.dump(manifest, fh, sort_keys=True, indent=2)
        except OSError:
            pass
        print(json.dumps(manifest), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
