"""Command-line front end.

Subcommands: collect | train-offline | train-online | eval | verify-theorem
| report. Every run directory gets a manifest written before the heavy work
starts, so each table or curve can be regenerated from recorded configs.

Exit codes: 0 success, 2 invalid config/arguments, 3 I/O or file-format
failure, 4 verified-bound violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_override
from .dataset import DatasetFormatError, OuNoise, ReplayDataset, collect_random
from .env import MultiPendulumEnv
from .models import load_model, save_model
from .nets import SerializationError
from .planning import GroundTruthPendulumModel, mpc_policy
from .theory import (check_bound, identity_latent, offset_latent, perturbed_latent,
                     random_mdp)
from .training import evaluate, train_offline, train_online

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BOUND = 4


class BoundViolation(RuntimeError):
    """The always-valid planning bound failed on some instance."""


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig,
                    outputs: dict[str, str]) -> dict:
    manifest = {
        "command": command,
        "artifact_version": f"rewardplan-{__version__}",
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "outputs": outputs,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished_at": None,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _finish_manifest(out_dir: Path, manifest: dict) -> None:
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_cfg(args) -> ExperimentConfig:
    overrides = [parse_override(item) for item in (args.set or [])]
    if args.seed is not None:
        overrides.append({"output": {"seed": int(args.seed)}})
    if args.out is not None:
        overrides.append({"output": {"dir": args.out}})
    if getattr(args, "pendulums", None) is not None:
        overrides.append({"env": {"n_pendulums": int(args.pendulums)}})
    if getattr(args, "variant", None) is not None:
        overrides.append({"model": {"variant": args.variant}})
    return ExperimentConfig.load(args.config, overrides)


def _check_dataset_compatible(cfg: ExperimentConfig, ds: ReplayDataset) -> None:
    env = cfg.env_config()
    if ds.d_s != env.obs_dim or ds.d_a != 1:
        raise ConfigError(
            f"dataset dims (d_s={ds.d_s}, d_a={ds.d_a}) do not match env "
            f"(obs_dim={env.obs_dim}, action_dim=1)")


def cmd_collect(args) -> int:
    cfg = _load_cfg(args)
    steps = args.steps if args.steps is not None else int(
        cfg.section("trainer")["collect_steps"])
    if steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {steps}")
    out_dir = Path(cfg.section("output")["dir"])
    manifest = _write_manifest(out_dir, "collect", cfg, {"dataset": "dataset.bin"})
    env = cfg.make_env()
    trainer = cfg.section("trainer")
    noise = OuNoise(theta_ou=float(trainer["ou_theta"]),
                    sigma_ou=float(trainer["ou_sigma_scale"]) * env.config.max_torque,
                    low=-env.config.max_torque, high=env.config.max_torque,
                    d_a=env.action_dim, seed=cfg.derived_seeds()["trainer"])
    ds = collect_random(env, steps, noise)
    ds.save(out_dir / "dataset.bin")
    _finish_manifest(out_dir, manifest)
    print(f"collected {len(ds)} transitions over {ds.n_episodes} episodes "
          f"-> {out_dir / 'dataset.bin'}")
    return EXIT_OK


def cmd_train_offline(args) -> int:
    cfg = _load_cfg(args)
    trainer = cfg.section("trainer")
    epochs = args.epochs if args.epochs is not None else int(trainer["offline_epochs"])
    if epochs < 0:
        raise ConfigError(f"--epochs must be >= 0, got {epochs}")
    out_dir = Path(cfg.section("output")["dir"])
    manifest = _write_manifest(out_dir, "train-offline", cfg,
                               {"checkpoint": "checkpoint.bin", "trainlog": "trainlog.csv"})
    ds = ReplayDataset.load(args.data)
    _check_dataset_compatible(cfg, ds)
    model = cfg.make_model()
    log = train_offline(model, ds, epochs=epochs,
                        batch_size=int(trainer["batch_size"]),
                        h_train=cfg.h_train(),
                        seed=cfg.derived_seeds()["trainer"],
                        learning_rate=float(trainer["learning_rate"]),
                        grad_clip=float(trainer["grad_clip"]))
    save_model(model, out_dir / "checkpoint.bin")
    log.save(out_dir / "trainlog.csv")
    _finish_manifest(out_dir, manifest)
    last = log.rows[-1] if log.rows else {}
    print(f"trained {model.variant} for {epochs} epochs; "
          f"final train_loss={last.get('train_loss')} "
          f"eval_loss_10step={last.get('eval_loss_10step')}")
    return EXIT_OK


def cmd_train_online(args) -> int:
    if args.iterations is not None:
        args.set = (args.set or []) + [f"trainer.online.n_iterations={int(args.iterations)}"]
    cfg = _load_cfg(args)
    out_dir = Path(cfg.section("output")["dir"])
    manifest = _write_manifest(out_dir, "train-online", cfg,
                               {"checkpoint": "checkpoint.bin", "trainlog": "trainlog.csv",
                                "dataset": "dataset.bin"})
    env = cfg.make_env()
    model = cfg.make_model()
    online = cfg.online_config()
    log, ds = train_online(env, model, online, cfg.cem_config())
    save_model(model, out_dir / "checkpoint.bin")
    log.save(out_dir / "trainlog.csv")
    ds.save(out_dir / "dataset.bin")
    _finish_manifest(out_dir, manifest)
    print(f"online training done: {log.rows[-1]['env_steps']} env steps "
          f"over {online.n_iterations} iterations")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    episodes = args.episodes if args.episodes is not None else int(
        cfg.section("output")["eval_episodes"])
    if episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {episodes}")
    if args.checkpoint is None and not args.oracle:
        raise ConfigError("either --checkpoint or --oracle is required")
    out_dir = Path(cfg.section("output")["dir"])
    manifest = _write_manifest(out_dir, "eval", cfg,
                               {"eval_summary": "eval_summary.json",
                                "eval_episodes_csv": "eval_episodes.csv"})
    env_config = cfg.env_config()
    if args.oracle:
        model = GroundTruthPendulumModel(env_config)
        variant = "oracle"
    else:
        model = load_model(args.checkpoint)
        variant = model.variant
        if model.d_s != env_config.obs_dim:
            raise ConfigError(
                f"checkpoint expects obs dim {model.d_s} but env has {env_config.obs_dim}")
    policy = mpc_policy(model, cfg.cem_config(), d_a=1)
    stats = evaluate(lambda: MultiPendulumEnv(env_config), policy, episodes,
                     seed=cfg.derived_seeds()["eval"])
    summary = {
        "variant": variant,
        "n_pendulums": env_config.n_pendulums,
        "episodes": episodes,
        "mean_return": stats.mean,
        "std_return": stats.std,
        "seed": cfg.seed,
    }
    with open(out_dir / "eval_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "eval_episodes.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "return"])
        for i, ret in enumerate(stats.returns):
            writer.writerow([i, repr(ret)])
    _finish_manifest(out_dir, manifest)
    print(f"{variant}: mean return {stats.mean:.2f} (std {stats.std:.2f}) "
          f"over {episodes} episodes")
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    horizon = args.horizon
    if horizon < 1:
        raise ConfigError(f"--horizon must be >= 1, got {horizon}")
    reports = []
    if not args.skip_canned:
        mdp = random_mdp(rng, n_states=4, n_actions=2, gamma=1.0)
        reports.append(check_bound(mdp, identity_latent(mdp), horizon,
                                   descriptor="canned-identity"))
        reports.append(check_bound(mdp, offset_latent(mdp, delta=1.0), horizon,
                                   descriptor="canned-offset-delta-1"))
    for i in range(args.instances):
        n_states = int(rng.integers(2, 7))
        n_actions = int(rng.integers(2, 4))
        h = int(rng.integers(1, horizon + 1))
        gamma = 1.0 if rng.random() < 0.5 else float(rng.uniform(0.5, 1.0))
        mdp = random_mdp(rng, n_states, n_actions, gamma=gamma)
        latent = perturbed_latent(
            mdp, rng,
            reward_noise=float(rng.uniform(0.0, 0.5)),
            merge_states=bool(rng.random() < 0.3),
            scramble_dynamics_prob=float(rng.uniform(0.0, 0.3)),
        )
        reports.append(check_bound(mdp, latent, h, descriptor=f"random-{i}"))
    lines = [rep.to_json() for rep in reports]
    for line in lines:
        print(line)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    failures = [rep for rep in reports if not rep.cs_bound_holds]
    if failures:
        raise BoundViolation(
            f"{len(failures)} instances violate the H-scaled bound, e.g. "
            f"{failures[0].instance_descriptor}: {failures[0].to_json()}")
    return EXIT_OK


def _load_manifests(runs_dir: Path):
    manifests, broken = [], []
    for path in sorted(runs_dir.glob("**/manifest.json")):
        try:
            with open(path, encoding="utf-8") as fh:
                manifests.append((path.parent, json.load(fh)))
        except (OSError, json.JSONDecodeError) as exc:
            broken.append(f"{path}: {exc}")
    return manifests, broken


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise ConfigError(f"--runs {runs_dir} is not a directory")
    manifests, broken = _load_manifests(runs_dir)
    for item in broken:
        print(f"skipping corrupt manifest: {item}", file=sys.stderr)
    if not manifests:
        raise ConfigError(f"no manifests found under {runs_dir}")
    out_dir = Path(args.out) if args.out else runs_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    by_cell: dict[tuple[str, int], list[float]] = {}
    curve_rows_loss, curve_rows_return = [], []
    for run_dir, manifest in manifests:
        cfg = manifest.get("config", {})
        variant = cfg.get("model", {}).get("variant", "?")
        n_pend = cfg.get("env", {}).get("n_pendulums", "?")
        seed = manifest.get("seed", "?")
        summary_path = run_dir / "eval_summary.json"
        if summary_path.exists():
            with open(summary_path, encoding="utf-8") as fh:
                summary = json.load(fh)
            episodes_path = run_dir / "eval_episodes.csv"
            returns = []
            if episodes_path.exists():
                with open(episodes_path, encoding="utf-8") as fh:
                    returns = [float(row["return"]) for row in csv.DictReader(fh)]
            else:
                returns = [float(summary["mean_return"])] * int(summary["episodes"])
            key = (summary.get("variant", variant), int(summary["n_pendulums"]))
            by_cell.setdefault(key, []).extend(returns)
        log_path = run_dir / "trainlog.csv"
        if log_path.exists():
            with open(log_path, encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    base = {"run": run_dir.name, "variant": variant,
                            "n_pendulums": n_pend, "seed": seed,
                            "env_steps": row["env_steps"]}
                    if row["eval_loss_10step"]:
                        curve_rows_loss.append(
                            {**base, "eval_loss_10step": row["eval_loss_10step"]})
                    if row["explore_return"] or row["eval_return"]:
                        curve_rows_return.append(
                            {**base, "explore_return": row["explore_return"],
                             "eval_return": row["eval_return"]})

    with open(out_dir / "table.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "n_pendulums", "mean_return", "std_return", "episodes"])
        for (variant, n_pend) in sorted(by_cell):
            arr = np.asarray(by_cell[(variant, n_pend)])
            writer.writerow([variant, n_pend, repr(float(arr.mean())),
                             repr(float(arr.std())), len(arr)])

    def _write_rows(path: Path, rows: list[dict], columns: list[str]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)

    _write_rows(out_dir / "loss_curves.csv", curve_rows_loss,
                ["run", "variant", "n_pendulums", "seed", "env_steps", "eval_loss_10step"])
    _write_rows(out_dir / "return_curves.csv", curve_rows_return,
                ["run", "variant", "n_pendulums", "seed", "env_steps",
                 "explore_return", "eval_return"])
    print(f"report written to {out_dir} ({len(by_cell)} table cells, "
          f"{len(manifests)} runs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rewardplan",
        description="Latent reward-prediction models with CEM-based MPC planning.")
    parser.add_argument("--version", action="version", version=f"rewardplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. env.n_pendulums=5")

    p = sub.add_parser("collect", help="record transitions under OU-noise control")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--pendulums", type=int, default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train-offline", help="train a model on a recorded dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset file from `collect`")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", choices=["reward", "state_pred", "deepmdp"], default=None)
    p.add_argument("--pendulums", type=int, default=None)
    p.set_defaults(func=cmd_train_offline)

    p = sub.add_parser("train-online", help="iterative collect-and-train scheme")
    common(p)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--variant", choices=["reward", "state_pred", "deepmdp"], default=None)
    p.add_argument("--pendulums", type=int, default=None)
    p.set_defaults(func=cmd_train_online)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the oracle planner)")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true",
                   help="plan with the ground-truth model instead of a checkpoint")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--pendulums", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theorem", help="brute-force planning-bound checks")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write JSON lines here")
    p.add_argument("--skip-canned", action="store_true")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("report", help="aggregate run directories into tables and curves")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, SerializationError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BoundViolation as exc:
        print(f"bound violation: {exc}", file=sys.stderr)
        return EXIT_BOUND


if __name__ == "__main__":
    sys.exit(main())
