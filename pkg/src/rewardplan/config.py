"""Experiment configuration: defaults, YAML files, and flag overrides.

Precedence is flags > file > defaults. Unknown keys and dimensional
inconsistencies are rejected before any computation starts. A single master
seed (``output.seed``) deterministically derives every component seed, so
one (config, seed) pair pins an entire run.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import yaml

from .env import EnvConfig, MultiPendulumEnv
from .models import LatentModel, build_model
from .planning import CemConfig
from .training import OnlineConfig


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value, inconsistent dims)."""


DEFAULTS: dict = {
    "env": {
        "n_pendulums": 1,
        "gravity": 10.0,
        "mass": 1.0,
        "length": 1.0,
        "dt": 0.05,
        "max_torque": 2.0,
        "max_speed": 8.0,
        "episode_len": 200,
    },
    "model": {
        "variant": "reward",
        "d_z": 3,
        "gamma": 0.99,
        "hidden": [128, 128],
        "latent_pred_weight": 1.0,
        "stop_target_grad": False,
    },
    "planner": {
        "horizon": 12,
        "n_samples": 1000,
        "n_elites": 100,
        "n_iterations": 5,
        "init_std": 0.5,
        "std_floor": 0.05,
        "gamma": None,  # falls back to model.gamma
        "warm_start": False,
    },
    "trainer": {
        "collect_steps": 20000,
        "offline_epochs": 300,
        "batch_size": 256,
        "h_train": None,  # falls back to planner.horizon
        "learning_rate": 1.0e-3,
        "grad_clip": 10.0,
        "ou_theta": 0.15,
        "ou_sigma_scale": 0.3,
        "online": {
            "n_iterations": 106,
            "init_random_steps": 2500,
            "init_epochs": 100,
            "train_iters_per_episode": 100,
            "epsilon": 0.7,
            "eval_every": 25,
            "eval_episodes": 3,
        },
    },
    "output": {
        "dir": "runs/run",
        "seed": 0,
        "eval_episodes": 20,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {here} must be a section")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def parse_override(text: str):
    """Parse a ``section.key=value`` override; the value is YAML-typed."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    node: dict = {}
    leaf = node
    for key in keys[:-1]:
        leaf[key] = {}
        leaf = leaf[key]
    leaf[keys[-1]] = value
    return node


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict

    @classmethod
    def load(cls, path=None, overrides: list[dict] | None = None) -> "ExperimentConfig":
        merged = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    file_cfg = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            merged = _merge(merged, file_cfg)
        for ov in overrides or []:
            merged = _merge(merged, ov)
        cfg = cls(data=merged)
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data["output"]["seed"])

    def derived_seeds(self) -> dict[str, int]:
        names = ("env", "model", "planner", "trainer", "eval")
        words = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {name: int(word) for name, word in zip(names, words)}

    # ----- typed builders -------------------------------------------------

    def env_config(self) -> EnvConfig:
        sec = self.data["env"]
        try:
            return EnvConfig(seed=self.derived_seeds()["env"], **sec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env section invalid: {exc}") from exc

    def make_env(self) -> MultiPendulumEnv:
        return MultiPendulumEnv(self.env_config())

    def make_model(self) -> LatentModel:
        sec = self.data["model"]
        env = self.env_config()
        try:
            return build_model(
                variant=sec["variant"],
                d_s=env.obs_dim,
                d_a=1,
                d_z=int(sec["d_z"]),
                hidden=tuple(int(h) for h in sec["hidden"]),
                gamma=float(sec["gamma"]),
                seed=self.derived_seeds()["model"],
                latent_pred_weight=float(sec["latent_pred_weight"]),
                stop_target_grad=bool(sec["stop_target_grad"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model section invalid: {exc}") from exc

    def cem_config(self) -> CemConfig:
        sec = self.data["planner"]
        env = self.env_config()
        gamma = sec["gamma"] if sec["gamma"] is not None else self.data["model"]["gamma"]
        try:
            return CemConfig(
                horizon=int(sec["horizon"]),
                n_samples=int(sec["n_samples"]),
                n_elites=int(sec["n_elites"]),
                n_iterations=int(sec["n_iterations"]),
                init_std=float(sec["init_std"]),
                std_floor=float(sec["std_floor"]),
                action_low=-env.max_torque,
                action_high=env.max_torque,
                gamma=float(gamma),
                seed=self.derived_seeds()["planner"],
                warm_start=bool(sec["warm_start"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"planner section invalid: {exc}") from exc

    def h_train(self) -> int:
        sec = self.data["trainer"]
        return int(sec["h_train"]) if sec["h_train"] is not None else int(
            self.data["planner"]["horizon"])

    def online_config(self) -> OnlineConfig:
        trainer = self.data["trainer"]
        sec = trainer["online"]
        try:
            return OnlineConfig(
                n_iterations=int(sec["n_iterations"]),
                init_random_steps=int(sec["init_random_steps"]),
                init_epochs=int(sec["init_epochs"]),
                train_iters_per_episode=int(sec["train_iters_per_episode"]),
                batch_size=int(trainer["batch_size"]),
                epsilon=float(sec["epsilon"]),
                h_train=self.h_train(),
                learning_rate=float(trainer["learning_rate"]),
                grad_clip=float(trainer["grad_clip"]),
                ou_theta=float(trainer["ou_theta"]),
                ou_sigma_scale=float(trainer["ou_sigma_scale"]),
                eval_every=int(sec["eval_every"]),
                eval_episodes=int(sec["eval_episodes"]),
                seed=self.derived_seeds()["trainer"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trainer section invalid: {exc}") from exc

    def validate(self) -> None:
        env = self.env_config()
        self.make_model()
        self.cem_config()
        self.online_config()
        trainer = self.data["trainer"]
        if int(trainer["offline_epochs"]) < 0:
            raise ConfigError("trainer.offline_epochs must be >= 0")
        if int(trainer["collect_steps"]) < 1:
            raise ConfigError("trainer.collect_steps must be >= 1")
        if int(trainer["batch_size"]) < 1:
            raise ConfigError("trainer.batch_size must be >= 1")
        if self.h_train() < 1:
            raise ConfigError("trainer.h_train must be >= 1")
        if self.h_train() > env.episode_len:
            raise ConfigError(
                f"trainer.h_train {self.h_train()} exceeds episode_len {env.episode_len}")
        out = self.data["output"]
        if int(out["eval_episodes"]) < 1:
            raise ConfigError("output.eval_episodes must be >= 1")

    def snapshot(self) -> dict:
        return copy.deepcopy(self.data)
