"""Experiment configuration: one strict JSON document per run.

Every nested section maps onto a frozen dataclass.  Unknown keys, wrong
types and invariant violations raise :class:`ConfigError` naming the key
path.  A few values are derived and may not be set directly: seeds follow
the master ``seed``, agent dimensions follow ``env``, the agent's box
offsets follow ``exploration`` and its discount follows ``reward``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .agent import ActorLossConfig, AgentConfig, AgentVariant, CriticLossConfig
from .core import RewardConfig
from .env import EnvConfig, SynthRec
from .errors import ConfigError
from .evaluation import NcisConfig
from .exploration import ExplorationSpec
from .nn import TargetUpdateConfig
from .orchestrator import ProgressiveSchedule

SCHEMA = "fuserl-config/1"

DERIVED_KEYS = {
    "env.seed": "seed",
    "agent.seed": "seed",
    "agent.state_dim": "env.state_dim",
    "agent.action_dim": "env.behavior_count",
    "agent.lower": "exploration.lower",
    "agent.upper": "exploration.upper",
    "agent.critic_loss.gamma": "reward.discount",
}


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 20000
    batch_size: int = 256
    log_interval: int = 100

    def validate(self, path: str = "training") -> None:
        if self.steps < 0:
            raise ConfigError(f"{path}.steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size", "must be >= 1")
        if self.log_interval < 1:
            raise ConfigError(f"{path}.log_interval", "must be >= 1")


@dataclass(frozen=True)
class EvaluationConfig:
    ncis: NcisConfig = field(default_factory=NcisConfig)
    rollout_sessions: int = 2000
    bootstrap_resamples: int = 1000
    # "critic" swaps logged session returns for the policy's own critic estimate
    ncis_returns: str = "logged"

    def validate(self, path: str = "evaluation") -> None:
        self.ncis.validate(f"{path}.ncis")
        if self.rollout_sessions and self.rollout_sessions < 100:
            raise ConfigError(f"{path}.rollout_sessions", "must be 0 or >= 100")
        if self.bootstrap_resamples < 1:
            raise ConfigError(f"{path}.bootstrap_resamples", "must be >= 1")
        if self.ncis_returns not in ("logged", "critic"):
            raise ConfigError(f"{path}.ncis_returns", "must be 'logged' or 'critic'")


@dataclass(frozen=True)
class ExperimentConfig:
    schema: str = SCHEMA
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    exploration: ExplorationSpec = field(default_factory=ExplorationSpec)
    agent_variant: str = "unifiedrl"
    agent: AgentConfig = field(default_factory=AgentConfig)
    progressive: ProgressiveSchedule = field(default_factory=ProgressiveSchedule)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    workers: int = 0  # 0 means one worker per CPU core
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.schema != SCHEMA:
            raise ConfigError("schema", f"expected {SCHEMA!r}, got {self.schema!r}")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("seed", "must be a 63-bit nonnegative integer")
        try:
            AgentVariant(self.agent_variant)
        except ValueError:
            raise ConfigError("agent_variant", f"must be one of {[v.value for v in AgentVariant]}") from None
        self.env.validate("env")
        self.reward.validate("reward")
        if self.reward.k != self.env.behavior_count:
            raise ConfigError("reward.weights", "needs one weight per behavior (env.behavior_count)")
        self.exploration.validate("exploration")
        self.agent.validate("agent")
        if self.agent_variant != AgentVariant.DDPG.value and self.agent.n_sets != self.reward.q:
            raise ConfigError("agent.n_sets", f"must equal the number of reward groups ({self.reward.q})")
        self.progressive.validate("progressive")
        self.training.validate("training")
        self.evaluation.validate("evaluation")
        if self.workers < 0:
            raise ConfigError("workers", "must be >= 0")

    # -- derived objects --------------------------------------------------
    def make_env(self) -> SynthRec:
        return SynthRec(replace(self.env, seed=self.seed), self.reward)

    def agent_config(self, variant: AgentVariant | str | None = None) -> AgentConfig:
        variant = self.agent_variant if variant is None else variant
        cfg = replace(self.agent, seed=self.seed, state_dim=self.env.state_dim, action_dim=self.env.action_dim,
                      lower=self.exploration.lower, upper=self.exploration.upper,
                      critic_loss=replace(self.agent.critic_loss, gamma=self.reward.discount))
        return cfg.for_variant(variant)

    def to_dict(self) -> dict[str, Any]:
        d = _to_jsonable(self)
        for key in DERIVED_KEYS:
            _pop_path(d, key)
        return d


# -- loading ------------------------------------------------------------------

def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _pop_path(d: dict, dotted: str) -> None:
    *head, last = dotted.split(".")
    for k in head:
        d = d[k]
    d.pop(last, None)


def _convert(tp, value, path: str):
    """Coerce a JSON value to the annotated field type, or raise with ``path``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, "expected an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} values")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def _build(cls, data: dict[str, Any], path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(full, "unknown key")
        if full in DERIVED_KEYS:
            raise ConfigError(full, f"derived from {DERIVED_KEYS[full]}; set that instead")
        kwargs[key] = _convert(hints[key], value, full)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if "schema" not in data:
        raise ConfigError("schema", f"missing; expected {SCHEMA!r}")
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()  # OSError propagates; the CLI maps it to the I/O exit code
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def default_config_dict() -> dict[str, Any]:
    return ExperimentConfig().to_dict()


__all__ = ["ExperimentConfig", "TrainingConfig", "EvaluationConfig", "load_config", "config_from_dict",
           "default_config_dict", "SCHEMA", "ActorLossConfig", "CriticLossConfig", "TargetUpdateConfig"]
