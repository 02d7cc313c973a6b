"""Actor-critic agents for fusion-weight policies.

:class:`UnifiedRLAgent` trains ``q`` sets of ``m`` critics, one set per
reward group, with TD targets whose bootstrap term is discounted by a gate
when the target actor leaves the logged exploration box.  Its actor
maximizes the weighted mean critic value while paying a penalty for leaving
the box and for critic disagreement.  :class:`DDPGAgent` is plain DDPG on
the same plumbing and serves as the comparison baseline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ContractViolation, DataIntegrityError, ModelMismatchError, TrainingDivergedError
from .exploration import ExplorationBounds, penalty_distance
from .nn import MLP, Adam, TargetUpdateConfig, soft_update


@dataclass(frozen=True)
class ActorLossConfig:
    eta: float = 1.2  # bound-penalty weight
    lam: float = 0.2  # critic-disagreement weight
    omega: float = 1.0  # penalty scale at the box edge
    beta: float = 0.3  # penalty growth width, in units of box width

    def validate(self, path: str = "agent.actor_loss") -> None:
        for name in ("eta", "lam", "omega"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}", "must be >= 0")
        if not self.beta > 0:
            raise ConfigError(f"{path}.beta", "must be > 0")


@dataclass(frozen=True)
class CriticLossConfig:
    varpi: float = 1.0  # gate scale outside the box
    zeta: float = 3.0  # gate offset; gate at the box edge is varpi * exp(-zeta)
    gamma: float = 0.9

    def validate(self, path: str = "agent.critic_loss") -> None:
        if self.varpi < 0:
            raise ConfigError(f"{path}.varpi", "must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"{path}.gamma", "must lie in [0, 1]")


class AgentVariant(str, Enum):
    UNIFIED = "unifiedrl"
    UNIFIED_NO_PTM = "unifiedrl_no_ptm"
    DDPG = "ddpg"


@dataclass(frozen=True)
class AgentConfig:
    state_dim: int = 32
    action_dim: int = 10
    hidden: tuple[int, ...] = (128, 64)
    n_sets: int = 2
    n_critics: int = 4
    # recombination weights of the critic sets; None means 1/n_sets each
    set_weights: tuple[float, ...] | None = None
    actor_loss: ActorLossConfig = field(default_factory=ActorLossConfig)
    critic_loss: CriticLossConfig = field(default_factory=CriticLossConfig)
    target_update: TargetUpdateConfig = field(default_factory=TargetUpdateConfig)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    action_low: float = -1.0
    action_high: float = 1.0
    use_gate: bool = True
    # default box offsets for transitions whose metadata carries none
    lower: float = -0.15
    upper: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.set_weights is not None:
            object.__setattr__(self, "set_weights", tuple(float(w) for w in self.set_weights))

    def validate(self, path: str = "agent") -> None:
        if self.n_sets < 1:
            raise ConfigError(f"{path}.n_sets", "must be >= 1")
        if self.n_critics < 1:
            raise ConfigError(f"{path}.n_critics", "must be >= 1")
        if self.set_weights is not None and len(self.set_weights) != self.n_sets:
            raise ConfigError(f"{path}.set_weights", "needs one weight per critic set")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ConfigError(f"{path}.actor_lr", "learning rates must be >= 0")
        if not self.lower < self.upper:
            raise ConfigError(f"{path}.lower", "lower must be < upper")
        self.actor_loss.validate(f"{path}.actor_loss")
        self.critic_loss.validate(f"{path}.critic_loss")
        self.target_update.validate(f"{path}.target_update")

    @property
    def weights(self) -> np.ndarray:
        if self.set_weights is None:
            return np.full(self.n_sets, 1.0 / self.n_sets)
        return np.asarray(self.set_weights)

    def for_variant(self, variant: AgentVariant | str) -> "AgentConfig":
        """DDPG drops both penalties, the gate and the ensemble."""
        if AgentVariant(variant) is AgentVariant.DDPG:
            return replace(self, n_sets=1, n_critics=1, set_weights=None, use_gate=False,
                           actor_loss=replace(self.actor_loss, eta=0.0, lam=0.0))
        return self


@dataclass
class TransitionBatch:
    states: np.ndarray  # (B, F)
    actions: np.ndarray  # (B, A)
    rewards: np.ndarray  # (B, q) per-group reward components
    next_states: np.ndarray
    terminal: np.ndarray  # (B,) bool
    baseline: np.ndarray  # (B, A) baseline action at the state
    next_baseline: np.ndarray  # (B, A) baseline action at the next state
    lower: np.ndarray  # (B,)
    upper: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.states)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def rewards_for(self, n_sets: int) -> np.ndarray:
        """``(B, n_sets)`` rewards, collapsing all groups when ``n_sets == 1``."""
        if self.rewards.shape[1] == n_sets:
            return self.rewards
        if n_sets == 1:
            return self.rewards.sum(axis=1, keepdims=True)
        raise ContractViolation(f"batch has {self.rewards.shape[1]} reward groups, agent has {n_sets} critic sets")

    @property
    def bounds(self) -> ExplorationBounds:
        return ExplorationBounds(self.baseline, self.lower, self.upper)

    @property
    def next_bounds(self) -> ExplorationBounds:
        return ExplorationBounds(self.next_baseline, self.lower, self.upper)


def _per_dim(x, like: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim and like.ndim > 1 else x


def _penalty_terms(action: np.ndarray, bounds: ExplorationBounds, cfg: ActorLossConfig):
    dev = penalty_distance(action, bounds)
    scale = cfg.beta * _per_dim(bounds.width, dev.deviation)
    terms = np.where(dev.side != 0, cfg.omega * np.exp(dev.deviation / scale), 0.0)
    return terms, dev.side, scale


def bound_penalty(action: np.ndarray, bounds: ExplorationBounds, cfg: ActorLossConfig) -> np.ndarray | float:
    """Sum over action dimensions of the out-of-box penalty.

    Zero strictly inside the box; ``omega * exp(dev / (beta * width))`` at or
    beyond an edge, ``dev`` being the distance past that edge.
    """
    terms, _, _ = _penalty_terms(action, bounds, cfg)
    total = terms.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def bound_penalty_grad(action: np.ndarray, bounds: ExplorationBounds, cfg: ActorLossConfig) -> np.ndarray:
    terms, side, scale = _penalty_terms(action, bounds, cfg)
    return side * terms / scale


def bootstrap_gate(next_action: np.ndarray, bounds: ExplorationBounds, cfg: CriticLossConfig) -> np.ndarray | float:
    """Product over dimensions of the bootstrap discount.

    A dimension strictly inside the box contributes 1, otherwise
    ``varpi * exp(-(zeta + dev / width))``.
    """
    dev = penalty_distance(next_action, bounds)
    width = _per_dim(bounds.width, dev.deviation)
    per_dim = np.where(dev.side != 0, cfg.varpi * np.exp(-(cfg.zeta + dev.deviation / width)), 1.0)
    gate = per_dim.prod(axis=-1)
    return float(gate) if np.ndim(gate) == 0 else gate


def _sa(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, actions], axis=-1)


def actor_objective(actor: MLP, critics: MLP, batch: TransitionBatch, cfg: AgentConfig,
                    compute_grad: bool = True) -> tuple[float, list[np.ndarray] | None, dict[str, float]]:
    """Penalized actor loss averaged over the batch, and its actor gradient.

    Per sample: ``-sum_i w_i mean_j Q_ij + eta * d(mu(s)) + lam * sum_i w_i std_j Q_ij``
    with the population standard deviation over the ``m`` critics of a set.
    Critic parameters receive no gradient.
    """
    if len(batch) == 0:
        raise ContractViolation("actor objective needs a nonempty batch")
    q, m, w = cfg.n_sets, cfg.n_critics, cfg.weights
    al = cfg.actor_loss
    B = len(batch)
    actions = actor.forward(batch.states)
    values = critics.forward(_sa(batch.states, actions))[..., 0].reshape(q, m, B)
    mean = values.mean(axis=1)
    centered = values - mean[:, None, :]
    std = np.sqrt((centered**2).mean(axis=1))
    bounds = batch.bounds
    penalty = bound_penalty(actions, bounds, al) if al.eta else np.zeros(B)
    per_sample = -(w @ mean) + al.eta * penalty + al.lam * (w @ std)
    loss = float(per_sample.mean())
    diag = {"actor_loss": loss, "mean_penalty": float(np.mean(penalty)), "mean_std": float(np.mean(std))}
    if not compute_grad:
        return loss, None, diag
    ratio = np.divide(centered, m * std[:, None, :], out=np.zeros_like(centered), where=std[:, None, :] > 0)
    d_values = (-w[:, None, None] / m + al.lam * w[:, None, None] * ratio) / B
    _, d_input = critics.backward(d_values.reshape(q * m, B, 1), param_grads=False)
    d_actions = d_input[:, batch.states.shape[1]:]
    if al.eta:
        d_actions = d_actions + al.eta * bound_penalty_grad(actions, bounds, al) / B
    grads, _ = actor.backward(d_actions, want_input=False)
    return loss, grads, diag


def critic_targets(batch: TransitionBatch, target_actor: MLP, target_critics: MLP,
                   cfg: AgentConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(q*m, B)`` TD targets and the ``(B,)`` bootstrap gate."""
    cl = cfg.critic_loss
    next_actions = target_actor.forward(batch.next_states)
    boot = target_critics.forward(_sa(batch.next_states, next_actions))[..., 0]
    if cfg.use_gate:
        gate = bootstrap_gate(next_actions, batch.next_bounds, cl)
    else:
        gate = np.ones(len(batch))
    rewards = np.repeat(batch.rewards_for(cfg.n_sets).T, cfg.n_critics, axis=0)
    live = ~batch.terminal.astype(bool)
    targets = rewards + np.where(live, cl.gamma * gate * boot, 0.0)
    return targets, gate


def critic_objective(critics: MLP, batch: TransitionBatch, targets: np.ndarray,
                     compute_grad: bool = True) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Per-critic mean squared TD error ``(q*m,)`` and stacked gradients.

    Targets are constants: no gradient flows into target networks.
    """
    if len(batch) == 0:
        raise ContractViolation("critic objective needs a nonempty batch")
    values = critics.forward(_sa(batch.states, batch.actions))[..., 0]
    diff = values - targets
    losses = (diff**2).mean(axis=1)
    if not compute_grad:
        return losses, None
    grads, _ = critics.backward((2.0 / len(batch)) * diff[..., None], want_input=False)
    return losses, grads


class Policy(Protocol):
    state_dim: int
    action_dim: int

    def act(self, states: np.ndarray) -> np.ndarray: ...


class ConstantPolicy:
    """Serves one fixed fusion action regardless of state."""

    kind = "constant"

    def __init__(self, action: np.ndarray, state_dim: int = 32):
        self.action = np.asarray(action, dtype=float)
        self.state_dim = int(state_dim)
        self.action_dim = self.action.shape[0]

    def act(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape[-1] != self.state_dim:
            raise ContractViolation(f"state has {states.shape[-1]} features, policy expects {self.state_dim}")
        return np.broadcast_to(self.action, states.shape[:-1] + self.action.shape).copy()

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "action": self.action.tolist(), "state_dim": self.state_dim}


def _check_finite(diag: dict[str, Any], *nets: MLP) -> None:
    bad = [k for k, v in diag.items() if not np.all(np.isfinite(v))]
    if bad or not all(n.all_finite() for n in nets):
        raise TrainingDivergedError(f"non-finite values during training: {bad or 'parameters'}; diagnostics={diag}")


def _actor_sizes(cfg: AgentConfig) -> list[int]:
    return [cfg.state_dim, *cfg.hidden, cfg.action_dim]


def _critic_sizes(cfg: AgentConfig) -> list[int]:
    return [cfg.state_dim + cfg.action_dim, *cfg.hidden, 1]


class _ActorCriticBase:
    kind = ""

    def __init__(self, config: AgentConfig):
        config.validate()
        self.config = config
        self.step = 0
        self.actor = MLP.create(_actor_sizes(config), rngmod.substream(config.seed, rngmod.NETWORK_INIT, 0),
                                output="tanh", out_range=(config.action_low, config.action_high))
        self.actor_target = self.actor.copy()
        self.actor_opt = Adam(self.actor.params, lr=config.actor_lr)

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    def act(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape[-1] != self.state_dim:
            raise ContractViolation(f"state has {states.shape[-1]} features, actor expects {self.state_dim}")
        return np.clip(self.actor.forward(states), self.config.action_low, self.config.action_high)

    def _networks(self) -> dict[str, MLP]:
        raise NotImplementedError

    def _optimizers(self) -> dict[str, Adam]:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "config": config_to_dict(self.config),
            "step": self.step,
            "networks": {k: n.to_dict() for k, n in self._networks().items()},
            "optimizers": {k: o.to_dict() for k, o in self._optimizers().items()},
        }

    def load_state(self, d: dict[str, Any]) -> None:
        self.step = int(d["step"])
        for name, net in self._networks().items():
            loaded = MLP.from_dict(d["networks"][name])
            if not loaded.same_arch(net):
                raise ModelMismatchError(f"checkpoint network {name!r} has architecture {loaded.arch()}")
            net.params = loaded.params
        for name, opt in self._optimizers().items():
            o = Adam.from_dict(d["optimizers"][name])
            opt.t, opt.m, opt.v, opt.lr = o.t, o.m, o.v, o.lr


class UnifiedRLAgent(_ActorCriticBase):
    kind = "unifiedrl"

    def __init__(self, config: AgentConfig):
        super().__init__(config)
        E = config.n_sets * config.n_critics
        seeds = [rngmod.substream(config.seed, rngmod.NETWORK_INIT, 1 + e) for e in range(E)]
        self.critics = MLP.create(_critic_sizes(config), seeds)
        self.critic_targets = self.critics.copy()
        self.critic_opt = Adam(self.critics.params, lr=config.critic_lr)

    def _networks(self):
        return {"actor": self.actor, "actor_target": self.actor_target,
                "critics": self.critics, "critic_targets": self.critic_targets}

    def _optimizers(self):
        return {"actor": self.actor_opt, "critics": self.critic_opt}

    def critic_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """``(q, m, B)`` critic estimates."""
        cfg = self.config
        v = self.critics.forward(_sa(states, actions))[..., 0]
        return v.reshape(cfg.n_sets, cfg.n_critics, -1)

    def estimated_return(self, states: np.ndarray) -> np.ndarray:
        """Critic estimate of the total return of following the actor from ``states``."""
        states = np.atleast_2d(states)
        return self.critic_values(states, self.act(states)).mean(axis=1).sum(axis=0)

    def train_step(self, batch: TransitionBatch) -> dict[str, Any]:
        cfg = self.config
        targets, gate = critic_targets(batch, self.actor_target, self.critic_targets, cfg)
        td, grads = critic_objective(self.critics, batch, targets)
        _check_finite({"td_losses": td})
        self.critic_opt.step(self.critics.params, grads)
        loss, agrads, diag = actor_objective(self.actor, self.critics, batch, cfg)
        self.actor_opt.step(self.actor.params, agrads)
        self.step += 1
        soft_update(self.actor_target, self.actor, cfg.target_update, self.step)
        soft_update(self.critic_targets, self.critics, cfg.target_update, self.step)
        diag.update(td_losses=td.reshape(cfg.n_sets, cfg.n_critics), mean_td=float(td.mean()),
                    mean_gate=float(np.mean(gate)))
        _check_finite(diag, self.actor, self.critics)
        return diag


class DDPGAgent(_ActorCriticBase):
    """Deterministic policy gradient with one critic, no penalties, no gate."""

    kind = "ddpg"

    def __init__(self, config: AgentConfig):
        super().__init__(config)
        self.critic = MLP.create(_critic_sizes(config), rngmod.substream(config.seed, rngmod.NETWORK_INIT, 1))
        self.critic_target = self.critic.copy()
        self.critic_opt = Adam(self.critic.params, lr=config.critic_lr)

    def _networks(self):
        return {"actor": self.actor, "actor_target": self.actor_target,
                "critic": self.critic, "critic_target": self.critic_target}

    def _optimizers(self):
        return {"actor": self.actor_opt, "critic": self.critic_opt}

    def estimated_return(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return self.critic.forward(_sa(states, self.act(states)))[:, 0]

    def train_step(self, batch: TransitionBatch) -> dict[str, Any]:
        cfg = self.config
        B = len(batch)
        gamma = cfg.critic_loss.gamma
        next_actions = self.actor_target.forward(batch.next_states)
        boot = self.critic_target.forward(_sa(batch.next_states, next_actions))[:, 0]
        reward = batch.rewards_for(1)[:, 0]
        y = reward + np.where(~batch.terminal.astype(bool), gamma * boot, 0.0)
        q = self.critic.forward(_sa(batch.states, batch.actions))[:, 0]
        diff = q - y
        td = float(np.mean(diff**2))
        _check_finite({"td": td})
        grads, _ = self.critic.backward((2.0 / B) * diff[:, None], want_input=False)
        self.critic_opt.step(self.critic.params, grads)

        actions = self.actor.forward(batch.states)
        q_pi = self.critic.forward(_sa(batch.states, actions))[:, 0]
        loss = float(-q_pi.mean())
        _, d_input = self.critic.backward(np.full((B, 1), -1.0 / B), param_grads=False)
        agrads, _ = self.actor.backward(d_input[:, cfg.state_dim:], want_input=False)
        self.actor_opt.step(self.actor.params, agrads)
        self.step += 1
        soft_update(self.actor_target, self.actor, cfg.target_update, self.step)
        soft_update(self.critic_target, self.critic, cfg.target_update, self.step)
        diag = {"actor_loss": loss, "td_losses": np.array([[td]]), "mean_td": td,
                "mean_gate": 1.0, "mean_penalty": 0.0, "mean_std": 0.0}
        _check_finite(diag, self.actor, self.critic)
        return diag


def make_agent(variant: AgentVariant | str, config: AgentConfig):
    variant = AgentVariant(variant)
    cfg = config.for_variant(variant)
    return DDPGAgent(cfg) if variant is AgentVariant.DDPG else UnifiedRLAgent(cfg)


# -- configs and checkpoints ------------------------------------------------

def config_to_dict(cfg: AgentConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["set_weights"] = None if cfg.set_weights is None else list(cfg.set_weights)
    return d


def config_from_dict(d: dict[str, Any]) -> AgentConfig:
    d = dict(d)
    d["actor_loss"] = ActorLossConfig(**d["actor_loss"])
    d["critic_loss"] = CriticLossConfig(**d["critic_loss"])
    d["target_update"] = TargetUpdateConfig(**d["target_update"])
    return AgentConfig(**d)


def dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(policy, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    """Write a policy or agent as a self-describing JSON checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": "fuserl-checkpoint/1", **policy.to_dict(), "extra": extra or {}}
    path.write_text(dumps(payload) + "\n")
    return path


def checkpoint_from_dict(d: dict[str, Any]):
    kind = d.get("kind")
    if kind == "constant":
        return ConstantPolicy(np.asarray(d["action"], dtype=float), d["state_dim"])
    if kind in ("unifiedrl", "ddpg"):
        cfg = config_from_dict(d["config"])
        agent = UnifiedRLAgent(cfg) if kind == "unifiedrl" else DDPGAgent(cfg)
        agent.load_state(d)
        return agent
    raise DataIntegrityError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path: str | Path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(f"{path}: not a valid checkpoint ({exc})") from exc
    if d.get("format") != "fuserl-checkpoint/1":
        raise DataIntegrityError(f"{path}: unrecognized checkpoint format")
    return checkpoint_from_dict(d)


def check_policy_dims(policy, state_dim: int, action_dim: int) -> None:
    if policy.state_dim != state_dim or policy.action_dim != action_dim:
        raise ModelMismatchError(
            f"policy maps {policy.state_dim} -> {policy.action_dim} dims, "
            f"environment needs {state_dim} -> {action_dim}"
        )
