"""SynthRec-v1: a synthetic session-based recommender environment.

Per request the simulator draws a candidate pool, each candidate carrying a
true propensity per behavior and a noisy predicted score.  The served
fusion action ranks the pool, the user reacts to the top ``l`` items, and
the session continues with a probability that rises with the instant reward
and falls with accumulated fatigue.  Fatigue grows with watch time, so
rankings that chase watch time trade session length for immediate reward.

Candidates load on a latent "video length" factor that raises watch-time
propensity and lowers interaction propensities; users differ in how much
they enjoy long items (preference dimension 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .core import BehaviorMeta, RewardConfig, SessionTrajectory, Transition, instant_reward, rank_candidates
from .errors import ConfigError, ContractViolation
from .rng import SessionStreams

PREFERENCE_DIMS = 8


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    candidates_per_request: int = 50
    list_length: int = 6
    max_session_length: int = 20
    behavior_count: int = 5
    state_dim: int = 32
    fatigue_decay: float = 0.8
    fatigue_gain: float = 0.006  # per second of watch time
    continuation_logits: tuple[float, float, float] = (1.5, 0.6, 1.2)
    prediction_noise_std: float = 0.1
    watch_time_scale: float = 30.0  # mean watch seconds at propensity 1
    reward_scale: float = 3.0  # instant reward is divided by this in the continuation logit
    base_logits: tuple[float, ...] = (-1.0, 0.0, -1.5, -2.0, -0.5)
    affinity_scale: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.5)
    length_loading: tuple[float, ...] = (2.0, 0.5, -1.0, -1.0, -1.5)
    length_taste: float = 0.5
    item_noise_std: float = 1.2

    def __post_init__(self):
        for name in ("continuation_logits", "base_logits", "affinity_scale", "length_loading"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self, path: str = "env") -> None:
        if self.list_length < 1 or self.list_length > self.candidates_per_request:
            raise ConfigError(f"{path}.list_length", "must satisfy 1 <= list_length <= candidates_per_request")
        if not 0.0 <= self.fatigue_decay < 1.0:
            raise ConfigError(f"{path}.fatigue_decay", "must lie in [0, 1)")
        if self.fatigue_gain < 0:
            raise ConfigError(f"{path}.fatigue_gain", "must be >= 0")
        if self.max_session_length < 1:
            raise ConfigError(f"{path}.max_session_length", "must be >= 1")
        if self.behavior_count < 2:
            raise ConfigError(f"{path}.behavior_count", "need watch time plus at least one indicator")
        if self.state_dim < min_state_dim(self.behavior_count):
            raise ConfigError(f"{path}.state_dim", f"must be >= {min_state_dim(self.behavior_count)}")
        if len(self.continuation_logits) != 3:
            raise ConfigError(f"{path}.continuation_logits", "needs exactly three values")
        for name in ("base_logits", "affinity_scale", "length_loading"):
            if len(getattr(self, name)) != self.behavior_count:
                raise ConfigError(f"{path}.{name}", "needs one value per behavior")
        if self.prediction_noise_std < 0 or self.item_noise_std < 0:
            raise ConfigError(f"{path}.prediction_noise_std", "noise levels must be >= 0")
        if not self.reward_scale > 0 or not self.watch_time_scale > 0:
            raise ConfigError(f"{path}.reward_scale", "scales must be > 0")

    @property
    def action_dim(self) -> int:
        return 2 * self.behavior_count


def min_state_dim(k: int) -> int:
    return PREFERENCE_DIMS + 2 * k + 3


@dataclass
class UserLatent:
    preference: np.ndarray
    fatigue: float = 0.0
    step_index: int = 0
    last: np.ndarray = field(default=None)  # per-behavior totals of the previous step
    total: np.ndarray = field(default=None)  # per-behavior totals so far
    cum_reward: float = 0.0


class StepOutcome(NamedTuple):
    feedback: np.ndarray  # (l, k)
    next_state: np.ndarray
    session_continues: bool
    reward_total: float
    reward_components: np.ndarray
    latent: UserLatent  # latent after the step


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def encode_state(latent: UserLatent, config: EnvConfig) -> np.ndarray:
    """Deterministic state features for a user latent.

    Layout: preference (8) | per behavior: mean per-step total so far and
    last-step total (2k) | fatigue | step / T | cumulative reward / 10 | zeros.
    """
    k = config.behavior_count
    scale = np.full(k, float(config.list_length))
    scale[0] = 2.0 * config.watch_time_scale
    mean = latent.total / max(latent.step_index, 1) / scale
    last = latent.last / scale
    state = np.zeros(config.state_dim)
    state[:PREFERENCE_DIMS] = latent.preference
    state[PREFERENCE_DIMS:PREFERENCE_DIMS + 2 * k] = np.column_stack([mean, last]).ravel()
    o = PREFERENCE_DIMS + 2 * k
    state[o] = latent.fatigue
    state[o + 1] = latent.step_index / config.max_session_length
    state[o + 2] = latent.cum_reward / 10.0
    return state


def fatigue_index(k: int) -> int:
    return PREFERENCE_DIMS + 2 * k


def step_index_position(k: int) -> int:
    return PREFERENCE_DIMS + 2 * k + 1


def reset_session(config: EnvConfig, rng: np.random.Generator) -> tuple[np.ndarray, UserLatent]:
    k = config.behavior_count
    latent = UserLatent(preference=rng.standard_normal(PREFERENCE_DIMS), last=np.zeros(k), total=np.zeros(k))
    return encode_state(latent, config), latent


def generate_candidates(latent: UserLatent, config: EnvConfig,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``(true_propensities, pred_scores)``, both ``(n, k)``.

    A fixed number of draws is consumed per call so candidate streams stay
    aligned across policies.
    """
    n, k = config.candidates_per_request, config.behavior_count
    items = rng.standard_normal((n, PREFERENCE_DIMS))
    length = rng.standard_normal(n)
    idio = rng.standard_normal((n, k))
    pred_noise = rng.standard_normal((n, k))
    affinity = items @ latent.preference / np.sqrt(PREFERENCE_DIMS)
    loading = np.asarray(config.length_loading).copy()
    loading[0] += config.length_taste * np.tanh(latent.preference[0])
    logits = (np.asarray(config.base_logits) + np.asarray(config.affinity_scale) * affinity[:, None]
              + loading * length[:, None] + config.item_noise_std * idio)
    true = _sigmoid(logits)
    pred = np.clip(true + config.prediction_noise_std * pred_noise, 1e-6, 1.0)
    return true, pred


def update_fatigue(fatigue: float, total_watch: float, config: EnvConfig) -> float:
    return config.fatigue_decay * fatigue + config.fatigue_gain * total_watch


def continuation_probability(fatigue: float, reward: float, config: EnvConfig) -> float:
    a0, a1, a2 = config.continuation_logits
    return float(_sigmoid(a0 + a1 * reward / config.reward_scale - a2 * fatigue))


def sample_feedback(props: np.ndarray, config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Watch seconds are exponential with mean ``scale * p``; indicators are Bernoulli."""
    l = props.shape[0]
    watch = rng.exponential(size=l) * config.watch_time_scale * props[:, 0]
    flags = (rng.random((l, props.shape[1] - 1)) < props[:, 1:]).astype(float)
    return np.column_stack([watch, flags])


def apply_feedback(latent: UserLatent, feedback: np.ndarray, reward: float,
                   config: EnvConfig) -> UserLatent:
    """Pure state transition given the sampled feedback."""
    totals = feedback.sum(axis=0)
    return UserLatent(
        preference=latent.preference,
        fatigue=update_fatigue(latent.fatigue, float(totals[0]), config),
        step_index=latent.step_index + 1,
        last=totals,
        total=latent.total + totals,
        cum_reward=latent.cum_reward + reward,
    )


def step_session(latent: UserLatent, shown: np.ndarray, true_props: np.ndarray, config: EnvConfig,
                 reward_config: RewardConfig, rng: np.random.Generator) -> StepOutcome:
    shown = np.asarray(shown)
    if shown.shape != (config.list_length,):
        raise ContractViolation(f"expected {config.list_length} shown items, got {shown.shape}")
    feedback = sample_feedback(true_props[shown], config, rng)
    total, components = instant_reward(feedback, reward_config)
    u = rng.random()
    nxt = apply_feedback(latent, feedback, total, config)
    p = continuation_probability(nxt.fatigue, total, config)
    continues = bool(u < p) and nxt.step_index < config.max_session_length
    return StepOutcome(feedback, encode_state(nxt, config), continues, total, components, nxt)


# policy_fn(state, streams) -> (served action, behavior metadata)
PolicyFn = Callable[[np.ndarray, SessionStreams], tuple[np.ndarray, BehaviorMeta]]


@dataclass(frozen=True)
class SynthRec:
    config: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        self.config.validate()
        if self.reward.k != self.config.behavior_count:
            raise ConfigError("reward.weights", "needs one weight per behavior")

    def with_seed(self, seed: int) -> "SynthRec":
        return SynthRec(replace(self.config, seed=seed), self.reward)

    def run_session(self, policy_fn: PolicyFn, streams: SessionStreams, session_id: str,
                    user_id: str | None = None, round_id: int = 0,
                    record_impressions: bool = True) -> SessionTrajectory:
        cfg = self.config
        state, latent = reset_session(cfg, streams.user)
        transitions = []
        watch = valid = 0.0
        while True:
            action, meta = policy_fn(state, streams)
            true, pred = generate_candidates(latent, cfg, streams.candidates)
            shown = rank_candidates(pred, action, cfg.list_length)
            out = step_session(latent, shown, true, cfg, self.reward, streams.feedback)
            watch += float(out.feedback[:, 0].sum())
            valid += float(out.feedback[:, 1].sum())
            transitions.append(Transition(
                state=state, action=np.asarray(action, dtype=float), reward_components=out.reward_components,
                reward_total=out.reward_total, next_state=out.next_state, terminal=not out.session_continues,
                behavior_meta=meta,
                pred_scores=pred[shown] if record_impressions else None,
                feedback=out.feedback if record_impressions else None,
            ))
            if not out.session_continues:
                break
            state, latent = out.next_state, out.latent
        traj = SessionTrajectory(transitions, session_id, user_id or session_id, round_id)
        traj.info.update(watch_time=watch, valid_consumption=valid, length=float(len(transitions)))
        return traj
