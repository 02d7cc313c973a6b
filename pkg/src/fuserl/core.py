"""Fusion formula, rewards and the shared state/action/trajectory data model.

Conventions used throughout the package:

* a *state* is a float vector of length ``F``;
* a *fusion action* is a float vector of length ``2k`` laid out as
  ``[power_1..power_k, bias_1..bias_k]``;
* predicted scores for a candidate list are an ``(n, k)`` array, behavior
  feedback for a shown list is an ``(l, k)`` array.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, ContractViolation, DataIntegrityError

BEHAVIORS = ("watch_time", "valid_consumption", "like", "share", "finish")
BASE_FLOOR = 1e-6


def split_action(action: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    action = np.asarray(action, dtype=float)
    if action.shape[-1] != 2 * k:
        raise ContractViolation(f"action has {action.shape[-1]} dims, expected 2k={2 * k}")
    return action[..., :k], action[..., k:]


def fuse_score(scores: np.ndarray, action: np.ndarray) -> np.ndarray | float:
    """Fused ranking score ``prod_i (score_i + bias_i) ** power_i``.

    ``scores`` may be a single ``(k,)`` vector or an ``(n, k)`` candidate
    matrix.  Bases are floored at ``1e-6`` so fractional or negative powers
    stay real when a bias pushes a base to or below zero.
    """
    scores = np.asarray(scores, dtype=float)
    k = scores.shape[-1]
    powers, biases = split_action(action, k)
    base = np.maximum(scores + biases, BASE_FLOOR)
    fused = np.prod(base**powers, axis=-1)
    return float(fused) if fused.ndim == 0 else fused


def rank_candidates(candidates: np.ndarray, action: np.ndarray, list_length: int) -> np.ndarray:
    """Indices of the ``list_length`` best candidates, best first.

    Ties go to the lower candidate index.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 2:
        raise ContractViolation("candidates must be an (n, k) array")
    if not 0 < list_length <= candidates.shape[0]:
        raise ContractViolation(
            f"list length {list_length} exceeds the {candidates.shape[0]} candidates"
        )
    fused = fuse_score(candidates, action)
    order = np.lexsort((np.arange(len(fused)), -fused))
    return order[:list_length]


@dataclass(frozen=True)
class RewardConfig:
    """Behavior weights, the grouping of behaviors into critic sets, and gamma.

    ``weights[0]`` is per second of watch time, the rest are per event.
    """

    weights: tuple[float, ...] = (0.02, 1.0, 0.5, 0.8, 0.3)
    groups: tuple[tuple[int, ...], ...] = ((0,), (1, 2, 3, 4))
    discount: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        self.validate()

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def q(self) -> int:
        return len(self.groups)

    def validate(self, path: str = "reward") -> None:
        if any(w < 0 or not np.isfinite(w) for w in self.weights):
            raise ConfigError(f"{path}.weights", "weights must be finite and nonnegative")
        members = sorted(i for g in self.groups for i in g)
        if members != list(range(self.k)) or any(len(g) == 0 for g in self.groups):
            raise ConfigError(
                f"{path}.groups", f"groups must partition behaviors 0..{self.k - 1} exactly once"
            )
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError(f"{path}.discount", "discount must lie in [0, 1]")

    def group_matrix(self) -> np.ndarray:
        """``(k, q)`` 0/1 matrix mapping behaviors to their group."""
        m = np.zeros((self.k, self.q))
        for gi, group in enumerate(self.groups):
            m[list(group), gi] = 1.0
        return m


def instant_reward(feedback: np.ndarray, config: RewardConfig) -> tuple[float, np.ndarray]:
    """List-level reward and its per-group components.

    Returns ``(total, components)`` where ``components[g]`` sums
    ``w_i * v_ij`` over items ``j`` and behaviors ``i`` in group ``g``.
    """
    feedback = np.atleast_2d(np.asarray(feedback, dtype=float))
    if feedback.shape[-1] != config.k:
        raise ContractViolation(f"feedback has {feedback.shape[-1]} behaviors, expected {config.k}")
    per_behavior = feedback.sum(axis=0) * np.asarray(config.weights)
    components = per_behavior @ config.group_matrix()
    return float(components.sum()), components


def item_rewards(feedback: np.ndarray, config: RewardConfig) -> np.ndarray:
    """Per-item reward ``sum_i w_i * v_ij`` for each shown item ``j``."""
    feedback = np.atleast_2d(np.asarray(feedback, dtype=float))
    return feedback @ np.asarray(config.weights)


def discounted_return(rewards: Sequence[float], gamma: float, start: int = 0) -> float:
    rewards = np.asarray(rewards, dtype=float)
    if not 0 <= start < len(rewards):
        raise ContractViolation(f"step {start} outside trajectory of length {len(rewards)}")
    tail = rewards[start:]
    return float(np.sum(tail * gamma ** np.arange(len(tail))))


def cumulative_reward(trajectory: "SessionTrajectory", start: int, gamma: float) -> float:
    return discounted_return([t.reward_total for t in trajectory.transitions], gamma, start)


@dataclass(frozen=True)
class BehaviorMeta:
    """Snapshot of the exploration policy that served one logged action."""

    variant: str
    baseline_action: np.ndarray
    lower: float | None = None
    upper: float | None = None
    gauss_std: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "baselineAction": self.baseline_action.tolist(),
            "bl": self.lower,
            "bu": self.upper,
            "gaussStd": self.gauss_std,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BehaviorMeta":
        return cls(d["variant"], np.asarray(d["baselineAction"], dtype=float),
                   d.get("bl"), d.get("bu"), d.get("gaussStd"))


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward_components: np.ndarray
    reward_total: float
    next_state: np.ndarray
    terminal: bool
    behavior_meta: BehaviorMeta
    # predicted scores and feedback of the shown items, (l, k) each
    pred_scores: np.ndarray | None = None
    feedback: np.ndarray | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "state": self.state.tolist(),
            "action": self.action.tolist(),
            "rewardComponents": self.reward_components.tolist(),
            "rewardTotal": self.reward_total,
            "nextState": self.next_state.tolist(),
            "terminal": self.terminal,
            "behaviorMeta": self.behavior_meta.to_dict(),
        }
        if self.pred_scores is not None:
            d["impressions"] = {
                "predScores": self.pred_scores.tolist(),
                "feedback": self.feedback.tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Transition":
        imp = d.get("impressions")
        return cls(
            state=np.asarray(d["state"], dtype=float),
            action=np.asarray(d["action"], dtype=float),
            reward_components=np.asarray(d["rewardComponents"], dtype=float),
            reward_total=float(d["rewardTotal"]),
            next_state=np.asarray(d["nextState"], dtype=float),
            terminal=bool(d["terminal"]),
            behavior_meta=BehaviorMeta.from_dict(d["behaviorMeta"]),
            pred_scores=None if imp is None else np.asarray(imp["predScores"], dtype=float),
            feedback=None if imp is None else np.asarray(imp["feedback"], dtype=float),
        )


@dataclass
class SessionTrajectory:
    transitions: list[Transition]
    session_id: str
    user_id: str
    round_id: int = 0
    # not serialized; filled by the simulator for rollout statistics
    info: dict[str, float] = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward_total for t in self.transitions])

    def session_return(self, gamma: float) -> float:
        return discounted_return(self.rewards, gamma)

    def validate(self, max_length: int | None = None) -> None:
        if not self.transitions:
            raise DataIntegrityError(f"session {self.session_id} is empty")
        flags = [t.terminal for t in self.transitions]
        if not flags[-1] or any(flags[:-1]):
            raise DataIntegrityError(f"session {self.session_id}: exactly the last step must be terminal")
        if max_length is not None and len(self.transitions) > max_length:
            raise DataIntegrityError(f"session {self.session_id} longer than {max_length}")
        for t in self.transitions:
            if abs(t.reward_total - float(np.sum(t.reward_components))) > 1e-9:
                raise DataIntegrityError(f"session {self.session_id}: reward total != sum of components")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sessionId": self.session_id,
            "userId": self.user_id,
            "roundId": self.round_id,
            "transitions": [t.to_dict() for t in self.transitions],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SessionTrajectory":
        return cls(
            transitions=[Transition.from_dict(t) for t in d["transitions"]],
            session_id=d["sessionId"],
            user_id=d["userId"],
            round_id=int(d["roundId"]),
        )
