"""Offline and online evaluation of fusion policies.

* NCIS: clipped, self-normalized per-session importance weighting of logged
  returns, with the deterministic target policy smoothed into a box kernel.
* MTF-GAUC: impression-weighted mean over users of a per-user AUC in which
  every item carries its instant-reward weight.
* A/B rollout: greedy simulation of each policy on paired user streams.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import rng as rngmod
from .core import RewardConfig, fuse_score, item_rewards
from .errors import ConfigError, ContractViolation, DegenerateEstimateError, UndefinedMetricError
from .orchestrator import Dataset

# -- NCIS ---------------------------------------------------------------------


@dataclass(frozen=True)
class NcisConfig:
    clip: float = 10.0  # per-step ratio cap, also the per-session weight cap
    smoothing_width: float = 0.3  # side length of the target-policy box kernel

    def validate(self, path: str = "evaluation.ncis") -> None:
        if not self.clip > 0:
            raise ConfigError(f"{path}.clip", "must be > 0")
        if not self.smoothing_width > 0:
            raise ConfigError(f"{path}.smoothing_width", "must be > 0")


@dataclass
class NcisResult:
    estimate: float
    weights: np.ndarray  # per-session weights before normalization
    returns: np.ndarray
    effective_sample_size: float


def behavior_density(actions: np.ndarray, metas: list) -> np.ndarray:
    """Per-dimension density of the logging policy at the logged actions.

    Clamping to the legal range puts point masses on its edges; this uses the
    unclamped density everywhere, which is exact for interior actions.
    """
    out = np.empty_like(actions)
    for i, (a, m) in enumerate(zip(actions, metas)):
        base = m.baseline_action
        if m.variant == "bounded":
            width = m.upper - m.lower
            inside = (a >= base + m.lower - 1e-12) & (a <= base + m.upper + 1e-12)
            out[i] = np.where(inside, 1.0 / width, 0.0)
        elif m.variant == "gaussian":
            z = (a - base) / m.gauss_std
            out[i] = np.exp(-0.5 * z * z) / (m.gauss_std * math.sqrt(2.0 * math.pi))
        else:
            raise ContractViolation("NCIS needs a stochastic logging policy")
    return out


def step_ratios(target_actions: np.ndarray, logged: np.ndarray, metas: list, cfg: NcisConfig) -> np.ndarray:
    """Clipped target/behavior density ratio per logged step."""
    half = cfg.smoothing_width / 2.0
    target = np.where(np.abs(logged - target_actions) <= half + 1e-12, 1.0 / cfg.smoothing_width, 0.0)
    behavior = behavior_density(logged, metas)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_dim = np.where(target == 0.0, 0.0, target / behavior)
    return np.clip(np.prod(per_dim, axis=1), 0.0, cfg.clip)


def session_weights(dataset: Dataset, policy, cfg: NcisConfig) -> np.ndarray:
    weights = np.empty(len(dataset.trajectories))
    for j, traj in enumerate(dataset.trajectories):
        states = np.array([t.state for t in traj.transitions])
        logged = np.array([t.action for t in traj.transitions])
        metas = [t.behavior_meta for t in traj.transitions]
        rho = step_ratios(policy.act(states), logged, metas, cfg)
        weights[j] = min(float(np.prod(rho)), cfg.clip)
    return weights


def ncis_from_weights(weights: np.ndarray, returns: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not total > 0:
        raise DegenerateEstimateError("all importance weights are zero")
    return float(weights @ np.asarray(returns, dtype=float) / total)


def ncis_estimate(dataset: Dataset | list[Dataset], policy, gamma: float = 0.9,
                  config: NcisConfig = NcisConfig(), critic_returns: bool = False) -> NcisResult:
    """Self-normalized clipped importance-sampling estimate of the session return.

    With ``critic_returns`` each session's logged return is replaced by the
    policy's own critic estimate at the session's first state.
    """
    config.validate()
    datasets = [dataset] if isinstance(dataset, Dataset) else list(dataset)
    weights = np.concatenate([session_weights(ds, policy, config) for ds in datasets])
    if critic_returns:
        if not hasattr(policy, "estimated_return"):
            raise ContractViolation("critic-estimated returns need a policy with critics")
        first = np.array([t.transitions[0].state for ds in datasets for t in ds.trajectories])
        returns = policy.estimated_return(first)
    else:
        returns = np.array([t.session_return(gamma) for ds in datasets for t in ds.trajectories])
    est = ncis_from_weights(weights, returns)
    ess = float(weights.sum() ** 2 / np.sum(weights**2))
    return NcisResult(est, weights, returns, ess)


# -- MTF-GAUC -----------------------------------------------------------------


def weighted_auc(labels: np.ndarray, scores: np.ndarray, weights: np.ndarray) -> float | None:
    """AUC where a (positive, negative) pair counts ``w_pos * w_neg``; ties count half.

    Returns None when there is no pair of positive weight.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    uniq, inv = np.unique(scores, return_inverse=True)
    pos = np.bincount(inv, weights=np.where(labels, weights, 0.0), minlength=len(uniq))
    neg = np.bincount(inv, weights=np.where(labels, 0.0, weights), minlength=len(uniq))
    denom = pos.sum() * neg.sum()
    if not denom > 0:
        return None
    neg_below = np.cumsum(neg) - neg
    return float(np.sum(pos * (neg_below + 0.5 * neg)) / denom)


@dataclass
class ImpressionRecords:
    user_ids: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _minmax_by_user(user_ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    for u in np.unique(user_ids):
        sel = user_ids == u
        v = values[sel]
        lo, hi = v.min(), v.max()
        out[sel] = (v - lo) / (hi - lo) if hi > lo else 0.5
    return out


def impression_records(dataset: Dataset | list[Dataset], policy, reward: RewardConfig,
                       label_index: int = 1) -> ImpressionRecords:
    """Score every logged impression with ``policy``'s fusion weights.

    Labels are the valid-consumption indicator; weights are the per-item
    instant rewards; fused scores are min-max normalized within each user.
    """
    datasets = [dataset] if isinstance(dataset, Dataset) else list(dataset)
    users, labels, preds, weights = [], [], [], []
    for ds in datasets:
        for traj in ds.trajectories:
            steps = [t for t in traj.transitions if t.pred_scores is not None]
            if not steps:
                continue
            actions = policy.act(np.array([t.state for t in steps]))
            for t, a in zip(steps, actions):
                preds.append(fuse_score(t.pred_scores, a))
                labels.append(t.feedback[:, label_index] > 0)
                weights.append(item_rewards(t.feedback, reward))
                users.append(np.full(len(t.feedback), traj.user_id, dtype=object))
    if not labels:
        raise UndefinedMetricError("dataset carries no impression records")
    users = np.concatenate(users)
    return ImpressionRecords(users, np.concatenate(labels), _minmax_by_user(users, np.concatenate(preds)),
                             np.concatenate(weights))


def mtf_gauc(records: ImpressionRecords) -> float:
    """Impression-count-weighted mean of per-user weighted AUCs.

    Users whose impressions are all positive or all negative are skipped.
    """
    num = den = 0.0
    order = np.argsort(records.user_ids, kind="stable")
    users = records.user_ids[order]
    bounds = np.flatnonzero(users[1:] != users[:-1]) + 1
    for sel in np.split(order, bounds):
        auc = weighted_auc(records.labels[sel], records.predictions[sel], records.weights[sel])
        if auc is None:
            continue
        num += len(sel) * auc
        den += len(sel)
    if den == 0:
        raise UndefinedMetricError("every user group is single-class")
    return num / den


def mtf_gauc_for(dataset: Dataset | list[Dataset], policy, reward: RewardConfig) -> float:
    return mtf_gauc(impression_records(dataset, policy, reward))


# -- A/B rollout ----------------------------------------------------------------


@dataclass
class RolloutResult:
    returns: np.ndarray
    valid_consumption: np.ndarray
    watch_time: np.ndarray
    lengths: np.ndarray

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())


def rollout(policy, env, sessions: int, seed: int, gamma: float | None = None) -> RolloutResult:
    """Greedy sessions; session ``i`` uses the same user and feedback streams for every policy."""
    from .core import BehaviorMeta

    gamma = env.reward.discount if gamma is None else gamma
    meta = BehaviorMeta("none", None, None, None, None)

    def act(state, _streams):
        return policy.act(state[None, :])[0], meta

    res = [env.run_session(act, rngmod.SessionStreams(seed, rngmod.EVALUATE, i), f"eval-{i:06d}",
                           record_impressions=False) for i in range(sessions)]
    return RolloutResult(
        returns=np.array([t.session_return(gamma) for t in res]),
        valid_consumption=np.array([t.info["valid_consumption"] for t in res]),
        watch_time=np.array([t.info["watch_time"] for t in res]),
        lengths=np.array([t.info["length"] for t in res]),
    )


def bootstrap_ci(values: np.ndarray, rng: np.random.Generator, resamples: int = 1000,
                 level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    idx = rng.integers(0, len(values), size=(resamples, len(values)))
    means = values[idx].mean(axis=1)
    a = (1.0 - level) / 2.0
    return float(np.quantile(means, a)), float(np.quantile(means, 1.0 - a))


REPORT_COLUMNS = ("checkpoint", "ncis", "mtf_gauc", "rollout_return", "uvc", "udt", "ci_low", "ci_high", "sessions")


@dataclass
class ReportRow:
    checkpoint: str
    ncis: float | None = None
    mtf_gauc: float | None = None
    rollout_return: float | None = None
    uvc: float | None = None  # mean valid consumptions per session
    udt: float | None = None  # mean watch seconds per session
    ci_low: float | None = None
    ci_high: float | None = None
    sessions: int | None = None

    def summary(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None and k != "checkpoint"}


@dataclass
class EvaluationReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, checkpoint: str) -> ReportRow:
        for r in self.rows:
            if r.checkpoint == checkpoint:
                return r
        raise KeyError(checkpoint)

    def to_dict(self) -> dict[str, Any]:
        return {"format": "fuserl-report/1", "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvaluationReport":
        return cls([ReportRow(**r) for r in d["rows"]])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read_json(cls, path: str | Path) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in REPORT_COLUMNS])


def ab_rollout(policies: dict[str, Any], env, sessions: int, seed: int, resamples: int = 1000) -> EvaluationReport:
    if sessions < 100:
        raise ContractViolation("online evaluation needs at least 100 sessions")
    report = EvaluationReport()
    for name, policy in policies.items():
        res = rollout(policy, env, sessions, seed)
        lo, hi = bootstrap_ci(res.returns, rngmod.substream(seed, rngmod.BOOTSTRAP), resamples)
        report.rows.append(ReportRow(name, rollout_return=res.mean_return,
                                     uvc=float(res.valid_consumption.mean()), udt=float(res.watch_time.mean()),
                                     ci_low=lo, ci_high=hi, sessions=sessions))
    return report


def evaluate_checkpoints(policies: dict[str, Any], env, seed: int, datasets: list[Dataset] | None = None,
                         sessions: int = 0, ncis: NcisConfig = NcisConfig(), critic_returns: bool = False,
                         resamples: int = 1000) -> EvaluationReport:
    """Fill every available metric for each named policy.

    Metrics that are undefined for a policy (zero importance weight, no
    two-class user group) are left empty.
    """
    report = ab_rollout(policies, env, sessions, seed, resamples) if sessions else \
        EvaluationReport([ReportRow(name) for name in policies])
    if datasets:
        for row in report.rows:
            policy = policies[row.checkpoint]
            try:
                row.ncis = ncis_estimate(datasets, policy, env.reward.discount, ncis, critic_returns).estimate
            except DegenerateEstimateError:
                row.ncis = None
            try:
                row.mtf_gauc = mtf_gauc_for(datasets, policy, env.reward)
            except UndefinedMetricError:
                row.mtf_gauc = None
    return report
