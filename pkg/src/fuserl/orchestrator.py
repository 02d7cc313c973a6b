"""Dataset collection, replay flattening, offline training and progressive rounds."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import rng as rngmod
from .agent import (AgentConfig, AgentVariant, ConstantPolicy, TransitionBatch, check_policy_dims, make_agent,
                    save_checkpoint)
from .core import BehaviorMeta, SessionTrajectory
from .env import SynthRec
from .errors import ConfigError, ContractViolation, DataIntegrityError
from .exploration import ExplorationSpec, explore

log = logging.getLogger(__name__)

DATASET_FORMAT = "fuserl-dataset/1"


def initial_action(k: int = 5, power: float = 0.5) -> np.ndarray:
    """Hand-set round-0 action: equal powers, zero biases.

    Scaling every power by the same positive factor maps fused scores through
    a monotone power and leaves the ranking unchanged, so this ranks exactly
    like all-ones powers while sitting inside the legal range.
    """
    return np.r_[np.full(k, power), np.zeros(k)]


def initial_policy(env: SynthRec) -> ConstantPolicy:
    return ConstantPolicy(initial_action(env.config.behavior_count), env.config.state_dim)


@dataclass
class Dataset:
    trajectories: list[SessionTrajectory]
    descriptor: dict[str, Any]
    round_id: int = 0
    seed: int = 0

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def validate(self, max_length: int | None = None) -> None:
        variant = self.descriptor["variant"]
        for traj in self.trajectories:
            traj.validate(max_length)
            for t in traj.transitions:
                m = t.behavior_meta
                if m.variant != variant or m.lower != self.descriptor.get("lower") \
                        or m.upper != self.descriptor.get("upper") \
                        or m.gauss_std != self.descriptor.get("gauss_std"):
                    raise DataIntegrityError(f"session {traj.session_id}: behavior metadata disagrees with dataset descriptor")


def exploration_descriptor(spec: ExplorationSpec, policy_id: str) -> dict[str, Any]:
    return {
        "variant": spec.variant,
        "lower": spec.lower if spec.variant == "bounded" else None,
        "upper": spec.upper if spec.variant == "bounded" else None,
        "gauss_std": spec.gauss_std if spec.variant == "gaussian" else None,
        "baseline_checkpoint": policy_id,
    }


class _ExploringPolicy:
    """Serves ``explore(baseline(s))`` and records the behavior metadata."""

    def __init__(self, policy, spec: ExplorationSpec):
        self.policy = policy
        self.spec = spec

    def __call__(self, state, streams):
        baseline = self.policy.act(state[None, :])[0]
        action = explore(self.spec, baseline, streams.explore)
        d = exploration_descriptor(self.spec, "")
        return action, BehaviorMeta(self.spec.variant, baseline, d["lower"], d["upper"], d["gauss_std"])


def _collect_chunk(args) -> list[SessionTrajectory]:
    env, policy, spec, seed, round_id, indices, prefix = args
    fn = _ExploringPolicy(policy, spec)
    out = []
    for i in indices:
        streams = rngmod.SessionStreams(seed, rngmod.COLLECT, round_id, i)
        out.append(env.run_session(fn, streams, f"{prefix}r{round_id}-s{i:06d}", round_id=round_id))
    return out


def collect_dataset(policy, exploration: ExplorationSpec, num_sessions: int, env: SynthRec, seed: int,
                    round_id: int = 0, policy_id: str = "initial", workers: int = 1) -> Dataset:
    """Simulate ``num_sessions`` sessions served by ``explore(policy(s))``.

    Session ``i`` draws from its own substreams keyed by ``(seed, round, i)``,
    so results do not depend on ``workers``.
    """
    if num_sessions < 1:
        raise ContractViolation("num_sessions must be >= 1")
    exploration.validate()
    check_policy_dims(policy, env.config.state_dim, env.config.action_dim)
    indices = list(range(num_sessions))
    if workers <= 1:
        trajectories = _collect_chunk((env, policy, exploration, seed, round_id, indices, ""))
    else:
        chunks = [indices[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_collect_chunk, [(env, policy, exploration, seed, round_id, c, "") for c in chunks]))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        trajectories = [by_index[i] for i in indices]
    ds = Dataset(trajectories, exploration_descriptor(exploration, policy_id), round_id, seed)
    log.info("collected %d sessions / %d transitions (round %d, %s)", num_sessions, ds.n_transitions,
             round_id, exploration.variant)
    return ds


# -- dataset files ------------------------------------------------------------

def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def dataset_bytes(dataset: Dataset) -> bytes:
    lines = [json.dumps(t.to_dict(), separators=(",", ":")) for t in dataset.trajectories]
    return ("\n".join(lines) + "\n").encode()


def write_dataset(dataset: Dataset, path: str | Path) -> dict[str, Any]:
    """Write JSON-lines sessions plus a sidecar manifest; returns the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dataset_bytes(dataset)
    path.write_bytes(data)
    manifest = {
        "format": DATASET_FORMAT,
        "file": path.name,
        "sessions": len(dataset.trajectories),
        "transitions": dataset.n_transitions,
        "seed": dataset.seed,
        "roundId": dataset.round_id,
        "policy": dataset.descriptor,
        "sha256": sha256_bytes(data),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(path: str | Path, verify: bool = True) -> Dataset:
    path = Path(path)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataIntegrityError(f"{mpath}: unrecognized dataset format")
    data = path.read_bytes()
    if verify and sha256_bytes(data) != manifest["sha256"]:
        raise DataIntegrityError(f"{path}: content hash does not match manifest")
    try:
        trajectories = [SessionTrajectory.from_dict(json.loads(line)) for line in data.decode().splitlines() if line]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataIntegrityError(f"{path}: malformed session record ({exc})") from exc
    if len(trajectories) != manifest["sessions"]:
        raise DataIntegrityError(f"{path}: {len(trajectories)} sessions, manifest says {manifest['sessions']}")
    ds = Dataset(trajectories, manifest["policy"], manifest["roundId"], manifest["seed"])
    if ds.n_transitions != manifest["transitions"]:
        raise DataIntegrityError(f"{path}: {ds.n_transitions} transitions, manifest says {manifest['transitions']}")
    if verify:
        ds.validate()
    return ds


# -- replay -------------------------------------------------------------------

def flatten(datasets: Dataset | list[Dataset], lower: float = -0.15, upper: float = 0.15) -> TransitionBatch:
    """Flatten sessions into a transition pool.

    The next-state baseline action comes from the following logged step;
    transitions without box offsets in their metadata get ``lower``/``upper``.
    """
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    rows = []
    for ds in datasets:
        for traj in ds.trajectories:
            ts = traj.transitions
            for i, t in enumerate(ts):
                nxt = ts[i + 1].behavior_meta.baseline_action if i + 1 < len(ts) else t.behavior_meta.baseline_action
                m = t.behavior_meta
                rows.append((t.state, t.action, t.reward_components, t.next_state, t.terminal,
                             m.baseline_action, nxt,
                             lower if m.lower is None else m.lower, upper if m.upper is None else m.upper))
    if not rows:
        raise ContractViolation("no transitions to flatten")
    cols = list(zip(*rows))
    return TransitionBatch(
        states=np.array(cols[0]), actions=np.array(cols[1]), rewards=np.array(cols[2]),
        next_states=np.array(cols[3]), terminal=np.array(cols[4], dtype=bool),
        baseline=np.array(cols[5]), next_baseline=np.array(cols[6]),
        lower=np.array(cols[7], dtype=float), upper=np.array(cols[8], dtype=float),
    )


class EpochSampler:
    """Shuffled mini-batches; every transition is visited once per epoch.

    The final batch of an epoch is topped up from the start of the same
    permutation so all batches have the configured size.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if not 0 < batch_size <= n:
            raise ContractViolation(f"batch size {batch_size} exceeds the {n} available transitions")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.epoch = 0
        self._perm = None
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        if self._perm is None or self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        if len(idx) < self.batch_size:
            idx = np.concatenate([idx, self._perm[:self.batch_size - len(idx)]])
        return idx


LOG_FIELDS = ("step", "actor_loss", "mean_td", "mean_gate", "mean_penalty")


@dataclass
class TrainResult:
    agent: Any
    log: list[dict[str, float]] = field(default_factory=list)


def train_offline(datasets: Dataset | list[Dataset], variant: AgentVariant | str, config: AgentConfig,
                  steps: int, batch_size: int, seed: int, log_interval: int = 100, agent=None) -> TrainResult:
    """Run ``steps`` gradient steps on shuffled mini-batches of the pool.

    ``agent`` continues training an existing agent (warm start); otherwise a
    fresh one is initialized from ``config``.
    """
    if steps < 0:
        raise ContractViolation("steps must be >= 0")
    if agent is None:
        agent = make_agent(variant, config)
    pool = flatten(datasets, agent.config.lower, agent.config.upper)
    sampler = EpochSampler(len(pool), batch_size, rngmod.substream(seed, rngmod.MINIBATCH))
    rows, acc = [], []
    for step in range(1, steps + 1):
        diag = agent.train_step(pool.take(next(sampler)))
        acc.append([diag[f] for f in LOG_FIELDS[1:]])
        if log_interval and step % log_interval == 0:
            rows.append({"step": step, **dict(zip(LOG_FIELDS[1:], np.mean(acc, axis=0).tolist()))})
            acc = []
            log.debug("step %d %s", step, rows[-1])
    return TrainResult(agent, rows)


def write_train_log(rows: list[dict[str, float]], path: str | Path) -> None:
    lines = [",".join(LOG_FIELDS)]
    lines += [",".join(repr(r[f]) if f != "step" else str(r[f]) for f in LOG_FIELDS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# -- progressive training -----------------------------------------------------

@dataclass(frozen=True)
class ProgressiveSchedule:
    rounds: int = 5
    sessions_per_round: int = 1000
    steps_per_round: int = 20000
    pool_rounds: bool = False  # train on all datasets so far instead of the latest only
    warm_start: bool = True
    eval_sessions: int = 200

    def validate(self, path: str = "progressive") -> None:
        if self.rounds < 1:
            raise ConfigError(f"{path}.rounds", "must be >= 1")
        if self.sessions_per_round < 1:
            raise ConfigError(f"{path}.sessions_per_round", "must be >= 1")
        if self.steps_per_round < 0:
            raise ConfigError(f"{path}.steps_per_round", "must be >= 0")
        if self.eval_sessions and self.eval_sessions < 100:
            raise ConfigError(f"{path}.eval_sessions", "must be 0 or >= 100")


@dataclass
class LineageEntry:
    round_id: int
    checkpoint_id: str
    dataset_id: str | None
    baseline_checkpoint_id: str | None
    evaluation: dict[str, Any] = field(default_factory=dict)
    checkpoint_sha256: str | None = None
    dataset_sha256: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"roundId": self.round_id, "checkpointId": self.checkpoint_id, "datasetId": self.dataset_id,
                "baselineCheckpointId": self.baseline_checkpoint_id, "evaluation": self.evaluation,
                "checkpointSha256": self.checkpoint_sha256, "datasetSha256": self.dataset_sha256}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LineageEntry":
        return cls(d["roundId"], d["checkpointId"], d["datasetId"], d["baselineCheckpointId"],
                   d.get("evaluation", {}), d.get("checkpointSha256"), d.get("datasetSha256"))


@dataclass
class CheckpointLineage:
    entries: list[LineageEntry] = field(default_factory=list)
    status: str = "running"
    # in-memory artifacts, index r = round r (0 = initial policy)
    policies: list[Any] = field(default_factory=list, repr=False)
    datasets: list[Dataset] = field(default_factory=list, repr=False)
    logs: list[list[dict[str, float]]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def check(self) -> None:
        """Round ``r`` must have been collected with round ``r-1``'s checkpoint."""
        prev = "round0"
        for e in self.entries:
            if e.baseline_checkpoint_id != prev:
                raise DataIntegrityError(f"round {e.round_id} baseline {e.baseline_checkpoint_id} != {prev}")
            prev = e.checkpoint_id

    def to_dict(self) -> dict[str, Any]:
        return {"format": "fuserl-lineage/1", "status": self.status,
                "rounds": [e.to_dict() for e in self.entries]}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "CheckpointLineage":
        d = json.loads(Path(path).read_text())
        return cls([LineageEntry.from_dict(e) for e in d["rounds"]], d.get("status", "unknown"))


def run_progressive(schedule: ProgressiveSchedule, initial, env: SynthRec, agent_config: AgentConfig,
                    exploration: ExplorationSpec, seed: int, batch_size: int = 256,
                    variant: AgentVariant | str = AgentVariant.UNIFIED, out_dir: str | Path | None = None,
                    log_interval: int = 100, workers: int = 1) -> CheckpointLineage:
    """Alternate exploration around the latest policy and offline training.

    With ``out_dir`` every round writes ``round_<r>/{dataset.jsonl,
    checkpoint.json, train_log.csv}`` and ``lineage.json`` is rewritten after
    each round, so a failure leaves the completed rounds on disk.
    """
    from .evaluation import ab_rollout

    schedule.validate()
    out = Path(out_dir) if out_dir is not None else None
    lineage = CheckpointLineage(policies=[initial])
    if out is not None:
        save_checkpoint(initial, out / "round_0" / "checkpoint.json")
    agent = None
    try:
        for r in range(1, schedule.rounds + 1):
            baseline = lineage.policies[-1]
            ds = collect_dataset(baseline, exploration, schedule.sessions_per_round, env, seed,
                                 round_id=r, policy_id=f"round{r - 1}", workers=workers)
            lineage.datasets.append(ds)
            train_on = lineage.datasets if schedule.pool_rounds else ds
            warm = agent if (schedule.warm_start and agent is not None) else None
            result = train_offline(train_on, variant, agent_config, schedule.steps_per_round, batch_size,
                                   seed=int(rngmod.substream(seed, rngmod.MINIBATCH, r).integers(2**62)),
                                   log_interval=log_interval, agent=warm)
            agent = result.agent
            snapshot = _snapshot(agent)
            lineage.policies.append(snapshot)
            lineage.logs.append(result.log)
            evaluation = {}
            if schedule.eval_sessions:
                rep = ab_rollout({f"round{r}": snapshot}, env, schedule.eval_sessions, seed)
                evaluation = rep.rows[0].summary()
            entry = LineageEntry(r, f"round{r}", f"round_{r}/dataset.jsonl", f"round{r - 1}", evaluation)
            if out is not None:
                rdir = out / f"round_{r}"
                entry.dataset_sha256 = write_dataset(ds, rdir / "dataset.jsonl")["sha256"]
                entry.checkpoint_sha256 = sha256_file(save_checkpoint(snapshot, rdir / "checkpoint.json"))
                write_train_log(result.log, rdir / "train_log.csv")
            lineage.entries.append(entry)
            if out is not None:
                lineage.write(out / "lineage.json")
            log.info("round %d done: %s", r, evaluation)
    except Exception:
        lineage.status = "failed"
        if out is not None:
            lineage.write(out / "lineage.json")
        raise
    lineage.status = "complete"
    if out is not None:
        lineage.write(out / "lineage.json")
    return lineage


def _snapshot(agent):
    """Independent copy of an agent, so later warm-started rounds do not mutate it."""
    from .agent import checkpoint_from_dict
    return checkpoint_from_dict(json.loads(json.dumps(agent.to_dict())))
