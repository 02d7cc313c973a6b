"""``fuserl`` command-line entry point.

Exit codes: 0 ok, 1 other failure, 2 invalid config, 3 I/O failure,
4 data integrity, 5 model mismatch, 6 missing artifacts.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import __version__
from .agent import check_policy_dims, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import FuserlError, MissingArtifactsError
from .evaluation import REPORT_COLUMNS, EvaluationReport, evaluate_checkpoints
from .exploration import ExplorationSpec
from .orchestrator import (collect_dataset, initial_policy, read_dataset, run_progressive, sha256_file,
                           train_offline, write_dataset, write_train_log)

log = logging.getLogger("fuserl")

EXIT_IO = 3
INITIAL = "initial"  # checkpoint argument naming the constant round-0 policy


def _setup_logging() -> None:
    level = os.environ.get("FUSERL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Config snapshot, tool version, wall-clock span and artifact hashes of one command."""

    def __init__(self, command: str, config: ExperimentConfig):
        self.data: dict[str, Any] = {"format": "fuserl-run/1", "command": command, "toolVersion": __version__,
                                     "config": config.to_dict(), "started": _now(), "artifacts": {}}

    def add(self, path: Path, root: Path) -> None:
        self.data["artifacts"][str(path.relative_to(root))] = sha256_file(path)

    def write(self, path: Path) -> None:
        self.data["finished"] = _now()
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def verify(path: Path) -> list[str]:
        """Artifacts whose current hash differs from the recorded one."""
        d = json.loads(path.read_text())
        root = path.parent
        return [p for p, h in d["artifacts"].items() if not (root / p).exists() or sha256_file(root / p) != h]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
        cfg.validate()
    return cfg


def _workers(args, cfg: ExperimentConfig) -> int:
    n = args.workers if args.workers is not None else cfg.workers
    return n or os.cpu_count() or 1


def _policy(path: str, cfg: ExperimentConfig):
    env = cfg.make_env()
    policy = initial_policy(env) if path == INITIAL else load_checkpoint(path)
    check_policy_dims(policy, env.config.state_dim, env.config.action_dim)
    return policy


# -- commands -------------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg = _load(args)
    env = cfg.make_env()
    policy = _policy(args.checkpoint, cfg)
    sessions = args.sessions or cfg.progressive.sessions_per_round
    policy_id = INITIAL if args.checkpoint == INITIAL else Path(args.checkpoint).stem
    ds = collect_dataset(policy, cfg.exploration, sessions, env, cfg.seed, round_id=args.round,
                         policy_id=policy_id, workers=_workers(args, cfg))
    out = Path(args.out)
    write_dataset(ds, out)
    run = RunManifest("collect", cfg)
    run.add(out, out.parent)
    run.add(out.with_name(out.name + ".manifest.json"), out.parent)
    run.write(out.with_name(out.name + ".run.json"))
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    datasets = [read_dataset(p) for p in args.dataset]
    steps = cfg.training.steps if args.steps is None else args.steps
    agent = None
    if args.init_checkpoint:
        agent = load_checkpoint(args.init_checkpoint)
    result = train_offline(datasets, cfg.agent_variant, cfg.agent_config(), steps, cfg.training.batch_size,
                           seed=cfg.seed, log_interval=cfg.training.log_interval, agent=agent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest("train", cfg)
    ckpt = save_checkpoint(result.agent, out / "checkpoint.json")
    write_train_log(result.log, out / "train_log.csv")
    run.add(ckpt, out)
    run.add(out / "train_log.csv", out)
    run.write(out / "run_manifest.json")
    print(ckpt)
    return 0


def cmd_progressive(args) -> int:
    cfg = _load(args)
    env = cfg.make_env()
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest("progressive", cfg)
    lineage = run_progressive(cfg.progressive, initial_policy(env), env, cfg.agent_config(), cfg.exploration,
                              cfg.seed, batch_size=cfg.training.batch_size, variant=cfg.agent_variant,
                              out_dir=out, log_interval=cfg.training.log_interval, workers=_workers(args, cfg))
    for path in sorted(out.glob("round_*/*")):
        run.add(path, out)
    run.add(out / "lineage.json", out)
    run.write(out / "run_manifest.json")
    print(f"{len(lineage)} rounds -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    env = cfg.make_env()
    policies = {}
    for path in args.checkpoints:
        name = INITIAL if path == INITIAL else _checkpoint_name(path)
        policies[name] = _policy(path, cfg)
    datasets = [read_dataset(p) for p in args.dataset] if args.dataset else None
    sessions = cfg.evaluation.rollout_sessions if args.sessions is None else args.sessions
    report = evaluate_checkpoints(policies, env, cfg.seed, datasets, sessions, cfg.evaluation.ncis,
                                  critic_returns=cfg.evaluation.ncis_returns == "critic",
                                  resamples=cfg.evaluation.bootstrap_resamples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    run = RunManifest("evaluate", cfg)
    run.add(out / "report.json", out)
    run.add(out / "report.csv", out)
    run.write(out / "run_manifest.json")
    print(out / "report.csv")
    return 0


def _checkpoint_name(path: str) -> str:
    """``runs/x/round_2/checkpoint.json`` -> ``round_2``; other files -> their stem."""
    p = Path(path)
    return p.parent.name if p.stem == "checkpoint" and p.parent.name else p.stem


METRICS = (("rollout_return", "Session return"), ("uvc", "UVC"), ("udt", "UDT"),
           ("ncis", "NCIS"), ("mtf_gauc", "MTF-GAUC"))


def percent_delta(value: float | None, baseline: float | None) -> str:
    if value is None or baseline is None or baseline == 0:
        return ""
    return f"{100.0 * (value - baseline) / abs(baseline):+.2f}%"


def _read_report_csv(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (r[k] if k == "checkpoint" else (float(r[k]) if r[k] != "" else None))
                         for k in REPORT_COLUMNS if k in r})
    return rows


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    csv_path = run_dir / "report.csv"
    missing = [str(p) for p in (csv_path, run_dir / "report.json") if not p.exists()]
    if missing:
        raise MissingArtifactsError(missing)
    rows = _read_report_csv(csv_path)
    if not rows:
        raise MissingArtifactsError([f"{csv_path} (no rows)"])
    names = [r["checkpoint"] for r in rows]
    base_name = args.baseline or (INITIAL if INITIAL in names else names[0])
    if base_name not in names:
        raise MissingArtifactsError([f"baseline row {base_name!r} in {csv_path}"])
    base = rows[names.index(base_name)]

    header = ["checkpoint"]
    for key, _ in METRICS:
        header += [key, f"{key}_delta"]
    table = []
    for r in rows:
        line = [r["checkpoint"]]
        for key, _ in METRICS:
            line += ["" if r.get(key) is None else f"{r[key]:.6g}", percent_delta(r.get(key), base.get(key))]
        table.append(line)
    with open(run_dir / "report_deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(table)

    md = [f"# fuserl report: {run_dir.name}", "", f"Deltas are relative to `{base_name}`.", ""]
    md.append("| checkpoint | " + " | ".join(f"{label} | Δ" for _, label in METRICS) + " |")
    md.append("|---|" + "---|---|" * len(METRICS))
    for line in table:
        md.append("| " + " | ".join(c or "-" for c in line) + " |")
    text = "\n".join(md) + "\n"
    (run_dir / "report.md").write_text(text)
    print(text, end="")
    return 0


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuserl", description="Offline RL for multi-task score fusion.")
    parser.add_argument("--version", action="version", version=f"fuserl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--workers", type=int, default=None, help="parallel workers (default: CPU cores)")

    p = sub.add_parser("collect", help="simulate sessions under an exploration policy")
    common(p)
    p.add_argument("--checkpoint", default=INITIAL, help="baseline policy (default: the constant round-0 policy)")
    p.add_argument("--sessions", type=int, default=None, help="session count (default: sessions_per_round)")
    p.add_argument("--round", type=int, default=1, help="round id recorded in the dataset")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="offline training on one or more datasets")
    common(p)
    p.add_argument("--dataset", action="append", required=True, help="dataset file (repeatable)")
    p.add_argument("--steps", type=int, default=None, help="gradient steps (default: training.steps)")
    p.add_argument("--init-checkpoint", default=None, help="continue training this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("progressive", help="alternate exploration and training for R rounds")
    common(p, out_required=False)
    p.set_defaults(func=cmd_progressive)

    p = sub.add_parser("evaluate", help="offline metrics and simulated A/B rollout")
    common(p)
    p.add_argument("checkpoints", nargs="+", help=f"checkpoint files, or {INITIAL!r}")
    p.add_argument("--dataset", action="append", default=None, help="logged dataset for NCIS / MTF-GAUC")
    p.add_argument("--sessions", type=int, default=None, help="rollout sessions per policy (0 disables)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="markdown and CSV comparison tables of an evaluated run")
    p.add_argument("run_dir")
    p.add_argument("--baseline", default=None, help="row the deltas are relative to")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FuserlError as exc:
        print(f"fuserl {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fuserl {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
