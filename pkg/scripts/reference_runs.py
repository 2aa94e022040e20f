"""Desk-scale reference runs that pin the end-to-end thresholds.

Each experiment writes a full run directory under --work (large, not committed)
and a compact summary JSON under --results (committed, read by the acceptance
suite).

    python3 scripts/reference_runs.py vmail --env pixel-pointmass:NE --seeds 0 1 2
    python3 scripts/reference_runs.py bc --env pixel-pointmass:NE --demos 10 100
    python3 scripts/reference_runs.py transfer
    python3 scripts/reference_runs.py all
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from vmail.core import RunConfig
from vmail.envs import expert_return, generate_demos, make_env
from vmail.trainer import (
    bc_train,
    load_source_run,
    source_policy_return,
    vmail_train,
    vmail_train_tasks,
    vmail_transfer,
    write_run_dir,
)

ROOT = Path(__file__).resolve().parent.parent
DEMO_SEED = 0

# Reduced budgets: one CPU core, roughly 0.2 s per training iteration.
VMAIL = dict(total_env_steps=12_250, train_iters=20, eval_every=2_450, eval_episodes=5)
BC = dict(bc_steps=5_000)
TRANSFER = dict(total_env_steps=12_250, train_iters=20, eval_every=2_450, eval_episodes=5, transfer_iters=2_000)

SOURCES = ("pixel-pointmass:NE", "pixel-pointmass:NW")
TARGET = "pixel-pointmass:SE"


def _demos(env_id: str, n: int):
    return generate_demos(make_env(env_id), n, DEMO_SEED)


def _curve(report, name="eval_return"):
    return [[s, v] for s, n, v in report.metrics if n == name]


def _summary(report, env_id: str, seconds: float, **extra) -> dict:
    curve = _curve(report)
    out = {
        "env_id": env_id,
        "expert_return": expert_return(env_id),
        "final_eval_return": curve[-1][1] if curve else None,
        "eval_curve": curve,
        "config": report.config.to_dict(),
        "info": {k: v for k, v in report.info.items() if not isinstance(v, list)},
        "wall_seconds": round(seconds, 1),
    }
    out.update(extra)
    return out


def _write(results: Path, name: str, summary: dict) -> None:
    results.mkdir(parents=True, exist_ok=True)
    (results / f"{name}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"{name}: final {summary['final_eval_return']:.2f} / expert {summary['expert_return']:.2f}"
          f" ({summary['wall_seconds']:.0f}s)", flush=True)


def _slug(env_id: str) -> str:
    return env_id.replace("pixel-", "").replace(":", "-").lower()


def run_vmail(env_id: str, seeds, work: Path, results: Path) -> None:
    demos = _demos(env_id, 10)
    for seed in seeds:
        name = f"vmail-{_slug(env_id)}-s{seed}"
        config = RunConfig(env_id=env_id, seed=seed, **VMAIL)
        t0 = time.time()
        report = vmail_train(config, demos, make_env(env_id))
        write_run_dir(work / name, report)
        _write(results, name, _summary(report, env_id, time.time() - t0))


def run_bc(env_id: str, counts, work: Path, results: Path, seed: int = 0) -> None:
    for n in counts:
        name = f"bc-{_slug(env_id)}-{n}demos"
        config = RunConfig(env_id=env_id, seed=seed, demo_count=n, **BC)
        t0 = time.time()
        report = bc_train(_demos(env_id, n), config, make_env(env_id))
        write_run_dir(work / name, report)
        _write(results, name, _summary(report, env_id, time.time() - t0, demos=n))


def run_transfer(work: Path, results: Path, seed: int = 0) -> None:
    source_dir = work / "source-ne-nw"
    config = RunConfig(env_id=",".join(SOURCES), seed=seed, **TRANSFER)
    if not (source_dir / "report.json").exists():
        tasks = [(make_env(e), _demos(e, 10)) for e in SOURCES]
        t0 = time.time()
        report = vmail_train_tasks(config, tasks, out_dir=source_dir)
        write_run_dir(source_dir, report, buffer=report.state.buffer)
        finals = {e: report.last(f"eval_return/{e}") for e in SOURCES}
        summary = _summary(report, SOURCES[0], time.time() - t0, source_final_returns=finals,
                           source_expert_returns={e: expert_return(e) for e in SOURCES})
        summary["final_eval_return"] = finals[SOURCES[0]]
        _write(results, "source-ne-nw", summary)

    for target, name in ((TARGET, "transfer-se"), (SOURCES[0], "transfer-ne-identity")):
        source = load_source_run(source_dir)  # fresh copy: transfer fine-tunes the model in place
        env = make_env(target)
        t0 = time.time()
        report = vmail_transfer(source, _demos(target, 10), config, env)
        report.info["source_policy_returns"] = source_policy_return(load_source_run(source_dir), env, config)
        write_run_dir(work / name, report)
        _write(results, name, _summary(report, target, time.time() - t0,
                                       source_policy_returns=report.info["source_policy_returns"]))

    run_bc(TARGET, [10], work, results, seed)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("experiment", choices=["vmail", "bc", "transfer", "all"])
    parser.add_argument("--env", default="pixel-pointmass:NE")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--demos", type=int, nargs="+", default=[10])
    parser.add_argument("--work", type=Path, default=ROOT / "runs")
    parser.add_argument("--results", type=Path, default=ROOT / "results")
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.experiment == "vmail":
        run_vmail(args.env, args.seeds, args.work, args.results)
    elif args.experiment == "bc":
        run_bc(args.env, args.demos, args.work, args.results)
    elif args.experiment == "transfer":
        run_transfer(args.work, args.results)
    else:
        for env_id in ("pixel-pointmass:NE", "pixel-pendulum"):
            run_vmail(env_id, args.seeds, args.work, args.results)
        run_bc("pixel-pointmass:NE", [10, 100], args.work, args.results)
        run_bc("pixel-pendulum", [10], args.work, args.results)
        run_transfer(args.work, args.results)


if __name__ == "__main__":
    main()
