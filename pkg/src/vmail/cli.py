"""Command-line entry point.

Exit codes: 0 ok, 1 verification violation, 2 usage or config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .core import (
    ArchiveError,
    ConfigError,
    NonFiniteError,
    RunConfig,
    load_trajectories,
    read_metrics_csv,
    save_trajectories,
)
from .envs import UnknownEnvError, expert_return, generate_demos, make_env

log = logging.getLogger("vmail")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config_help() -> str:
    lines = ["config keys (JSON, field-for-field with RunConfig; unknown keys are rejected):"]
    defaults = RunConfig().to_dict()
    for f in fields(RunConfig):
        lines.append(f"  {f.name:<18} default {json.dumps(defaults[f.name])}")
    return "\n".join(lines)


def _positive(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value
    return parse


def _load_config(path, seed: int | None) -> RunConfig:
    config = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        config.seed = seed
        config.validate()
    return config


def _load_demos(path) -> list:
    demos = load_trajectories(path)
    if not demos:
        raise UsageError(f"{path}: demo archive is empty")
    return demos


def _demos_manifest(paths) -> dict:
    out = {}
    for p in paths:
        manifest = json.loads((Path(p) / "manifest.json").read_text())
        out[str(p)] = {"count": manifest["count"],
                       "env_ids": sorted({t["env_id"] for t in manifest["trajectories"]})}
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_demos(args) -> int:
    env = make_env(args.env)
    demos = generate_demos(env, args.n, args.seed)
    save_trajectories(demos, args.out)
    returns = [d.eval_returns for d in demos]
    print(json.dumps({"env": args.env, "n": len(demos), "mean_return": float(np.mean(returns)),
                      "out": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import vmail_train_tasks, write_run_dir

    config = _load_config(args.config, args.seed)
    env_ids = config.env_id.split(",")
    tasks = []
    for path in args.demos:
        demos = _load_demos(path)
        env_id = demos[0].env_id
        if env_id not in env_ids:
            raise ConfigError("env_id", f"demos in {path} are for {env_id!r}, config has {config.env_id!r}")
        tasks.append((make_env(env_id), demos))
    report = vmail_train_tasks(config, tasks, out_dir=args.out)
    write_run_dir(args.out, report, _demos_manifest(args.demos), report.state.buffer)
    _print_summary(report)
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .trainer import load_source_run, source_policy_return, vmail_transfer, write_run_dir

    config = _load_config(args.config, args.seed)
    demos = _load_demos(args.demos)
    source = load_source_run(args.sources)
    env = make_env(demos[0].env_id)
    report = vmail_transfer(source, demos, config, env, out_dir=args.out)
    report.info["source_policy_returns"] = source_policy_return(source, env, config)
    write_run_dir(args.out, report, _demos_manifest([args.demos]))
    _print_summary(report)
    return EXIT_OK


def cmd_bc(args) -> int:
    from .trainer import bc_train, write_run_dir

    config = _load_config(args.config, args.seed)
    demos = _load_demos(args.demos)
    env = make_env(demos[0].env_id)
    report = bc_train(demos, config, env)
    write_run_dir(args.out, report, _demos_manifest([args.demos]))
    _print_summary(report)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .tabular_verify import CAMPAIGNS

    result = CAMPAIGNS[args.suite](trials=args.trials, seed=args.seed)
    report = result.to_dict()
    report["passed"] = result.violations == 0
    print(json.dumps(report, indent=1, sort_keys=True))
    if result.violations:
        print(f"violation: suite {args.suite} instance seed {result.violating_seeds[0]}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    csv_path = run / "metrics.csv"
    if not csv_path.exists():
        raise UsageError(f"missing {csv_path}")
    rows = read_metrics_csv(csv_path)
    if not rows:
        print(f"warning: {csv_path} has no rows, nothing to plot", file=sys.stderr)
        return EXIT_OK
    reference = None
    if (run / "config.json").exists():
        config = RunConfig.load(run / "config.json")
        reference = config.expert_return
        if reference is None:
            try:
                reference = expert_return(config.env_id.split(",")[0])
            except UnknownEnvError:
                reference = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in dict.fromkeys(n for _, n, _ in rows):
        steps = [s for s, n, _ in rows if n == name]
        vals = [v for _, n, v in rows if n == name]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(steps, vals, marker="o", ms=3, label=name)
        if name.startswith("eval_return") and not name.startswith("eval_return_std") and reference is not None:
            ax.axhline(reference, color="k", ls="--", lw=1, label=f"expert {reference:.1f}")
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = out / (name.replace("/", "_").replace(":", "_") + ".png")
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(str(path))
    print(json.dumps({"images": written, "expert_return": reference}))
    return EXIT_OK


def cmd_print_default_config(args) -> int:
    print(json.dumps(RunConfig().to_dict(), indent=1))
    return EXIT_OK


def _print_summary(report) -> None:
    final = {n: report.last(n) for n in ("eval_return", "elbo", "disc_loss") if report.last(n) is not None}
    print(json.dumps({"final": final, "info": {k: v for k, v in report.info.items() if not isinstance(v, list)}},
                     default=str))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmail", description="Model-based adversarial imitation from pixels.",
                                     epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="roll out the scripted expert")
    p.add_argument("--env", required=True)
    p.add_argument("--n", type=_positive("--n"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    for name, func, helptext in (("train", cmd_train, "V-MAIL on one or more tasks (shared model)"),
                                 ("bc", cmd_bc, "behavior cloning baseline")):
        p = sub.add_parser(name, help=helptext, epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="RunConfig JSON; defaults if omitted")
        p.add_argument("--demos", required=True, action="append" if name == "train" else "store",
                       help="demo archive" + (" (repeat for multi-task training)" if name == "train" else ""))
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.set_defaults(func=func)

    p = sub.add_parser("transfer", help="zero-shot transfer from a trained source run",
                       epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--sources", required=True, help="run directory of a (multi-task) train command")
    p.add_argument("--demos", required=True, help="target-task demo archive")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("verify", help="exact tabular verification campaigns")
    p.add_argument("--suite", required=True, choices=["theorem1", "lemma1", "suboptimality", "discriminator"])
    p.add_argument("--trials", type=_positive("--trials"), default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="one PNG per metric from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="accepted for uniformity; plotting is deterministic")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("print-default-config", help="emit the default RunConfig JSON")
    p.set_defaults(func=cmd_print_default_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, UnknownEnvError, ArchiveError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric abort: non-finite {exc.term} at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
