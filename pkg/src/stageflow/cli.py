"""Command-line entry point.

Subcommands: gen-demos, train, bench, verify, export-report. All runs are
deterministic given (--config, --seed) except the vlm observer mode. Exit
codes: 0 success, 1 check failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import bench as bench_mod
from . import verify as verify_mod
from .config import PRESETS, RunConfig, dump_toml, load_config
from .errors import ConfigurationError, ContractError, FingerprintMismatch
from .expert import generate_demos, load_demos, save_demos
from .policy import Policy
from .protocol import VlmClient
from .tasks import load_suite, suite_by_name
from .train import loss_curve_csv, train_policy

VLM_ENDPOINT_ENV = "STAGEFLOW_VLM_ENDPOINT"


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="TOML config file")
    sub.add_argument("--preset", default="desk", choices=sorted(PRESETS),
                     help="base preset the config file overrides")
    sub.add_argument("--seed", type=int, default=None, help="override the root seed")


def _build_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, preset=args.preset, overrides=overrides)


def _vlm_client(config: RunConfig) -> VlmClient | None:
    endpoint = os.environ.get(VLM_ENDPOINT_ENV) or config["vlm.endpoint"]
    if not endpoint:
        return None
    return VlmClient(endpoint, timeout_s=config["vlm.timeout_s"], retries=config["vlm.retries"])


def cmd_gen_demos(args) -> int:
    config = _build_config(args)
    tasks = load_suite(config)
    per_task = args.per_task if args.per_task is not None else config["demos.per_task"]
    demos = generate_demos(config, tasks, root_seed=config["seed"], per_task=per_task)
    save_demos(args.out, demos, config)
    print(f"wrote {len(demos)} demonstrations ({per_task} per task) to {args.out} "
          f"[fingerprint {config.fingerprint()}]")
    return 0


def cmd_train(args) -> int:
    config = _build_config(args)
    if not Path(args.demos).exists():
        print(f"no demo archive at {args.demos}; generate one with "
              f"`stageflow gen-demos --out {args.demos}`", file=sys.stderr)
        return 2
    demos = load_demos(args.demos, config)
    policy, opt, curve = train_policy(
        config, demos, seed=config["seed"], observer_mode=args.observer,
        steps=args.steps, checkpoint_path=args.out,
    )
    loss_path = args.loss_csv or Path(str(args.out) + ".loss.csv")
    Path(loss_path).write_text(loss_curve_csv(curve), encoding="utf-8")
    first = curve[0][2] if curve else float("nan")
    last = curve[-1][2] if curve else float("nan")
    print(f"trained {len(curve)} steps (observer {args.observer}); loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {args.out}  loss curve: {loss_path}")
    return 0


def _bench_arm(policy: Policy, tasks, config, args, arm: str):
    client = _vlm_client(config) if policy.observer_mode == "vlm" else None
    if policy.observer_mode == "vlm" and client is None:
        raise ConfigurationError(
            f"checkpoint for arm {arm} was trained with the vlm observer but no endpoint "
            f"is configured (set {VLM_ENDPOINT_ENV} or vlm.endpoint)"
        )
    records = bench_mod.run_suite(
        policy, tasks, config,
        episodes=args.episodes,
        seed_indices=list(range(args.seeds)) if args.seeds else None,
        vlm_client=client,
        trace_dir=(Path(args.out) / f"traces-{arm}") if args.trace else None,
    )
    return bench_mod.aggregate(records, config.fingerprint(), policy.observer_mode)


def cmd_bench(args) -> int:
    config = _build_config(args)
    by_name = suite_by_name(config)
    if args.tasks:
        unknown = [t for t in args.tasks.split(",") if t not in by_name]
        if unknown:
            raise ConfigurationError(f"unknown tasks {unknown}; have {sorted(by_name)}")
        tasks = [by_name[t] for t in args.tasks.split(",")]
    else:
        tasks = list(by_name.values())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    policy_a = Policy.load(args.ckpt, config)
    report_a = _bench_arm(policy_a, tasks, config, args, "a")
    (out / "report-a.json").write_text(report_a.to_json(), encoding="utf-8")
    reports = {"a": report_a}
    print(f"arm a (observer {policy_a.observer_mode}): "
          f"SR={report_a.overall['success_rate']:.3f} "
          f"FCR={report_a.overall['false_completion_rate']:.3f}")

    if args.ckpt_b:
        policy_b = Policy.load(args.ckpt_b, config)
        report_b = _bench_arm(policy_b, tasks, config, args, "b")
        (out / "report-b.json").write_text(report_b.to_json(), encoding="utf-8")
        reports["b"] = report_b
        comparison = bench_mod.compare_arms(report_a, report_b)
        import json

        (out / "comparison.json").write_text(
            json.dumps({"fingerprint": config.fingerprint(), **comparison},
                       indent=2, sort_keys=True),
            encoding="utf-8",
        )
        print(f"arm b (observer {policy_b.observer_mode}): "
              f"SR={report_b.overall['success_rate']:.3f} "
              f"FCR={report_b.overall['false_completion_rate']:.3f}")
        d = comparison["overall"]
        print(f"delta (b-a): SR {d['success_rate']['delta']:+.3f} "
              f"[{d['success_rate']['low']:+.3f}, {d['success_rate']['high']:+.3f}], "
              f"FCR {d['false_completion_rate']['delta']:+.3f} "
              f"[{d['false_completion_rate']['low']:+.3f}, "
              f"{d['false_completion_rate']['high']:+.3f}]")

    (out / "report.csv").write_text(bench_mod.report_csv(reports), encoding="utf-8")
    (out / "config.toml").write_text(dump_toml(config), encoding="utf-8")
    print(f"reports written to {out}")
    return 0


def cmd_verify(args) -> int:
    ok = verify_mod.run_all(inject_fault=args.inject_fault)
    print("verify:", "all checks passed" if ok else "CHECKS FAILED")
    return 0 if ok else 1


def cmd_export_report(args) -> int:
    report = bench_mod.BenchReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    csv_text = bench_mod.report_csv({args.arm: report})
    Path(args.out).write_text(csv_text, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stageflow",
        description="Task-stage cue injection for a flow-matching policy, with a "
                    "false-completion benchmark world.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-demos", help="roll the scripted expert on clean tasks")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True, help="demo archive path (.rvpd)")
    p.add_argument("--per-task", type=int, default=None)
    p.set_defaults(fn=cmd_gen_demos)

    p = subs.add_parser("train", help="train a policy on a demo archive")
    _add_config_args(p)
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.rvpk)")
    p.add_argument("--observer", choices=("off", "oracle", "vlm"), default=None,
                   help="cue injection during training (default: config train.observer)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--loss-csv", type=Path, default=None)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("bench", help="run the benchmark suite for one or two arms")
    _add_config_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--ckpt-b", type=Path, default=None, help="second arm for A/B comparison")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--tasks", default=None, help="comma-separated task names (default: all)")
    p.add_argument("--trace", action="store_true", help="write per-episode JSONL traces")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.set_defaults(fn=cmd_bench)

    p = subs.add_parser("verify", help="run the invariant verification table")
    p.add_argument("--inject-fault", choices=("film-sign",), default=None,
                   help="flip a sign in the modulation equation to prove the check bites")
    p.set_defaults(fn=cmd_verify)

    p = subs.add_parser("export-report", help="convert a report JSON to CSV")
    p.add_argument("report", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--arm", default="a")
    p.set_defaults(fn=cmd_export_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, FingerprintMismatch, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
