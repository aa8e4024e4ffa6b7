"""Episode runner, outcome classification, aggregation, and A/B comparison.

One episode: render, (optionally) observe and encode a task-stage cue,
build and modulate the prefix, fuse proprioception, sample an action chunk,
then execute it step by step while checking the completion rule after every
executed step. The episode ends at the first declaration or on budget
exhaustion, and is classified by the declaration/goal conjunction.

Episodes are independent, so the suite runner advances many of them in
lockstep with batched policy forwards. Every numpy op used by the policy is
slice-independent across the batch dimension, and each episode draws from
its own seeded noise stream, so a batched run is bitwise identical to
replaying any single episode alone.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .errors import ContractError
from .observer import observe_oracle, pool_cue
from .policy import Policy, declare_done, euler_integrate, tokenize
from .protocol import VlmClient, observation_text
from .rng import fnv1a64, stream
from .world import (
    Action,
    TaskSpec,
    goal_predicate,
    proprioception,
    render_observation,
    reset,
    state_summary,
    step,
)

OUTCOME_TRUE = "true_completion"
OUTCOME_FALSE = "false_completion"
OUTCOME_TIMEOUT = "timeout_incomplete"
OUTCOMES = (OUTCOME_TRUE, OUTCOME_FALSE, OUTCOME_TIMEOUT)

# exact 97.5% normal quantile for the two-proportion interval
Z_95 = 1.959963984540054


def classify_outcome(declared: bool, goal_met: bool, budget_exhausted: bool) -> str:
    """Decision table: declaration x goal, timeout as the third class;
    calling this on a live episode is a contract error."""
    if declared:
        return OUTCOME_TRUE if goal_met else OUTCOME_FALSE
    if budget_exhausted:
        return OUTCOME_TIMEOUT
    raise ContractError("episode is still live (no declaration, budget not exhausted)")


@dataclass
class EpisodeRecord:
    task: str
    family: str
    seed: int
    steps_used: int
    d_trace: list[int]
    goal_at_termination: bool
    outcome: str
    events: list[tuple[int, str]]
    cue_injection: bool


def episode_seed(root_seed: int, task_name: str, seed_index: int, episode_index: int) -> int:
    """Stable per-episode seed; identical across arms so A/B compares the
    same worlds."""
    mixed = fnv1a64(f"episode/{task_name}/{seed_index}/{episode_index}")
    return (mixed ^ (root_seed * 0x9E3779B97F4A7C15)) & ((1 << 63) - 1)


class _Episode:
    """One live episode inside the lockstep runner."""

    def __init__(self, spec: TaskSpec, seed: int, policy: Policy, config: RunConfig,
                 observer_mode: str, vlm_client: VlmClient | None, keep_trace: bool = False):
        self.spec = spec
        self.seed = seed
        self.policy = policy
        self.mode = observer_mode
        self.vlm_client = vlm_client
        self.trace_lines: list[str] | None = [] if keep_trace else None
        self.exo_grid = config["world.exo_grid"]
        self.ego_grid = config["world.ego_grid"]
        self.v_max = config["world.v_max"]
        self.window = config["policy.done_window"]
        self.eps_motion = config["policy.done_eps"]
        self.budget = spec.budget
        self.state = reset(spec, seed, start_jitter=config["world.start_jitter"])
        self.noise_rng = stream(seed, "chunk-noise")
        self.instr_ids, _ = tokenize(spec.instruction, policy.vocab, policy.instr_budget)
        self.displacements: deque = deque(maxlen=self.window)
        self.d_trace: list[int] = []
        self.events: list[tuple[int, str]] = []
        self.declared = False

    @property
    def finished(self) -> bool:
        return self.declared or self.state.step_count >= self.budget

    def observation(self):
        obs = render_observation(self.state, self.exo_grid, self.ego_grid)
        pooled = None
        if self.mode == "oracle":
            pooled = pool_cue(observe_oracle(self.state, self.spec.instruction))
        elif self.mode == "vlm":
            if self.vlm_client is None:
                raise ContractError("vlm observer mode needs a client")
            cue = self.vlm_client.observe(
                observation_text(obs), self.spec.instruction, self.spec.instruction
            )
            pooled = pool_cue(cue)
        return obs.exo, obs.ego, proprioception(self.state), self.instr_ids, pooled

    def draw_noise(self) -> np.ndarray:
        return self.noise_rng.normals((self.policy.chunk_len, self.policy.action_dim))

    def execute(self, chunk: np.ndarray) -> None:
        for row in chunk:
            action = Action(float(row[0]) * self.v_max, float(row[1]) * self.v_max, float(row[2]))
            before = self.state.gripper_pos
            self.state, evs = step(self.state, action)
            self.displacements.append(
                math.hypot(self.state.gripper_pos[0] - before[0],
                           self.state.gripper_pos[1] - before[1])
            )
            self.events.extend((self.state.step_count, e) for e in evs)
            d = declare_done(self.displacements, float(row[2]), self.window, self.eps_motion)
            self.d_trace.append(d)
            if self.trace_lines is not None:
                line = state_summary(self.state)
                line["events"] = list(evs)
                line["d"] = d
                self.trace_lines.append(json.dumps(line, sort_keys=True))
            if d:
                self.declared = True
                return
            if self.state.step_count >= self.budget:
                return

    def record(self) -> EpisodeRecord:
        goal_met = goal_predicate(self.state)
        outcome = classify_outcome(self.declared, goal_met,
                                   self.state.step_count >= self.budget)
        return EpisodeRecord(
            task=self.spec.name,
            family=self.spec.family,
            seed=self.seed,
            steps_used=self.state.step_count,
            d_trace=self.d_trace,
            goal_at_termination=goal_met,
            outcome=outcome,
            events=self.events,
            cue_injection=self.mode != "off",
        )


def run_episodes(
    policy: Policy,
    observer_mode: str,
    plans: list[tuple[TaskSpec, int]],
    config: RunConfig,
    vlm_client: VlmClient | None = None,
    trace_dir=None,
) -> list[EpisodeRecord]:
    """Advance all planned episodes in lockstep; records in plan order.

    With trace_dir set, each episode's per-step JSON Lines trace is written
    to trace_dir/<task>-<seed>.jsonl when it finishes."""
    if observer_mode not in ("off", "oracle", "vlm"):
        raise ContractError(f"unknown observer mode {observer_mode!r}")
    episodes = [
        _Episode(spec, seed, policy, config, observer_mode, vlm_client,
                 keep_trace=trace_dir is not None)
        for spec, seed in plans
    ]
    steps = config["policy.sample_steps"]
    with threadpool_limits(limits=1, user_api="blas"):
        while True:
            active = [ep for ep in episodes if not ep.finished]
            if not active:
                break
            exo, ego, prop, instr, pooled = [], [], [], [], []
            for ep in active:
                e, g, p, ids, pl = ep.observation()
                exo.append(e)
                ego.append(g)
                prop.append(p)
                instr.append(ids)
                pooled.append(pl)
            prefix = policy.build_prefix(np.stack(exo), np.stack(ego), np.stack(instr))
            pooled_batch = None if observer_mode == "off" else np.stack(pooled)
            ctx = policy.fuse(policy.modulate(prefix, pooled_batch), np.stack(prop))
            eps = np.stack([ep.draw_noise() for ep in active])

            def velocity(x, tau):
                return policy.predict_velocity(ctx, x, np.full(x.shape[0], tau)).data

            chunks = np.clip(euler_integrate(velocity, eps, steps), -1.0, 1.0)
            for ep, chunk in zip(active, chunks):
                ep.execute(chunk)
    if trace_dir is not None:
        from pathlib import Path

        out = Path(trace_dir)
        out.mkdir(parents=True, exist_ok=True)
        for ep in episodes:
            path = out / f"{ep.spec.name}-{ep.seed}.jsonl"
            path.write_text("\n".join(ep.trace_lines) + "\n", encoding="utf-8")
    return [ep.record() for ep in episodes]


def run_episode(
    policy: Policy,
    observer_mode: str,
    spec: TaskSpec,
    seed: int,
    config: RunConfig,
    vlm_client: VlmClient | None = None,
    trace_dir=None,
) -> EpisodeRecord:
    return run_episodes(policy, observer_mode, [(spec, seed)], config,
                        vlm_client=vlm_client, trace_dir=trace_dir)[0]


def run_suite(
    policy: Policy,
    tasks: list[TaskSpec],
    config: RunConfig,
    episodes: int | None = None,
    seed_indices: list[int] | None = None,
    observer_mode: str | None = None,
    vlm_client: VlmClient | None = None,
    trace_dir=None,
) -> list[EpisodeRecord]:
    """episodes x seeds for each task; episode seeds are arm-independent."""
    n_episodes = episodes if episodes is not None else config["bench.episodes"]
    if n_episodes <= 0:
        raise ContractError("episode count must be positive")
    seeds = seed_indices if seed_indices is not None else list(range(config["bench.seeds"]))
    mode = observer_mode if observer_mode is not None else policy.observer_mode
    root = config["seed"]
    plans = [
        (spec, episode_seed(root, spec.name, s, e))
        for spec in tasks
        for s in seeds
        for e in range(n_episodes)
    ]
    return run_episodes(policy, mode, plans, config, vlm_client=vlm_client, trace_dir=trace_dir)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _stats(records: list[EpisodeRecord]) -> dict:
    n = len(records)
    counts = {o: sum(1 for r in records if r.outcome == o) for o in OUTCOMES}
    return {
        "episodes": n,
        "true_completion": counts[OUTCOME_TRUE],
        "false_completion": counts[OUTCOME_FALSE],
        "timeout_incomplete": counts[OUTCOME_TIMEOUT],
        "success_rate": counts[OUTCOME_TRUE] / n,
        "false_completion_rate": counts[OUTCOME_FALSE] / n,
        "mean_steps": float(np.mean([r.steps_used for r in records])),
    }


@dataclass
class BenchReport:
    fingerprint: str
    observer_mode: str
    per_task: dict[str, dict] = field(default_factory=dict)
    per_family: dict[str, dict] = field(default_factory=dict)
    overall: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "fingerprint": self.fingerprint,
                "observer_mode": self.observer_mode,
                "per_task": self.per_task,
                "per_family": self.per_family,
                "overall": self.overall,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        data = json.loads(text)
        return cls(
            fingerprint=data["fingerprint"],
            observer_mode=data["observer_mode"],
            per_task=data["per_task"],
            per_family=data["per_family"],
            overall=data["overall"],
        )


def aggregate(records: list[EpisodeRecord], fingerprint: str,
              observer_mode: str = "off") -> BenchReport:
    if not records:
        raise ContractError("cannot aggregate an empty record set")
    report = BenchReport(fingerprint=fingerprint, observer_mode=observer_mode)
    for task in sorted({r.task for r in records}):
        rows = [r for r in records if r.task == task]
        report.per_task[task] = _stats(rows)
        report.per_task[task]["family"] = rows[0].family
    for fam in sorted({r.family for r in records}):
        report.per_family[fam] = _stats([r for r in records if r.family == fam])
    report.overall = _stats(records)
    return report


def _delta_interval(stats_a: dict, stats_b: dict, key: str) -> dict:
    pa, na = stats_a[key], stats_a["episodes"]
    pb, nb = stats_b[key], stats_b["episodes"]
    delta = pb - pa
    se = math.sqrt(pa * (1 - pa) / na + pb * (1 - pb) / nb)
    return {"delta": delta, "low": delta - Z_95 * se, "high": delta + Z_95 * se}


def compare_arms(report_a: BenchReport, report_b: BenchReport) -> dict:
    """Per-task and overall (SR, FCR) deltas (B minus A) with 95%
    two-proportion normal-approximation intervals."""
    if set(report_a.per_task) != set(report_b.per_task):
        raise ContractError("arms cover different task sets")
    for task in report_a.per_task:
        if report_a.per_task[task]["episodes"] != report_b.per_task[task]["episodes"]:
            raise ContractError(f"arms ran different episode counts on {task!r}")
    out = {"per_task": {}, "overall": {}}
    for task in sorted(report_a.per_task):
        out["per_task"][task] = {
            "success_rate": _delta_interval(report_a.per_task[task],
                                            report_b.per_task[task], "success_rate"),
            "false_completion_rate": _delta_interval(report_a.per_task[task],
                                                     report_b.per_task[task],
                                                     "false_completion_rate"),
        }
    out["overall"] = {
        "success_rate": _delta_interval(report_a.overall, report_b.overall, "success_rate"),
        "false_completion_rate": _delta_interval(report_a.overall, report_b.overall,
                                                 "false_completion_rate"),
    }
    return out


def report_csv(reports: dict[str, BenchReport]) -> str:
    """One row per task per arm."""
    header = ("arm,task,family,episodes,true_completion,false_completion,"
              "timeout_incomplete,success_rate,false_completion_rate,mean_steps,fingerprint")
    lines = [header]
    for arm, report in reports.items():
        for task in sorted(report.per_task):
            s = report.per_task[task]
            lines.append(
                f"{arm},{task},{s['family']},{s['episodes']},{s['true_completion']},"
                f"{s['false_completion']},{s['timeout_incomplete']},{s['success_rate']!r},"
                f"{s['false_completion_rate']!r},{s['mean_steps']!r},{report.fingerprint}"
            )
    return "\n".join(lines) + "\n"
