"""Scripted expert, demonstration generation, and the demo archive.

Demonstrations are collected on unperturbed (clean) variants of the tasks:
approach, grasp, transport, release inside the goal, then idle long enough
for the completion rule to trigger. Each chunk boundary yields one training
sample (observation features, proprioception, pooled cue annotation, and
the normalized expert action chunk). Cues are precomputed here so training
never needs the world in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ContractError, FingerprintMismatch
from .observer import POOLED_DIM, observe_oracle, pool_cue
from .rng import fnv1a64
from .world import (
    Action,
    TaskSpec,
    WorldState,
    dist,
    goal_predicate,
    proprioception,
    render_observation,
    reset,
    step,
)


def expert_action(state: WorldState) -> Action:
    """Deterministic expert: approach -> grasp -> transport -> release -> idle."""
    phys = state.spec.physics
    target = state.target
    pos = state.gripper_pos
    if state.held_object == target.id:
        d = dist(pos, state.goal_center)
        if d <= state.goal_radius * 0.4:
            return Action(0.0, 0.0, -1.0)  # release inside the goal
        step_len = min(phys.v_max, d)
        return Action(
            (state.goal_center[0] - pos[0]) / d * step_len,
            (state.goal_center[1] - pos[1]) / d * step_len,
            1.0,
        )
    if goal_predicate(state):
        return Action(0.0, 0.0, -1.0)  # idle until the episode ends
    d = dist(pos, target.pos)
    if d < phys.r_grasp * 0.8:
        return Action(0.0, 0.0, 1.0)  # close on the target
    step_len = min(phys.v_max, d)
    return Action(
        (target.pos[0] - pos[0]) / d * step_len,
        (target.pos[1] - pos[1]) / d * step_len,
        -1.0,
    )


def clean_variant(spec: TaskSpec) -> TaskSpec:
    """The unperturbed version of a task (family none, no budget extension)."""
    return replace(spec, family="none", extension=0)


@dataclass
class DemoRecord:
    task: str
    instruction: str
    seed: int
    exo: np.ndarray  # (n_samples, g, g, 4)
    ego: np.ndarray  # (n_samples, k, k, 5)
    proprio: np.ndarray  # (n_samples, 4)
    cue: np.ndarray  # (n_samples, POOLED_DIM) pooled oracle annotations
    chunk: np.ndarray  # (n_samples, n, a) normalized expert actions


def run_expert_episode(spec: TaskSpec, seed: int, config: RunConfig) -> DemoRecord:
    """Roll the expert on the clean variant; abort if it misses the goal."""
    clean = clean_variant(spec)
    state = reset(clean, seed, start_jitter=config["world.start_jitter"])
    idle_needed = config["policy.done_window"] + 2
    states: list[WorldState] = [state]
    actions: list[Action] = []
    idle_run = 0
    while len(actions) < clean.budget:
        action = expert_action(state)
        state, _ = step(state, action)
        states.append(state)
        actions.append(action)
        if goal_predicate(state) and action.dx == 0.0 and action.dy == 0.0 and action.grip <= 0.0:
            idle_run += 1
            if idle_run >= idle_needed:
                break
        else:
            idle_run = 0
    if not goal_predicate(state):
        raise ContractError(f"expert failed on task {spec.name!r} with seed {seed}")

    g = config["world.exo_grid"]
    k = config["world.ego_grid"]
    n = config["policy.chunk_len"]
    a_dim = config["policy.action_dim"]
    v_max = config["world.v_max"]
    idle_row = np.array([0.0, 0.0, -1.0])

    exo_rows, ego_rows, prop_rows, cue_rows, chunk_rows = [], [], [], [], []
    for t in range(0, len(actions), n):
        st = states[t]
        obs = render_observation(st, g, k)
        exo_rows.append(obs.exo)
        ego_rows.append(obs.ego)
        prop_rows.append(proprioception(st))
        cue_rows.append(pool_cue(observe_oracle(st, spec.instruction)))
        rows = [
            np.array([act.dx / v_max, act.dy / v_max, act.grip])
            for act in actions[t:t + n]
        ]
        while len(rows) < n:
            rows.append(idle_row.copy())
        chunk_rows.append(np.stack(rows))
    return DemoRecord(
        task=spec.name,
        instruction=spec.instruction,
        seed=seed,
        exo=np.stack(exo_rows),
        ego=np.stack(ego_rows),
        proprio=np.stack(prop_rows),
        cue=np.stack(cue_rows),
        chunk=np.stack(chunk_rows).reshape(-1, n, a_dim),
    )


def demo_seed(root_seed: int, task_name: str, index: int) -> int:
    return (fnv1a64(f"demo/{task_name}/{index}") ^ (root_seed * 0x9E3779B97F4A7C15)) & ((1 << 63) - 1)


def generate_demos(config: RunConfig, tasks: list[TaskSpec], root_seed: int,
                   per_task: int | None = None) -> list[DemoRecord]:
    count = per_task if per_task is not None else config["demos.per_task"]
    demos = []
    for spec in tasks:
        for i in range(count):
            demos.append(run_expert_episode(spec, demo_seed(root_seed, spec.name, i), config))
    return demos


# ---------------------------------------------------------------------------
# archive (same container discipline as checkpoints)
# ---------------------------------------------------------------------------


def save_demos(path, demos: list[DemoRecord], config: RunConfig) -> None:
    manifest = {
        "kind": "demo-archive",
        "arch_fingerprint": config.arch_fingerprint(),
        "config_fingerprint": config.fingerprint(),
        "tasks": [d.task for d in demos],
        "instructions": [d.instruction for d in demos],
        "seeds": [d.seed for d in demos],
        "pooled_dim": POOLED_DIM,
    }
    tensors: dict[str, np.ndarray] = {}
    for i, d in enumerate(demos):
        key = f"demo{i:05d}"
        tensors[f"{key}.exo"] = d.exo
        tensors[f"{key}.ego"] = d.ego
        tensors[f"{key}.proprio"] = d.proprio
        tensors[f"{key}.cue"] = d.cue
        tensors[f"{key}.chunk"] = d.chunk
    save_checkpoint(path, tensors, manifest)


def load_demos(path, config: RunConfig) -> list[DemoRecord]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "demo-archive":
        raise ContractError(f"{path} is not a demo archive")
    if manifest["arch_fingerprint"] != config.arch_fingerprint():
        raise FingerprintMismatch(
            f"demo archive fingerprint {manifest['arch_fingerprint']} does not match "
            f"config {config.arch_fingerprint()}"
        )
    demos = []
    for i, (task, instruction, seed) in enumerate(
        zip(manifest["tasks"], manifest["instructions"], manifest["seeds"])
    ):
        key = f"demo{i:05d}"
        demos.append(
            DemoRecord(
                task=task,
                instruction=instruction,
                seed=int(seed),
                exo=tensors[f"{key}.exo"],
                ego=tensors[f"{key}.ego"],
                proprio=tensors[f"{key}.proprio"],
                cue=tensors[f"{key}.cue"],
                chunk=tensors[f"{key}.chunk"],
            )
        )
    return demos
