"""Task definitions: TOML files in, TaskSpec out, plus the built-in suite.

The built-in suite mirrors the three perturbation families at desk scale:
two drop tasks (near and far goal), two swap tasks (either lookalike as the
linguistic target), one relayout task, and one clean task.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

from .config import RunConfig
from .errors import ConfigurationError
from .world import ObjectInstance, Physics, TaskSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def physics_from_config(config: RunConfig) -> Physics:
    return Physics(
        v_max=config["world.v_max"],
        r_grasp=config["world.r_grasp"],
        t_hold=config["world.t_hold"],
        fall=(config["world.fall_dx"], config["world.fall_dy"]),
    )


def task_from_toml(text: str, default_physics: Physics | None = None) -> TaskSpec:
    data = tomllib.loads(text)
    try:
        objects = tuple(
            ObjectInstance(
                id=int(o["id"]),
                kind=str(o["kind"]),
                pos=(float(o["pos"][0]), float(o["pos"][1])),
                is_target=bool(o.get("target", False)),
                is_distractor=bool(o.get("distractor", False)),
                radius=float(o.get("radius", 0.03)),
            )
            for o in data["objects"]
        )
        phys = default_physics or Physics()
        if "physics" in data:
            p = data["physics"]
            phys = Physics(
                v_max=float(p.get("v_max", phys.v_max)),
                r_grasp=float(p.get("r_grasp", phys.r_grasp)),
                t_hold=int(p.get("t_hold", phys.t_hold)),
                fall=tuple(p["fall"]) if "fall" in p else phys.fall,
            )
        return TaskSpec(
            name=str(data["name"]),
            instruction=str(data["instruction"]),
            objects=objects,
            goal_center=(float(data["goal"]["center"][0]), float(data["goal"]["center"][1])),
            goal_radius=float(data["goal"]["radius"]),
            gripper_start=(float(data["gripper"]["start"][0]), float(data["gripper"]["start"][1])),
            family=str(data.get("family", "none")),
            base_budget=int(data.get("base_budget", 120)),
            extension=int(data.get("extension", 0)),
            physics=phys,
        )
    except KeyError as exc:
        raise ConfigurationError(f"task file missing required key: {exc}") from exc


def load_task(path: str | Path, default_physics: Physics | None = None) -> TaskSpec:
    return task_from_toml(Path(path).read_text(encoding="utf-8"), default_physics)


def task_to_toml(spec: TaskSpec) -> str:
    """Serialize a TaskSpec back to its TOML file form."""
    lines = [
        f'name = "{spec.name}"',
        f'instruction = "{spec.instruction}"',
        f'family = "{spec.family}"',
        f"base_budget = {spec.base_budget}",
        f"extension = {spec.extension}",
        "",
        "[goal]",
        f"center = [{spec.goal_center[0]!r}, {spec.goal_center[1]!r}]",
        f"radius = {spec.goal_radius!r}",
        "",
        "[gripper]",
        f"start = [{spec.gripper_start[0]!r}, {spec.gripper_start[1]!r}]",
        "",
        "[physics]",
        f"v_max = {spec.physics.v_max!r}",
        f"r_grasp = {spec.physics.r_grasp!r}",
        f"t_hold = {spec.physics.t_hold}",
        f"fall = [{spec.physics.fall[0]!r}, {spec.physics.fall[1]!r}]",
    ]
    for obj in spec.objects:
        lines += [
            "",
            "[[objects]]",
            f"id = {obj.id}",
            f'kind = "{obj.kind}"',
            f"pos = [{obj.pos[0]!r}, {obj.pos[1]!r}]",
            f"radius = {obj.radius!r}",
        ]
        if obj.is_target:
            lines.append("target = true")
        if obj.is_distractor:
            lines.append("distractor = true")
    return "\n".join(lines) + "\n"


SUITE_FILES = (
    "drop-near.toml",
    "drop-far.toml",
    "swap-a.toml",
    "swap-b.toml",
    "relayout-bowl.toml",
    "clean-place.toml",
)


def load_suite(config: RunConfig) -> list[TaskSpec]:
    """The built-in 6-task benchmark suite, physics taken from config."""
    phys = physics_from_config(config)
    specs = []
    for fname in SUITE_FILES:
        text = resources.files("stageflow.suite").joinpath(fname).read_text(encoding="utf-8")
        specs.append(task_from_toml(text, phys))
    return specs


def suite_by_name(config: RunConfig) -> dict[str, TaskSpec]:
    return {spec.name: spec for spec in load_suite(config)}
