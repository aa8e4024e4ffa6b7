"""Deterministic 2-D tabletop gripper world.

The table is the unit square. A point gripper moves with per-axis speed
clamping, grasps the nearest object within reach when closing, and carries
it until released. Three perturbation families recreate recoverable failure
modes: `drop` forces the gripper open after a fixed number of consecutive
closed holding steps, `swap` exchanges the target with a lookalike
distractor at reset, and `relayout` jointly relocates target and goal to
seeded feasible positions.

States are immutable values; `step` returns a new state, so episodes can be
replayed bit-exactly from (spec, seed, actions).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .rng import stream

FAMILIES = ("none", "drop", "swap", "relayout")

EV_GRASPED = "grasped"
EV_RELEASED = "released"
EV_DROPPED = "dropped"
EV_GOAL_REACHED = "goal_reached"


@dataclass(frozen=True)
class Physics:
    v_max: float = 0.05
    r_grasp: float = 0.04
    t_hold: int = 8
    fall: tuple[float, float] = (0.0, -0.08)


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    kind: str
    pos: tuple[float, float]
    is_target: bool = False
    is_distractor: bool = False
    radius: float = 0.03


@dataclass(frozen=True)
class TaskSpec:
    name: str
    instruction: str
    objects: tuple[ObjectInstance, ...]
    goal_center: tuple[float, float]
    goal_radius: float
    gripper_start: tuple[float, float]
    family: str = "none"
    base_budget: int = 120
    extension: int = 0
    physics: Physics = field(default_factory=Physics)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown perturbation family {self.family!r}")
        targets = [o for o in self.objects if o.is_target]
        if len(targets) != 1:
            raise ConfigurationError(f"task {self.name!r} must have exactly one target object")
        if self.family != "drop" and self.extension != 0:
            raise ConfigurationError("budget extension is only allowed for the drop family")
        if self.family == "drop" and not 30 <= self.extension <= 50:
            raise ConfigurationError("drop tasks need a budget extension in [30, 50] steps")
        if self.family == "swap" and not any(o.is_distractor for o in self.objects):
            raise ConfigurationError("swap tasks need a designated distractor")

    @property
    def budget(self) -> int:
        return self.base_budget + self.extension

    @property
    def target_id(self) -> int:
        return next(o.id for o in self.objects if o.is_target)


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    grip: float  # > 0 close, <= 0 open


@dataclass(frozen=True)
class WorldState:
    spec: TaskSpec
    gripper_pos: tuple[float, float]
    gripper_closed: bool
    consecutive_closed_steps: int  # consecutive steps closed AND holding
    held_object: int | None
    objects: tuple[ObjectInstance, ...]
    goal_center: tuple[float, float]
    goal_radius: float
    step_count: int
    drop_fired: bool

    def object_by_id(self, oid: int) -> ObjectInstance:
        return next(o for o in self.objects if o.id == oid)

    @property
    def target(self) -> ObjectInstance:
        return next(o for o in self.objects if o.is_target)


def _clamp01(p: tuple[float, float]) -> tuple[float, float]:
    return (min(max(p[0], 0.0), 1.0), min(max(p[1], 0.0), 1.0))


def dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _check_feasible(objects: tuple[ObjectInstance, ...], goal_center, goal_radius, gripper_start) -> None:
    for obj in objects:
        if not (0.0 <= obj.pos[0] <= 1.0 and 0.0 <= obj.pos[1] <= 1.0):
            raise ConfigurationError(f"object {obj.id} off the table at {obj.pos}")
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            if dist(a.pos, b.pos) < a.radius + b.radius:
                raise ConfigurationError(f"objects {a.id} and {b.id} overlap")
    gx, gy = goal_center
    if not (goal_radius <= gx <= 1.0 - goal_radius and goal_radius <= gy <= 1.0 - goal_radius):
        raise ConfigurationError("goal region extends off the table")
    if not (0.0 <= gripper_start[0] <= 1.0 and 0.0 <= gripper_start[1] <= 1.0):
        raise ConfigurationError("gripper start off the table")


def reset(spec: TaskSpec, seed: int, start_jitter: float = 0.0) -> WorldState:
    """Initial state: canonical layout with the spec's perturbation applied.

    swap exchanges target and designated distractor positions; relayout
    draws seeded feasible positions for the target and goal region jointly;
    drop leaves the initial layout unchanged (the trigger acts in-episode).
    start_jitter > 0 additionally perturbs the gripper start pose (seeded);
    the default 0.0 reproduces the canonical layout exactly.
    """
    _check_feasible(spec.objects, spec.goal_center, spec.goal_radius, spec.gripper_start)
    objects = spec.objects
    goal_center = spec.goal_center

    if spec.family == "swap":
        target = next(o for o in objects if o.is_target)
        distractor = next(o for o in objects if o.is_distractor)
        objects = tuple(
            replace(o, pos=distractor.pos) if o.id == target.id
            else replace(o, pos=target.pos) if o.id == distractor.id
            else o
            for o in objects
        )
    elif spec.family == "relayout":
        objects, goal_center = _relayout(spec, seed)

    gripper = spec.gripper_start
    if start_jitter > 0.0:
        rng = stream(seed, "start-jitter")
        jx = (2.0 * rng.uniform() - 1.0) * start_jitter
        jy = (2.0 * rng.uniform() - 1.0) * start_jitter
        gripper = (min(max(gripper[0] + jx, 0.05), 0.95), min(max(gripper[1] + jy, 0.05), 0.95))

    _check_feasible(objects, goal_center, spec.goal_radius, gripper)
    return WorldState(
        spec=spec,
        gripper_pos=gripper,
        gripper_closed=False,
        consecutive_closed_steps=0,
        held_object=None,
        objects=objects,
        goal_center=goal_center,
        goal_radius=spec.goal_radius,
        step_count=0,
        drop_fired=False,
    )


def _relayout(spec: TaskSpec, seed: int) -> tuple[tuple[ObjectInstance, ...], tuple[float, float]]:
    """Jointly relocate target and goal region to seeded feasible positions."""
    rng = stream(seed, "relayout")
    target = next(o for o in spec.objects if o.is_target)
    others = [o for o in spec.objects if not o.is_target]
    margin = 0.08
    for _ in range(1000):
        tpos = (margin + rng.uniform() * (1 - 2 * margin), margin + rng.uniform() * (1 - 2 * margin))
        gpos = (margin + rng.uniform() * (1 - 2 * margin), margin + rng.uniform() * (1 - 2 * margin))
        if any(dist(tpos, o.pos) < target.radius + o.radius for o in others):
            continue
        if dist(tpos, gpos) < spec.goal_radius + 0.15:
            continue  # target must start clearly outside its goal
        if dist(tpos, gpos) < 0.3:
            continue
        if not (spec.goal_radius <= gpos[0] <= 1 - spec.goal_radius
                and spec.goal_radius <= gpos[1] <= 1 - spec.goal_radius):
            continue
        objects = tuple(replace(o, pos=tpos) if o.is_target else o for o in spec.objects)
        return objects, gpos
    raise ConfigurationError(f"relayout for task {spec.name!r} found no feasible placement")


def step(state: WorldState, action: Action) -> tuple[WorldState, list[str]]:
    """Advance one tick. Total: every action is admissible after clamping."""
    phys = state.spec.physics
    dx = min(max(action.dx, -phys.v_max), phys.v_max)
    dy = min(max(action.dy, -phys.v_max), phys.v_max)
    grip = min(max(action.grip, -1.0), 1.0)
    pos = _clamp01((state.gripper_pos[0] + dx, state.gripper_pos[1] + dy))

    events: list[str] = []
    objects = list(state.objects)
    held = state.held_object
    if held is not None:
        idx = next(i for i, o in enumerate(objects) if o.id == held)
        objects[idx] = replace(objects[idx], pos=pos)

    closed = state.gripper_closed
    ccs = state.consecutive_closed_steps
    drop_fired = state.drop_fired

    if grip > 0.0:
        closed = True
        if held is None:
            candidates = sorted(
                (( dist(pos, o.pos), o.id) for o in objects if dist(pos, o.pos) < phys.r_grasp),
            )
            if candidates:
                held = candidates[0][1]
                idx = next(i for i, o in enumerate(objects) if o.id == held)
                objects[idx] = replace(objects[idx], pos=pos)
                events.append(EV_GRASPED)
        ccs = ccs + 1 if held is not None else 0
    else:
        if held is not None:
            events.append(EV_RELEASED)
        held = None
        closed = False
        ccs = 0

    if (state.spec.family == "drop" and not drop_fired and held is not None
            and ccs >= phys.t_hold):
        idx = next(i for i, o in enumerate(objects) if o.id == held)
        fall_point = _clamp01((pos[0] + phys.fall[0], pos[1] + phys.fall[1]))
        objects[idx] = replace(objects[idx], pos=fall_point)
        held = None
        closed = False
        ccs = 0
        drop_fired = True
        events.append(EV_DROPPED)

    new_state = WorldState(
        spec=state.spec,
        gripper_pos=pos,
        gripper_closed=closed,
        consecutive_closed_steps=ccs,
        held_object=held,
        objects=tuple(objects),
        goal_center=state.goal_center,
        goal_radius=state.goal_radius,
        step_count=state.step_count + 1,
        drop_fired=drop_fired,
    )
    if goal_predicate(new_state) and not goal_predicate(state):
        events.append(EV_GOAL_REACHED)
    return new_state, events


def goal_predicate(state: WorldState) -> bool:
    """True iff the target rests inside the goal region and is not held."""
    target = state.target
    if state.held_object == target.id:
        return False
    return dist(target.pos, state.goal_center) <= state.goal_radius


# ---------------------------------------------------------------------------
# observation rendering
# ---------------------------------------------------------------------------

EXO_CHANNELS = 4  # occupancy, target flag, distractor flag, goal flag
EGO_CHANNELS = 5  # same + held flag


@dataclass(frozen=True)
class ObservationFeatures:
    exo: np.ndarray  # (g, g, 4)
    ego: np.ndarray  # (k, k, 5)


def cell_index(coord: float, g: int) -> int:
    return min(int(coord * g), g - 1)


def render_observation(state: WorldState, exo_grid: int = 12, ego_grid: int = 5) -> ObservationFeatures:
    """Two deterministic views: a table-wide feature grid (exocentric) and a
    gripper-centered local patch with an extra held-flag channel (egocentric)."""
    g = exo_grid
    exo = np.zeros((g, g, EXO_CHANNELS), dtype=np.float64)
    for obj in state.objects:
        ci, cj = cell_index(obj.pos[0], g), cell_index(obj.pos[1], g)
        exo[ci, cj, 0] = 1.0
        if obj.is_target:
            exo[ci, cj, 1] = 1.0
        if obj.is_distractor:
            exo[ci, cj, 2] = 1.0
    centers = (np.arange(g) + 0.5) / g
    cx, cy = np.meshgrid(centers, centers, indexing="ij")
    in_goal = np.hypot(cx - state.goal_center[0], cy - state.goal_center[1]) <= state.goal_radius
    exo[:, :, 3] = in_goal.astype(np.float64)

    k = ego_grid
    half = k // 2
    ego = np.zeros((k, k, EGO_CHANNELS), dtype=np.float64)
    gi, gj = cell_index(state.gripper_pos[0], g), cell_index(state.gripper_pos[1], g)
    for di in range(-half, half + 1):
        for dj in range(-half, half + 1):
            si, sj = gi + di, gj + dj
            if 0 <= si < g and 0 <= sj < g:
                ego[di + half, dj + half, :EXO_CHANNELS] = exo[si, sj, :]
    if state.held_object is not None:
        ego[:, :, 4] = 1.0
    return ObservationFeatures(exo=exo, ego=ego)


def proprioception(state: WorldState) -> np.ndarray:
    """Gripper x, y, aperture (1 open / 0 closed), held flag."""
    return np.array(
        [
            state.gripper_pos[0],
            state.gripper_pos[1],
            0.0 if state.gripper_closed else 1.0,
            1.0 if state.held_object is not None else 0.0,
        ],
        dtype=np.float64,
    )


def state_summary(state: WorldState) -> dict:
    """JSON-friendly per-step summary for episode traces."""
    return {
        "step": state.step_count,
        "gripper": [state.gripper_pos[0], state.gripper_pos[1]],
        "closed": state.gripper_closed,
        "held": state.held_object,
        "drop_fired": state.drop_fired,
        "objects": {str(o.id): [o.pos[0], o.pos[1]] for o in state.objects},
        "goal": {"center": list(state.goal_center), "radius": state.goal_radius},
    }
