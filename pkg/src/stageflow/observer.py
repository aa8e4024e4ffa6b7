"""Task-stage observer: structured cues from world state, and their encoding.

The oracle backend reads ground-truth state and stands in for a much
stronger vision-language model; it is a pure function of the state. Cues are
encoded by mean-pooling one feature vector per evidence item (stage one-hot,
evidence-kind one-hot, normalized target offset) and projecting the pooled
vector through a learned bias-free linear map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .world import WorldState, cell_index, dist, goal_predicate

STAGES = ("approach", "grasp", "transport", "place", "recover", "done")

EK_HELD = "held"
EK_NOT_HELD = "not_held"
EK_TARGET_CELL = "target_cell"
EK_TARGET_IN_GOAL = "target_in_goal"
EK_TARGET_OUTSIDE_GOAL = "target_outside_goal"
EK_DISTRACTOR_ADJACENT = "distractor_adjacent"
EK_NOTE = "note"  # unmapped free text; contributes no kind bit

EVIDENCE_KINDS = (
    EK_HELD,
    EK_NOT_HELD,
    EK_TARGET_CELL,
    EK_TARGET_IN_GOAL,
    EK_TARGET_OUTSIDE_GOAL,
    EK_DISTRACTOR_ADJACENT,
)

POOLED_DIM = len(STAGES) + len(EVIDENCE_KINDS) + 2

DISTRACTOR_ADJACENCY = 0.12  # world units between target and a lookalike


@dataclass(frozen=True)
class Evidence:
    kind: str
    text: str
    cell: tuple[int, int] | None = None


@dataclass
class TaskStageCue:
    """Observer output: stage intention plus ordered visual evidence.

    arm_pos is the observer's reading of the robot arm state (the protocol
    asks it to list the arm among the relevant objects); it anchors the
    normalized target offset used by the encoder.
    """

    stage: str
    evidence: list[Evidence]
    target_hint: tuple[float, float] | None = None
    arm_pos: tuple[float, float] | None = None
    note: str | None = None

    def validate(self) -> "TaskStageCue":
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if not self.evidence:
            raise ConfigurationError("cue evidence list must be non-empty")
        if self.stage == "recover":
            kinds = {e.kind for e in self.evidence}
            if EK_NOT_HELD not in kinds or self.target_hint is None:
                raise ConfigurationError("recover cue needs not-held evidence and a target hint")
        return self


@dataclass(frozen=True)
class CueEmbedding:
    z: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise ConfigurationError("cue embedding has non-finite entries")


def observe_oracle(state: WorldState, instruction: str = "") -> TaskStageCue:
    """Deterministic stage machine over ground-truth state.

    Stage cascade: done if the goal predicate holds; place while holding
    inside the goal region; transport while holding; recover after a fired
    drop with the goal unmet; grasp within reach of the target; else
    approach.
    """
    phys = state.spec.physics
    target = state.target
    holding = state.held_object is not None
    target_held = state.held_object == target.id
    goal_met = goal_predicate(state)
    gripper_in_goal = dist(state.gripper_pos, state.goal_center) <= state.goal_radius

    if goal_met:
        stage = "done"
    elif holding and gripper_in_goal:
        stage = "place"
    elif holding:
        stage = "transport"
    elif state.drop_fired and not holding and not goal_met:
        stage = "recover"
    elif dist(state.gripper_pos, target.pos) < phys.r_grasp and not holding:
        stage = "grasp"
    else:
        stage = "approach"

    grid = 12
    tcell = (cell_index(target.pos[0], grid), cell_index(target.pos[1], grid))
    evidence = [
        Evidence(EK_HELD, "the target object is grasped by the robot arm")
        if target_held
        else Evidence(EK_NOT_HELD, "the target object is not grasped by the robot arm"),
        Evidence(EK_TARGET_CELL, f"the target object is at cell ({tcell[0]}, {tcell[1]})", cell=tcell),
        Evidence(EK_TARGET_IN_GOAL, "the target object is inside the goal region")
        if dist(target.pos, state.goal_center) <= state.goal_radius
        else Evidence(EK_TARGET_OUTSIDE_GOAL, "the target object is outside the goal region"),
    ]
    for obj in state.objects:
        if obj.is_distractor and dist(obj.pos, target.pos) <= DISTRACTOR_ADJACENCY:
            evidence.append(
                Evidence(EK_DISTRACTOR_ADJACENT, "a visually similar distractor is adjacent to the target")
            )
            break

    return TaskStageCue(
        stage=stage,
        evidence=evidence,
        target_hint=target.pos,
        arm_pos=state.gripper_pos,
    ).validate()


def evidence_vector(cue: TaskStageCue, item: Evidence) -> np.ndarray:
    """Per-evidence feature vector: stage one-hot, kind one-hot, offset."""
    vec = np.zeros(POOLED_DIM, dtype=np.float64)
    vec[STAGES.index(cue.stage)] = 1.0
    if item.kind in EVIDENCE_KINDS:
        vec[len(STAGES) + EVIDENCE_KINDS.index(item.kind)] = 1.0
    if cue.target_hint is not None and cue.arm_pos is not None:
        off = np.clip(
            [cue.target_hint[0] - cue.arm_pos[0], cue.target_hint[1] - cue.arm_pos[1]], -1.0, 1.0
        )
        vec[-2:] = off
    return vec


def pool_cue(cue: TaskStageCue) -> np.ndarray:
    """Mean over per-evidence feature vectors."""
    if not cue.evidence:
        raise ConfigurationError("cannot pool an empty evidence list")
    rows = np.stack([evidence_vector(cue, e) for e in cue.evidence])
    return rows.mean(axis=0)


def encode_cue(cue: TaskStageCue, proj: np.ndarray) -> CueEmbedding:
    """z = Proj(Pool(cue)); Proj is bias-free, so encoding stays linear."""
    if proj.ndim != 2 or proj.shape[0] != POOLED_DIM:
        raise ConfigurationError(
            f"cue projection must be ({POOLED_DIM}, d_cue), got {proj.shape}"
        )
    return CueEmbedding(z=pool_cue(cue) @ proj)
