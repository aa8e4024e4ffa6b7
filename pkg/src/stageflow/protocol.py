"""External-observer wire protocol: JSON request/response documents and an
HTTP client with retry and graceful degradation.

The response format is two fields: "visual_evidence" (non-empty list of
strings) and "task_stage_cues" (one string describing the ongoing action).
Free-text stage strings map onto the stage enum through a fixed, ordered
keyword table; anything unmapped falls back to "approach" with a parse note
kept on the cue.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request

import numpy as np

from .errors import ProtocolParseError, ProtocolSchemaError
from .observer import (
    EK_DISTRACTOR_ADJACENT,
    EK_HELD,
    EK_NOT_HELD,
    EK_NOTE,
    EK_TARGET_CELL,
    EK_TARGET_IN_GOAL,
    EK_TARGET_OUTSIDE_GOAL,
    Evidence,
    TaskStageCue,
)
from .world import ObservationFeatures

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are an expert robot task assistant, integrated with a robot arm capable of "
    "executing physical actions in the real world. Based on the task goal and observation, "
    "provide the additional task-stage information to the robot in a structured and "
    "precise way."
)

RULES = (
    "LIST the current state of all relevant objects (robot arm, scene objects) as visual evidence.",
    "DEFINE clear completion conditions for each task stage.",
    "Determine the current task_stage_cues based on object states and describe it as an ongoing action.",
)

OUTPUT_FORMAT = {
    "visual_evidence": ["<evidence_1>", "..."],
    "task_stage_cues": "<task_stage_cues>",
}

# Ordered: the first stage whose any keyword occurs in the (casefolded) text
# wins. Recovery phrasing is checked first so "locating ..." never lands on
# approach.
STAGE_KEYWORDS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("recover", ("locat", "pick up again", "picking it up again", "re-pick", "repick",
                 "retriev", "recover", "fallen", "search")),
    ("done", ("task is complete", "task complete", "finished", "completed", "done")),
    ("place", ("plac", "releas", "lower", "put down", "putting down", "set down")),
    ("transport", ("transport", "carry", "moving to", "toward the goal", "to the goal",
                   "to the basket", "lift")),
    ("grasp", ("grasp", "grip", "closing", "pick up", "picking up")),
    ("approach", ("approach", "reaching", "moving toward", "navigat")),
)

STAGE_PHRASES = {
    "approach": "Approaching the target object",
    "grasp": "Grasping the target object",
    "transport": "Transporting the target object to the goal zone",
    "place": "Placing the target object in the goal zone",
    "recover": "Locating the fallen target object and picking it up again",
    "done": "Task is complete",
}

_CELL_RE = re.compile(r"cell \((\d+),\s*(\d+)\)")


def build_vlm_request(observation_rendering, instruction: str, goal: str) -> dict:
    """Request document: system prompt, rules block, and the input fields."""
    return {
        "system": SYSTEM_PROMPT,
        "rules": list(RULES),
        "instruction": instruction,
        "task_goal": goal,
        "observation": observation_rendering,
        "output_format": OUTPUT_FORMAT,
    }


def serialize(document: dict) -> bytes:
    """Byte-stable JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def map_stage_text(text: str) -> tuple[str, str | None]:
    """Stage string for free text, plus a note when nothing matched."""
    lowered = text.casefold()
    for stage, keywords in STAGE_KEYWORDS:
        if any(kw in lowered for kw in keywords):
            return stage, None
    return "approach", f"unmapped task_stage_cues: {text!r}"


def map_evidence_text(text: str) -> Evidence:
    """One predicate per string, first matching rule in a fixed order."""
    lowered = text.casefold()
    cell_match = _CELL_RE.search(lowered)
    if "not grasped" in lowered or "not held" in lowered or "not holding" in lowered:
        return Evidence(EK_NOT_HELD, text)
    if "grasped" in lowered or "held by" in lowered or "holding" in lowered:
        return Evidence(EK_HELD, text)
    if "outside the goal" in lowered or "not in the goal" in lowered or "outside goal" in lowered:
        return Evidence(EK_TARGET_OUTSIDE_GOAL, text)
    if "inside the goal" in lowered or "in the goal" in lowered or "in the basket" in lowered:
        return Evidence(EK_TARGET_IN_GOAL, text)
    if cell_match:
        return Evidence(EK_TARGET_CELL, text, cell=(int(cell_match.group(1)), int(cell_match.group(2))))
    if "distractor" in lowered or "visually similar" in lowered:
        return Evidence(EK_DISTRACTOR_ADJACENT, text)
    return Evidence(EK_NOTE, text)


def parse_vlm_response(body: bytes, grid: int = 12) -> TaskStageCue:
    """Extract and map the two response fields into a cue.

    Malformed JSON/UTF-8 raises ProtocolParseError; a missing field, wrong
    type, or empty evidence list raises ProtocolSchemaError. A recover-stage
    cue gets its target hint from cell evidence when present.
    """
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolParseError(f"response body is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolSchemaError("response must be a JSON object")
    if "visual_evidence" not in payload or "task_stage_cues" not in payload:
        raise ProtocolSchemaError("response needs visual_evidence and task_stage_cues")
    raw_evidence = payload["visual_evidence"]
    raw_stage = payload["task_stage_cues"]
    if (not isinstance(raw_evidence, list) or not raw_evidence
            or not all(isinstance(e, str) for e in raw_evidence)):
        raise ProtocolSchemaError("visual_evidence must be a non-empty list of strings")
    if not isinstance(raw_stage, str) or not raw_stage:
        raise ProtocolSchemaError("task_stage_cues must be a non-empty string")

    stage, note = map_stage_text(raw_stage)
    evidence = [map_evidence_text(e) for e in raw_evidence]
    hint = None
    for item in evidence:
        if item.cell is not None:
            hint = ((item.cell[0] + 0.5) / grid, (item.cell[1] + 0.5) / grid)
            break
    return TaskStageCue(stage=stage, evidence=evidence, target_hint=hint, note=note)


def cue_to_response(cue: TaskStageCue) -> dict:
    """Render a cue as a response document (the protocol's output format)."""
    return {
        "visual_evidence": [item.text for item in cue.evidence],
        "task_stage_cues": STAGE_PHRASES[cue.stage],
    }


def observation_text(features: ObservationFeatures) -> str:
    """Deterministic text rendering of an observation for an external model."""
    lines = []
    g = features.exo.shape[0]
    for i in range(g):
        for j in range(g):
            cell = features.exo[i, j]
            if cell[0] or cell[3]:
                tags = []
                if cell[0]:
                    tags.append("object")
                if cell[1]:
                    tags.append("target")
                if cell[2]:
                    tags.append("distractor")
                if cell[3]:
                    tags.append("goal")
                lines.append(f"cell ({i}, {j}): {'+'.join(tags)}")
    held = bool(np.any(features.ego[:, :, 4]))
    lines.append(f"gripper holding object: {'yes' if held else 'no'}")
    return "\n".join(lines)


class VlmClient:
    """HTTP backend for the observer protocol.

    POSTs the request document as JSON; timeouts and bad responses retry up
    to `retries` times, after which the client degrades to the last valid
    cue (logged). Requests should be keyed by (episode, step) by the caller;
    cues must be applied by key, never by arrival order.
    """

    def __init__(self, endpoint: str, timeout_s: float = 5.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.retries = retries
        self.last_valid: TaskStageCue | None = None

    def observe(self, observation_rendering, instruction: str, goal: str) -> TaskStageCue:
        body = serialize(build_vlm_request(observation_rendering, instruction, goal))
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(request, timeout=self.timeout_s) as resp:
                    cue = parse_vlm_response(resp.read())
                self.last_valid = cue
                return cue
            except (urllib.error.URLError, TimeoutError, OSError,
                    ProtocolParseError, ProtocolSchemaError) as exc:
                log.warning("observer request attempt %d failed: %s", attempt + 1, exc)
        log.warning("observer degraded to last valid cue after %d attempts", self.retries + 1)
        if self.last_valid is not None:
            return self.last_valid
        return TaskStageCue(
            stage="approach",
            evidence=[Evidence(EK_NOTE, "observer unavailable")],
            note="observer unavailable; no prior cue",
        )
