"""JSON persistence for every artifact type.

All files carry an explicit ``schema_version``. Loading validates structure
and domain invariants, raising :class:`SchemaError` naming the offending
field, or :class:`VersionError` for an unsupported version. Numbers survive
a save/load round trip exactly (JSON doubles are emitted with full
precision).
"""
from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .core import (
    SCHEMA_VERSION,
    TARGET_CONVENTIONS,
    BoundingBox,
    DemoStep,
    Demonstration,
    ObjectProposal,
    RobotState,
    Scene,
    SchemaError,
    VersionError,
)


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: top-level value must be an object")
    return data


def require(d: dict, key: str, ctx: str) -> Any:
    if key not in d:
        raise SchemaError(f"missing field '{ctx}.{key}'")
    return d[key]


def check_version(d: dict, ctx: str) -> None:
    version = require(d, "schema_version", ctx)
    if version != SCHEMA_VERSION:
        raise VersionError(
            f"unsupported schema_version '{version}' in {ctx}; this build reads version '{SCHEMA_VERSION}'"
        )


def _number_list(value, ctx: str) -> list[float]:
    if not isinstance(value, (list, tuple)):
        raise SchemaError(f"'{ctx}' must be a list of numbers")
    out = []
    for i, v in enumerate(value):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"'{ctx}[{i}]' must be a number")
        out.append(float(v))
    return out


# ---------------------------------------------------------------------------
# Scene


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "proposals": [
            {
                "box": [p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max],
                "feature": p.feature.tolist(),
                **({"label": p.label} if p.label is not None else {}),
            }
            for p in scene.proposals
        ],
    }


def scene_from_dict(d: dict, ctx: str = "scene") -> Scene:
    check_version(d, ctx)
    scene_id = require(d, "scene_id", ctx)
    if not isinstance(scene_id, str):
        raise SchemaError(f"'{ctx}.scene_id' must be a string")
    raw = require(d, "proposals", ctx)
    if not isinstance(raw, list) or len(raw) < 1:
        raise SchemaError(f"'{ctx}.proposals' must be a non-empty list")
    proposals = []
    for i, pd in enumerate(raw):
        pctx = f"{ctx}.proposals[{i}]"
        if not isinstance(pd, dict):
            raise SchemaError(f"'{pctx}' must be an object")
        box_vals = _number_list(require(pd, "box", pctx), f"{pctx}.box")
        if len(box_vals) != 4:
            raise SchemaError(f"'{pctx}.box' must have 4 entries")
        try:
            box = BoundingBox(*box_vals)
        except ValueError as exc:
            raise SchemaError(f"'{pctx}.box': {exc}") from exc
        feature = _number_list(require(pd, "feature", pctx), f"{pctx}.feature")
        label = pd.get("label")
        if label is not None and not isinstance(label, str):
            raise SchemaError(f"'{pctx}.label' must be a string")
        try:
            proposals.append(ObjectProposal(box, np.array(feature), label))
        except ValueError as exc:
            raise SchemaError(f"'{pctx}': {exc}") from exc
    try:
        return Scene(scene_id, tuple(proposals))
    except ValueError as exc:
        raise SchemaError(f"'{ctx}': {exc}") from exc


# ---------------------------------------------------------------------------
# Demonstration


def demonstration_to_dict(demo: Demonstration) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "episode_id": demo.episode_id,
        "target_convention": demo.target_convention,
        "steps": [
            {
                "state": {
                    "pos": step.state.position.tolist(),
                    "vel": step.state.velocity.tolist(),
                },
                "scene": scene_to_dict(step.scene),
                "target": step.target.tolist(),
            }
            for step in demo.steps
        ],
    }


def demonstration_from_dict(d: dict, ctx: str = "demonstration", base_dir: str | None = None) -> Demonstration:
    check_version(d, ctx)
    episode_id = require(d, "episode_id", ctx)
    if not isinstance(episode_id, str):
        raise SchemaError(f"'{ctx}.episode_id' must be a string")
    convention = require(d, "target_convention", ctx)
    if convention not in TARGET_CONVENTIONS:
        raise SchemaError(
            f"'{ctx}.target_convention' must be one of {list(TARGET_CONVENTIONS)}, got {convention!r}"
        )
    raw_steps = require(d, "steps", ctx)
    if not isinstance(raw_steps, list) or len(raw_steps) < 2:
        raise SchemaError(f"'{ctx}.steps' must be a list with at least 2 entries")
    steps = []
    for i, sd in enumerate(raw_steps):
        sctx = f"{ctx}.steps[{i}]"
        if not isinstance(sd, dict):
            raise SchemaError(f"'{sctx}' must be an object")
        state_d = require(sd, "state", sctx)
        if not isinstance(state_d, dict):
            raise SchemaError(f"'{sctx}.state' must be an object")
        pos = _number_list(require(state_d, "pos", f"{sctx}.state"), f"{sctx}.state.pos")
        vel = _number_list(require(state_d, "vel", f"{sctx}.state"), f"{sctx}.state.vel")
        if len(pos) != 2 or len(vel) != 2:
            raise SchemaError(f"'{sctx}.state' pos/vel must each have 2 entries")
        scene_d = require(sd, "scene", sctx)
        if not isinstance(scene_d, dict):
            raise SchemaError(f"'{sctx}.scene' must be an object")
        if "ref" in scene_d:
            ref = scene_d["ref"]
            if not isinstance(ref, str):
                raise SchemaError(f"'{sctx}.scene.ref' must be a path string")
            ref_path = ref if os.path.isabs(ref) or base_dir is None else os.path.join(base_dir, ref)
            if not os.path.exists(ref_path):
                raise SchemaError(f"'{sctx}.scene.ref' points at missing file {ref_path}")
            scene = scene_from_dict(read_json(ref_path), ctx=f"{sctx}.scene(ref={ref})")
        else:
            scene = scene_from_dict(scene_d, ctx=f"{sctx}.scene")
        target = _number_list(require(sd, "target", sctx), f"{sctx}.target")
        if len(target) != 2:
            raise SchemaError(f"'{sctx}.target' must have 2 entries")
        try:
            steps.append(DemoStep(RobotState(pos, vel), scene, np.array(target)))
        except ValueError as exc:
            raise SchemaError(f"'{sctx}': {exc}") from exc
    try:
        return Demonstration(episode_id, tuple(steps), convention)
    except ValueError as exc:
        raise SchemaError(f"'{ctx}': {exc}") from exc


def demo_set_to_dict(demos) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "demonstrations": [demonstration_to_dict(d) for d in demos],
    }


def demo_set_from_dict(d: dict, base_dir: str | None = None) -> list[Demonstration]:
    check_version(d, "demo_set")
    raw = require(d, "demonstrations", "demo_set")
    if not isinstance(raw, list):
        raise SchemaError("'demo_set.demonstrations' must be a list")
    return [
        demonstration_from_dict(dd, ctx=f"demo_set.demonstrations[{i}]", base_dir=base_dir)
        for i, dd in enumerate(raw)
    ]


def save_demos(path: str, demos) -> None:
    write_json(path, demo_set_to_dict(demos))


def load_demos(path: str) -> list[Demonstration]:
    return demo_set_from_dict(read_json(path), base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Universal save/load

def save_artifact(path: str, obj) -> None:
    """Serialize any supported artifact to ``path`` by type dispatch."""
    from . import attention, experiments, policy, proposals

    if isinstance(obj, Scene):
        write_json(path, scene_to_dict(obj))
    elif isinstance(obj, Demonstration):
        write_json(path, demonstration_to_dict(obj))
    elif isinstance(obj, (list, tuple)) and all(isinstance(x, Demonstration) for x in obj):
        write_json(path, demo_set_to_dict(obj))
    elif isinstance(obj, attention.AttentionModel):
        write_json(path, attention.model_to_dict(obj))
    elif isinstance(obj, policy.Policy):
        write_json(path, policy.policy_to_dict(obj))
    elif isinstance(obj, proposals.FeatureBank):
        write_json(path, proposals.bank_to_dict(obj))
    elif isinstance(obj, experiments.ExperimentReport):
        write_json(path, experiments.report_to_dict(obj))
    elif isinstance(obj, experiments.ExperimentSpec):
        write_json(path, experiments.spec_to_dict(obj))
    else:
        raise ArtifactTypeError(f"cannot serialize object of type {type(obj).__name__}")


class ArtifactTypeError(SchemaError):
    pass


def load_artifact(path: str):
    """Load any supported artifact, inferring its type from the content."""
    from . import attention, experiments, policy, proposals

    data = read_json(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    if "proposals" in data:
        return scene_from_dict(data)
    if "episode_id" in data and "steps" in data:
        return demonstration_from_dict(data, base_dir=base_dir)
    if "demonstrations" in data:
        return demo_set_from_dict(data, base_dir=base_dir)
    if "W" in data and "predictor" in data:
        return attention.model_from_dict(data)
    if "layers" in data and "vision" in data:
        return policy.policy_from_dict(data)
    if "classes" in data and "dimension" in data:
        return proposals.bank_from_dict(data)
    if "experiment_kind" in data and "conditions" in data:
        return experiments.report_from_dict(data)
    if "experiment_kind" in data:
        return experiments.spec_from_dict(data)
    raise SchemaError(f"{path}: unrecognized artifact (no known discriminating fields)")
