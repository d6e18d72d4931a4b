"""Deterministic 2-D tabletop world.

A point robot with a circular tool moves on the unit square under clamped
velocity commands. Objects are discs. In the "pour" task the robot must
reach the target object and dwell near it; in the "sweep" task contact
pushes objects, and the swept object must end up inside a rectangle anchored
at the dustpan object. Scripted experts provide demonstrations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    BoundingBox,
    DemoStep,
    Demonstration,
    RobotState,
    Scene,
    derive_seed,
    readonly_array,
    seeded_rng,
)
from .proposals import FeatureBank, ProposerConfig, propose

TASK_KINDS = ("pour", "sweep")


class PlacementError(ValueError):
    """Objects could not be placed without overlapping footprints."""


class ExpertFailureError(RuntimeError):
    """The scripted expert failed on a condition it was asked to demonstrate."""


@dataclass(frozen=True)
class Placement:
    """Nominal placement of one object: identity, base position, radius."""

    class_id: str
    instance_seed: int
    position: tuple[float, float]
    radius: float = 0.04

    def __post_init__(self):
        x, y = self.position
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"placement of '{self.class_id}' outside [0,1]^2: {self.position}")
        if not (0.0 < self.radius < 0.5):
            raise ValueError(f"radius of '{self.class_id}' must be in (0, 0.5)")


@dataclass(frozen=True)
class PourGeometry:
    radius: float = 0.05
    dwell_steps: int = 5

    def __post_init__(self):
        if self.radius <= 0 or self.dwell_steps < 1:
            raise ValueError("pour geometry needs radius > 0 and dwell_steps >= 1")


@dataclass(frozen=True)
class SweepGeometry:
    """Success rectangle half-extents, anchored at the dustpan object."""

    half_width: float = 0.09
    half_height: float = 0.09

    def __post_init__(self):
        if self.half_width <= 0 or self.half_height <= 0:
            raise ValueError("sweep geometry half-extents must be positive")


@dataclass(frozen=True)
class TaskSpec:
    """Everything that defines a task family (conditions vary by seed)."""

    task_kind: str
    placements: tuple[Placement, ...]
    target_classes: tuple[str, ...]
    horizon: int = 100
    a_max: float = 0.05
    tool_radius: float = 0.03
    robot_start: tuple[float, float] = (0.5, 0.1)
    position_jitter: float = 0.1
    pour: PourGeometry | None = None
    sweep: SweepGeometry | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got '{self.task_kind}'")
        object.__setattr__(self, "placements", tuple(self.placements))
        object.__setattr__(self, "target_classes", tuple(self.target_classes))
        if not self.placements:
            raise ValueError("task needs at least one object placement")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.a_max <= 0 or self.tool_radius <= 0:
            raise ValueError("a_max and tool_radius must be positive")
        if self.position_jitter < 0:
            raise ValueError("position_jitter must be non-negative")
        present = {p.class_id for p in self.placements}
        for cid in self.target_classes:
            if cid not in present:
                raise ValueError(f"target class '{cid}' has no placement")
        if self.task_kind == "pour":
            if len(self.target_classes) != 1:
                raise ValueError("pour needs exactly one target class")
            if self.pour is None:
                object.__setattr__(self, "pour", PourGeometry())
        else:
            if len(self.target_classes) != 2:
                raise ValueError("sweep needs (swept class, dustpan class) as target classes")
            if self.sweep is None:
                object.__setattr__(self, "sweep", SweepGeometry())
        x, y = self.robot_start
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"robot_start outside [0,1]^2: {self.robot_start}")


@dataclass(frozen=True)
class ObjectState:
    class_id: str
    instance_seed: int
    position: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "position", readonly_array(self.position, (2,)))


@dataclass(frozen=True)
class SimState:
    robot: RobotState
    objects: tuple[ObjectState, ...]
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def find(self, class_id: str) -> ObjectState:
        for obj in self.objects:
            if obj.class_id == class_id:
                return obj
        raise KeyError(f"no object of class '{class_id}' in state")


@dataclass(frozen=True)
class Trajectory:
    """A completed episode: states s_0..s_T and the T applied actions."""

    states: tuple[SimState, ...]
    actions: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(readonly_array(a, (2,)) for a in self.actions))


def reset(task: TaskSpec, condition_seed: int) -> SimState:
    """Place objects at their nominal positions plus condition-seeded jitter.

    Jitter draws are retried a bounded number of times if footprints
    overlap; jitter zero reproduces the placements exactly. Unresolvable
    overlap raises PlacementError.
    """
    rng = seeded_rng(derive_seed(condition_seed, "reset"))
    for _ in range(100):
        objects = []
        for p in task.placements:
            pos = np.array(p.position, dtype=float)
            if task.position_jitter > 0.0:
                pos = pos + rng.uniform(-task.position_jitter, task.position_jitter, size=2)
            pos = np.clip(pos, p.radius, 1.0 - p.radius)
            objects.append(ObjectState(p.class_id, p.instance_seed, pos, p.radius))
        ok = True
        for i in range(len(objects)):
            for j in range(i + 1, len(objects)):
                min_dist = objects[i].radius + objects[j].radius
                if np.linalg.norm(objects[i].position - objects[j].position) < min_dist - 1e-9:
                    ok = False
        if ok:
            robot = RobotState(np.array(task.robot_start, dtype=float), np.zeros(2))
            return SimState(robot, tuple(objects), 0)
        if task.position_jitter == 0.0:
            break  # identical placements every attempt; retrying cannot help
    raise PlacementError(
        f"could not place objects without overlap for condition {condition_seed} "
        f"(placements {[(p.class_id, p.position) for p in task.placements]})"
    )


def _resolve_pushes(task: TaskSpec, robot_pos: np.ndarray, objects):
    """Push every overlapped object out along the contact normal.

    If an object is pinned against the arena edge the robot yields instead,
    so tool and footprint never interpenetrate beyond tolerance. Objects
    already inside the dustpan rectangle stay put: the pan holds whatever
    lands in it, so reaching it is irreversible.
    """
    pan = next(o for o in objects if o.class_id == task.target_classes[1])
    new_objects = list(objects)
    for i, obj in enumerate(new_objects):
        if obj is not pan and _in_dustpan(task, obj.position, pan.position):
            continue
        min_dist = task.tool_radius + obj.radius
        delta = obj.position - robot_pos
        dist = float(np.linalg.norm(delta))
        if dist >= min_dist - 1e-12:
            continue
        normal = delta / dist if dist > 1e-12 else np.array([1.0, 0.0])
        pushed = obj.position + normal * (min_dist - dist)
        pushed = np.clip(pushed, obj.radius, 1.0 - obj.radius)
        if np.linalg.norm(pushed - robot_pos) < min_dist - 1e-9:
            # object pinned at the edge: back the robot off along the normal
            robot_pos = pushed - normal * min_dist
            robot_pos = np.clip(robot_pos, 0.0, 1.0)
        new_objects[i] = replace(obj, position=pushed)
    return robot_pos, tuple(new_objects)


def step(task: TaskSpec, state: SimState, action) -> SimState:
    """Advance one step: clamp the action, integrate, clamp to the arena.

    Sweep tasks also resolve tool-object contact by pushing objects out
    along the contact normal. Pure function: the input state is unchanged.
    """
    a = np.asarray(action, dtype=float)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite 2-vector, got {a!r}")
    v = np.clip(a, -task.a_max, task.a_max)
    new_pos = np.clip(state.robot.position + v, 0.0, 1.0)
    objects = state.objects
    if task.task_kind == "sweep":
        new_pos, objects = _resolve_pushes(task, new_pos, objects)
    velocity = new_pos - state.robot.position
    return SimState(RobotState(new_pos, velocity), objects, state.t + 1)


def observe(
    state: SimState,
    bank: FeatureBank,
    proposer: ProposerConfig,
    rng: np.random.Generator,
    scene_id: str | None = None,
) -> Scene:
    """Render the state into a Scene via the proposal oracle.

    True boxes are the (position ± radius) footprints, clipped to the unit
    square, before proposal jitter is applied.
    """
    true_objects = []
    for obj in state.objects:
        x, y = obj.position
        r = obj.radius
        box = BoundingBox(
            max(0.0, x - r), max(0.0, y - r), min(1.0, x + r), min(1.0, y + r)
        )
        true_objects.append((obj.class_id, obj.instance_seed, box))
    return propose(
        true_objects, bank, proposer, rng,
        scene_id=scene_id if scene_id is not None else f"t{state.t}",
    )


def _in_dustpan(task: TaskSpec, swept_pos: np.ndarray, pan_pos: np.ndarray) -> bool:
    assert task.sweep is not None
    offset = np.abs(swept_pos - pan_pos)
    return bool(offset[0] <= task.sweep.half_width and offset[1] <= task.sweep.half_height)


def _pour_action(task: TaskSpec, state: SimState) -> np.ndarray:
    # gain below 1 leaves a band of unsaturated approach actions around the
    # target, so cloned policies get graded labels there instead of a cliff
    # between full speed and zero
    target = state.find(task.target_classes[0])
    return np.clip(0.6 * (target.position - state.robot.position), -task.a_max, task.a_max)


def _sweep_action(task: TaskSpec, state: SimState) -> np.ndarray:
    # one continuous vector field, not a mode switch: cloned policies inherit
    # every discontinuity as irreducible regression error, and a field that
    # flickers between detour and approach from one step to the next is what
    # made earlier clones stall short of contact
    swept = state.find(task.target_classes[0])
    pan = state.find(task.target_classes[1])
    if _in_dustpan(task, swept.position, pan.position):
        return np.zeros(2)
    to_pan = pan.position - swept.position
    dist_to_pan = float(np.linalg.norm(to_pan))
    u = to_pan / dist_to_pan if dist_to_pan > 1e-9 else np.array([1.0, 0.0])
    contact = task.tool_radius + swept.radius
    pre = swept.position - u * (contact + 0.02)
    rel = state.robot.position - swept.position
    d = float(np.linalg.norm(rel))
    radial_dir = rel / max(d, 1e-9)
    to_pre = pre - state.robot.position
    d_pre = float(np.linalg.norm(to_pre))
    # analog blockage of the straight segment to the pre-contact point
    block = 0.0
    if d_pre > 1e-9:
        t = np.clip(np.dot(swept.position - state.robot.position, to_pre) / d_pre**2, 0.0, 1.0)
        clear = float(np.linalg.norm(swept.position - (state.robot.position + t * to_pre)))
        block = float(np.clip((contact + 0.01 - clear) / 0.03, 0.0, 1.0))
    # the detour component always curls counterclockwise; a side picked from
    # fine geometry gives opposite actions at near-identical observations
    tangent = np.array([-rel[1], rel[0]]) / max(d, 1e-9)
    graze = float(np.clip((contact + 0.01 - d) / 0.02, 0.0, 1.0))
    # longitudinal correction never pulls back against the push while the
    # robot sits in the thin contact band just past the pre-contact point,
    # but a robot far beyond it (for instance on the pan side of the object)
    # is pulled back around
    long_signed = float(np.dot(to_pre, u))
    long_err = long_signed if long_signed > 0.0 else min(long_signed + 0.06, 0.0)
    lat_vec = to_pre - long_signed * u
    v = long_err * u + lat_vec + 0.10 * block * tangent + 0.05 * graze * radial_dir
    # fade into a straight push toward the pan as the robot reaches the
    # pre-contact point, keeping the lateral term so off-center contact
    # self-corrects instead of drifting
    d_eff = float(np.hypot(abs(long_err), np.linalg.norm(lat_vec)))
    alpha = float(np.exp(-((d_eff / 0.03) ** 2)))
    v = (1.0 - alpha) * v + alpha * (u * task.a_max + 1.2 * lat_vec)
    if float(np.linalg.norm(v)) < 0.004:
        v = v + 0.01 * tangent  # step off the stagnation point behind the object
    return np.clip(v, -task.a_max, task.a_max)


def scripted_expert(task: TaskSpec, state: SimState) -> np.ndarray:
    """Deterministic expert controller for the task family.

    Pour: proportional control toward the target object (zero at the
    target). Sweep: move to a pre-contact point behind the swept object on
    the object-to-dustpan line, then push through toward the dustpan; stop
    once the object is inside the dustpan rectangle.
    """
    if task.task_kind == "pour":
        return _pour_action(task, state)
    return _sweep_action(task, state)


def success(task: TaskSpec, trajectory: Trajectory) -> bool:
    """Task success predicate over a completed trajectory.

    Pour: the robot stays within the pour radius of the target object for
    the required number of consecutive steps. Sweep: the swept object's
    center ends inside the dustpan rectangle at the final step.
    """
    if task.task_kind == "pour":
        assert task.pour is not None
        run = 0
        for state in trajectory.states:
            target = state.find(task.target_classes[0])
            if np.linalg.norm(state.robot.position - target.position) <= task.pour.radius:
                run += 1
                if run >= task.pour.dwell_steps:
                    return True
            else:
                run = 0
        return False
    final = trajectory.states[-1]
    swept = final.find(task.target_classes[0])
    pan = final.find(task.target_classes[1])
    return _in_dustpan(task, swept.position, pan.position)


def run_expert_episode(
    task: TaskSpec,
    condition_seed: int,
    bank: FeatureBank,
    proposer: ProposerConfig,
    settle_steps: int = 5,
):
    """Roll the scripted expert for one condition; returns (trajectory, scenes, actions).

    The episode ends shortly after the task's success predicate holds:
    demonstrations record the transit, the completion, and ``settle_steps``
    of the expert holding station at the goal, not a long tail of idling.
    """
    rng = seeded_rng(derive_seed(condition_seed, "demo"))
    state = reset(task, condition_seed)
    states = [state]
    scenes = []
    actions = []
    remaining = None
    for _ in range(task.horizon):
        scenes.append(observe(state, bank, proposer, rng))
        a = np.clip(scripted_expert(task, state), -task.a_max, task.a_max)
        actions.append(a)
        state = step(task, state, a)
        states.append(state)
        if remaining is None:
            if success(task, Trajectory(tuple(states), tuple(actions))):
                remaining = settle_steps
        else:
            remaining -= 1
        if remaining is not None and remaining <= 0:
            break
    return Trajectory(tuple(states), tuple(actions)), scenes, actions


def collect_demonstrations(
    task: TaskSpec,
    n_episodes: int,
    condition_seeds,
    bank: FeatureBank,
    proposer: ProposerConfig,
    target_convention: str = "ee_delta",
) -> list[Demonstration]:
    """Run the scripted expert over conditions and package the episodes.

    The expert must succeed on every requested condition; a failure raises
    ExpertFailureError naming the condition rather than silently producing
    a bad demonstration. n_episodes=0 returns an empty list.
    """
    seeds = list(condition_seeds)
    if len(seeds) < n_episodes:
        raise ValueError(f"need {n_episodes} condition seeds, got {len(seeds)}")
    # pour needs hold-at-goal samples (success is a dwell); sweep does not
    # (the dustpan keeps what lands in it), and idle samples would teach a
    # cloned policy that low speed means stop everywhere
    settle = 5 if task.task_kind == "pour" else 0
    demos = []
    for cond in seeds[:n_episodes]:
        trajectory, scenes, actions = run_expert_episode(
            task, cond, bank, proposer, settle_steps=settle
        )
        if not success(task, trajectory):
            raise ExpertFailureError(
                f"scripted expert failed on condition {cond} for task '{task.task_kind}'"
            )
        steps = []
        for t in range(len(actions)):
            if target_convention == "ee_delta":
                target = trajectory.states[t + 1].robot.position - trajectory.states[t].robot.position
            else:
                target = actions[t]
            steps.append(DemoStep(trajectory.states[t].robot, scenes[t], target))
        demos.append(
            Demonstration(f"{task.task_kind}-c{cond}", tuple(steps), target_convention)
        )
    return demos
