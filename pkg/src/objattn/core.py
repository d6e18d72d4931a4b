"""Core domain types, seeded randomness, and the error taxonomy.

Everything downstream (proposal generation, attention, the simulator, the
experiment harness) builds on the small immutable types defined here. Arrays
are float64 and marked read-only so values can be shared freely without
defensive copies.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SCHEMA_VERSION = "1"

TARGET_CONVENTIONS = ("action", "ee_delta")


class ArtifactError(Exception):
    """Base class for artifact load/save failures."""


class SchemaError(ArtifactError):
    """Malformed artifact content; the message names the offending field."""


class VersionError(ArtifactError):
    """Artifact declares a schema_version this code does not support."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a deterministic random generator for ``seed``.

    Uses the PCG64 bit generator, which is algorithmically specified and
    produces the same stream on every platform. Equal seeds give equal
    streams; nearby seeds give unrelated streams.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(*parts) -> int:
    """Stable 63-bit child seed from labeled parts.

    Hashing (rather than arithmetic on the parent seed) keeps independently
    derived streams from colliding when experiments nest seed namespaces.
    """
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def readonly_array(values, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce to a read-only float64 array, checking shape and finiteness."""
    arr = np.array(values, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates.

    Invariant: 0 <= x_min < x_max <= 1 and 0 <= y_min < y_max <= 1.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} is not finite")
            object.__setattr__(self, name, v)
        if not (0.0 <= self.x_min < self.x_max <= 1.0):
            raise ValueError(
                f"invalid x extent [{self.x_min}, {self.x_max}] (need 0 <= x_min < x_max <= 1)"
            )
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(
                f"invalid y extent [{self.y_min}, {self.y_max}] (need 0 <= y_min < y_max <= 1)"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0])

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (4,):
            raise ValueError(f"box array must have shape (4,), got {arr.shape}")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class ObjectProposal:
    """One region proposal: a box plus a semantic feature vector.

    ``label`` is ground truth used only by evaluation code; learners never
    read it.
    """

    box: BoundingBox
    feature: np.ndarray
    label: str | None = None

    def __post_init__(self):
        feat = readonly_array(self.feature)
        if feat.ndim != 1 or feat.shape[0] < 1:
            raise ValueError(f"feature must be a 1-D vector, got shape {feat.shape}")
        object.__setattr__(self, "feature", feat)
        if not isinstance(self.box, BoundingBox):
            object.__setattr__(self, "box", BoundingBox.from_array(self.box))
        if self.label is not None and not isinstance(self.label, str):
            raise ValueError("label must be a string or None")


@dataclass(frozen=True)
class Scene:
    """A set of object proposals observed at one instant.

    Invariants: at least one proposal; all features share one dimension.
    """

    scene_id: str
    proposals: tuple[ObjectProposal, ...]

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        if len(self.proposals) < 1:
            raise ValueError("scene must contain at least one proposal")
        dims = {p.feature.shape[0] for p in self.proposals}
        if len(dims) != 1:
            raise ValueError(f"proposals disagree on feature dimension: {sorted(dims)}")

    @property
    def feature_dim(self) -> int:
        return self.proposals[0].feature.shape[0]

    def __len__(self) -> int:
        return len(self.proposals)

    @cached_property
    def _boxes(self) -> np.ndarray:
        arr = np.stack([p.box.as_array() for p in self.proposals])
        arr.setflags(write=False)
        return arr

    @cached_property
    def _features(self) -> np.ndarray:
        arr = np.stack([p.feature for p in self.proposals])
        arr.setflags(write=False)
        return arr

    def boxes(self) -> np.ndarray:
        """(N, 4) array of box coordinates in proposal order."""
        return self._boxes

    def features(self) -> np.ndarray:
        """(N, d) array of raw (not necessarily unit-norm) features."""
        return self._features

    def labels(self) -> tuple[str | None, ...]:
        return tuple(p.label for p in self.proposals)


@dataclass(frozen=True)
class RobotState:
    """Planar end-effector state: position and velocity, both 2-vectors."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", readonly_array(self.position, (2,)))
        object.__setattr__(self, "velocity", readonly_array(self.velocity, (2,)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class DemoStep:
    """One demonstration step: robot state, scene, and supervised target."""

    state: RobotState
    scene: Scene
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", readonly_array(self.target, (2,)))


@dataclass(frozen=True)
class Demonstration:
    """A demonstrated episode: a sequence of (state, scene, target) steps.

    ``target_convention`` records what the target column means:
    "action" for commanded velocities, "ee_delta" for realized position
    deltas. A demonstration needs at least two steps and a single feature
    dimension throughout.
    """

    episode_id: str
    steps: tuple[DemoStep, ...]
    target_convention: str = "ee_delta"

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValueError(
                f"demonstration '{self.episode_id}' has {len(self.steps)} steps; need at least 2"
            )
        if self.target_convention not in TARGET_CONVENTIONS:
            raise ValueError(
                f"unknown target_convention '{self.target_convention}'; "
                f"expected one of {TARGET_CONVENTIONS}"
            )
        dims = {s.scene.feature_dim for s in self.steps}
        if len(dims) != 1:
            raise ValueError(
                f"demonstration '{self.episode_id}' mixes feature dimensions: {sorted(dims)}"
            )

    @property
    def feature_dim(self) -> int:
        return self.steps[0].scene.feature_dim
