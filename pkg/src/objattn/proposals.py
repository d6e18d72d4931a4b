"""Synthetic object-proposal oracle.

Stands in for a detector + feature extractor: each object class has a unit
prototype vector; an observed instance is the prototype plus a bounded
per-instance offset plus a smaller per-observation ("nuisance") offset,
renormalized. The proposer turns ground-truth object placements into a
Scene: jittered boxes, optional misses, and clutter proposals.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    SCHEMA_VERSION,
    BoundingBox,
    ObjectProposal,
    Scene,
    SchemaError,
    derive_seed,
    readonly_array,
    seeded_rng,
)
from . import io

CLUTTER_LABEL = "clutter"

CLUTTER_MODES = ("random-unit", "near-class")


@dataclass(frozen=True)
class ClassPrototype:
    """A class identity: unit prototype plus its two noise scales."""

    class_id: str
    prototype: np.ndarray
    instance_noise: float = 0.1
    nuisance_noise: float = 0.05

    def __post_init__(self):
        proto = readonly_array(self.prototype)
        if proto.ndim != 1:
            raise ValueError("prototype must be a 1-D vector")
        norm = float(np.linalg.norm(proto))
        if not np.isclose(norm, 1.0, atol=1e-9):
            raise ValueError(f"prototype for '{self.class_id}' must be unit norm, got {norm}")
        object.__setattr__(self, "prototype", proto)
        if self.instance_noise < 0 or self.nuisance_noise < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class FeatureBank:
    """All class prototypes for a world, with the minimum pairwise angle."""

    dimension: int
    classes: tuple[ClassPrototype, ...]
    min_separation: float
    _instance_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 1:
            raise ValueError("bank needs at least one class")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids in bank: {ids}")
        for c in self.classes:
            if c.prototype.shape[0] != self.dimension:
                raise ValueError(
                    f"class '{c.class_id}' has dimension {c.prototype.shape[0]}, bank says {self.dimension}"
                )
        if len(self.classes) > 1:
            actual = _min_pairwise_angle([c.prototype for c in self.classes])
            if actual < self.min_separation - 1e-9:
                raise ValueError(
                    f"bank min_separation {self.min_separation} violated: closest pair at angle {actual:.6f}"
                )

    def class_ids(self) -> tuple[str, ...]:
        return tuple(c.class_id for c in self.classes)

    def get(self, class_id: str) -> ClassPrototype:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(f"unknown class '{class_id}'; bank has {list(self.class_ids())}")


@dataclass(frozen=True)
class ProposerConfig:
    """Knobs for turning ground-truth placements into proposals."""

    box_jitter: float = 0.0
    clutter_count: int = 0
    clutter_feature_mode: str = "random-unit"
    miss_rate: float = 0.0
    near_class_offset: float = 1.2
    drop_classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "drop_classes", tuple(self.drop_classes))
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be non-negative")
        if self.clutter_count < 0:
            raise ValueError("clutter_count must be non-negative")
        if self.clutter_feature_mode not in CLUTTER_MODES:
            raise ValueError(
                f"clutter_feature_mode must be one of {CLUTTER_MODES}, got '{self.clutter_feature_mode}'"
            )
        if not (0.0 <= self.miss_rate < 1.0):
            raise ValueError("miss_rate must be in [0, 1)")
        if self.near_class_offset <= 0:
            raise ValueError("near_class_offset must be positive")


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.arccos(np.clip(np.dot(u, v), -1.0, 1.0)))


def _min_pairwise_angle(protos) -> float:
    best = np.pi
    for i in range(len(protos)):
        for j in range(i + 1, len(protos)):
            best = min(best, _angle(protos[i], protos[j]))
    return best


def _random_unit(rng: np.random.Generator, d: int) -> np.ndarray:
    while True:
        v = rng.standard_normal(d)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def _ball_offset(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    """Offset with uniform random direction and radius uniform in [0, radius]."""
    if radius == 0.0:
        return np.zeros(d)
    direction = _random_unit(rng, d)
    return direction * (radius * rng.uniform())


def make_feature_bank(
    d: int,
    class_ids,
    instance_noise: float = 0.1,
    nuisance_noise: float = 0.05,
    min_separation: float = 0.5,
    rng: np.random.Generator | None = None,
    max_attempts: int = 1000,
) -> FeatureBank:
    """Sample unit prototypes pairwise separated by at least ``min_separation``.

    Rejection sampling with a bounded attempt count; an infeasible request
    (too many classes for the angle in dimension d) raises a ValueError.
    """
    class_ids = list(class_ids)
    if rng is None:
        rng = seeded_rng(0)
    if d < 1 or len(class_ids) < 1:
        raise ValueError("need d >= 1 and at least one class id")
    accepted: list[np.ndarray] = []
    for cid in class_ids:
        placed = False
        for _ in range(max_attempts):
            cand = _random_unit(rng, d)
            if all(_angle(cand, p) >= min_separation for p in accepted):
                accepted.append(cand)
                placed = True
                break
        if not placed:
            raise ValueError(
                f"cannot separate {len(class_ids)} classes at angle {min_separation} in dimension {d}"
            )
    classes = tuple(
        ClassPrototype(cid, proto, instance_noise, nuisance_noise)
        for cid, proto in zip(class_ids, accepted)
    )
    return FeatureBank(d, classes, min_separation)


def add_related_class(
    bank: FeatureBank,
    base_class_id: str,
    new_class_id: str,
    angle: float,
    rng: np.random.Generator,
    instance_noise: float | None = None,
    nuisance_noise: float | None = None,
) -> FeatureBank:
    """Append a class whose prototype sits at exactly ``angle`` from a base class.

    Used to build deliberately confusable class pairs; the bank's recorded
    min_separation shrinks accordingly.
    """
    if not (0.0 < angle < np.pi):
        raise ValueError("angle must be in (0, pi)")
    base = bank.get(base_class_id)
    # random unit direction orthogonal to the base prototype
    while True:
        v = rng.standard_normal(bank.dimension)
        v -= np.dot(v, base.prototype) * base.prototype
        n = np.linalg.norm(v)
        if n > 1e-9:
            u = v / n
            break
    proto = np.cos(angle) * base.prototype + np.sin(angle) * u
    proto /= np.linalg.norm(proto)
    new_class = ClassPrototype(
        new_class_id,
        proto,
        base.instance_noise if instance_noise is None else instance_noise,
        base.nuisance_noise if nuisance_noise is None else nuisance_noise,
    )
    protos = [c.prototype for c in bank.classes] + [proto]
    return FeatureBank(
        bank.dimension,
        bank.classes + (new_class,),
        min(bank.min_separation, _min_pairwise_angle(protos)),
    )


def add_class_cluster(
    bank: FeatureBank,
    class_ids,
    pairwise_angle: float,
    rng: np.random.Generator,
    instance_noise: float = 0.1,
    nuisance_noise: float = 0.05,
    min_separation_from_existing: float = 0.5,
    max_attempts: int = 1000,
) -> FeatureBank:
    """Append k classes with *exactly* ``pairwise_angle`` between every pair.

    The cluster is a regular simplex on the sphere around a random center
    direction, placed so every member keeps ``min_separation_from_existing``
    from the existing prototypes.
    """
    class_ids = list(class_ids)
    k = len(class_ids)
    if k < 2:
        raise ValueError("a cluster needs at least two classes")
    cos_theta = np.cos(pairwise_angle)
    # members: cos(phi)*center + sin(phi)*s_i with simplex dirs s_i . s_j = -1/(k-1)
    cos_phi_sq = (cos_theta + 1.0 / (k - 1)) * (k - 1) / k
    if not (0.0 < cos_phi_sq <= 1.0):
        raise ValueError(f"pairwise angle {pairwise_angle} infeasible for a {k}-cluster")
    cos_phi = np.sqrt(cos_phi_sq)
    sin_phi = np.sqrt(max(0.0, 1.0 - cos_phi_sq))
    d = bank.dimension
    if d < k:
        raise ValueError(f"dimension {d} too small for a {k}-cluster")
    existing = [c.prototype for c in bank.classes]
    for _ in range(max_attempts):
        center = _random_unit(rng, d)
        # orthonormal frame u_1..u_{k-1} orthogonal to center
        basis = []
        while len(basis) < k - 1:
            v = rng.standard_normal(d)
            v -= np.dot(v, center) * center
            for u in basis:
                v -= np.dot(v, u) * u
            n = np.linalg.norm(v)
            if n > 1e-9:
                basis.append(v / n)
        simplex = _regular_simplex(k)  # (k, k-1), unit rows, pairwise dot -1/(k-1)
        members = []
        for i in range(k):
            direction = sum(simplex[i, j] * basis[j] for j in range(k - 1))
            m = cos_phi * center + sin_phi * direction
            members.append(m / np.linalg.norm(m))
        if all(
            _angle(m, p) >= min_separation_from_existing for m in members for p in existing
        ):
            new_classes = tuple(
                ClassPrototype(cid, m, instance_noise, nuisance_noise)
                for cid, m in zip(class_ids, members)
            )
            protos = existing + members
            return FeatureBank(
                bank.dimension,
                bank.classes + new_classes,
                min(bank.min_separation, _min_pairwise_angle(protos)),
            )
    raise ValueError(
        f"cannot place a {k}-cluster at {min_separation_from_existing} rad from existing classes"
    )


def _regular_simplex(k: int) -> np.ndarray:
    """k unit vectors in R^(k-1) with pairwise dot exactly -1/(k-1)."""
    verts = np.eye(k) - 1.0 / k
    # rows live in the sum-zero subspace of R^k; project to k-1 coordinates
    q, _ = np.linalg.qr(np.ones((k, 1)), mode="complete")
    basis = q[:, 1:]  # (k, k-1) orthonormal basis of the sum-zero subspace
    coords = verts @ basis
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    return coords


def with_class_noise(
    bank: FeatureBank,
    class_id: str,
    instance_noise: float | None = None,
    nuisance_noise: float | None = None,
) -> FeatureBank:
    """Functional update of one class's noise scales."""
    cur = bank.get(class_id)
    updated = replace(
        cur,
        instance_noise=cur.instance_noise if instance_noise is None else instance_noise,
        nuisance_noise=cur.nuisance_noise if nuisance_noise is None else nuisance_noise,
    )
    classes = tuple(updated if c.class_id == class_id else c for c in bank.classes)
    return FeatureBank(bank.dimension, classes, bank.min_separation)


def sample_instance_feature(
    bank: FeatureBank,
    class_id: str,
    instance_rng: np.random.Generator,
    nuisance_rng: np.random.Generator,
) -> np.ndarray:
    """Draw one observed feature: prototype + instance offset + nuisance offset, renormalized.

    The instance offset comes from ``instance_rng`` (fixed per physical
    object), the per-observation nuisance from ``nuisance_rng``. With both
    noise scales zero the result equals the prototype exactly.
    """
    cls = bank.get(class_id)
    raw = (
        cls.prototype
        + _ball_offset(instance_rng, bank.dimension, cls.instance_noise)
        + _ball_offset(nuisance_rng, bank.dimension, cls.nuisance_noise)
    )
    norm = np.linalg.norm(raw)
    if norm < 1e-12:
        # offsets would have to exactly cancel the prototype; treat as a bug upstream
        raise ValueError(f"degenerate feature draw for class '{class_id}'")
    return raw / norm


def instance_base_feature(bank: FeatureBank, class_id: str, instance_seed: int) -> np.ndarray:
    """Pre-nuisance feature of a specific physical instance (cached).

    The same (class_id, instance_seed) always denotes the same object, so
    two observations of it differ only by nuisance noise.
    """
    key = (class_id, int(instance_seed))
    cached = bank._instance_cache.get(key)
    if cached is None:
        cls = bank.get(class_id)
        rng = seeded_rng(derive_seed("instance", class_id, instance_seed))
        cached = cls.prototype + _ball_offset(rng, bank.dimension, cls.instance_noise)
        cached.setflags(write=False)
        bank._instance_cache[key] = cached
    return cached


def _jitter_box(box: BoundingBox, jitter: float, rng: np.random.Generator) -> BoundingBox:
    if jitter == 0.0:
        return box
    vals = box.as_array() + rng.normal(0.0, jitter, size=4)
    x0, x1 = sorted((vals[0], vals[2]))
    y0, y1 = sorted((vals[1], vals[3]))
    x0, x1 = max(0.0, x0), min(1.0, x1)
    y0, y1 = max(0.0, y0), min(1.0, y1)
    # keep the box non-degenerate after clamping
    eps = 1e-6
    if x1 - x0 < eps:
        x0, x1 = (1.0 - eps, 1.0) if x1 > 0.5 else (0.0, eps)
    if y1 - y0 < eps:
        y0, y1 = (1.0 - eps, 1.0) if y1 > 0.5 else (0.0, eps)
    return BoundingBox(x0, y0, x1, y1)


def _clutter_box(rng: np.random.Generator) -> BoundingBox:
    cx, cy = rng.uniform(0.05, 0.95, size=2)
    hx, hy = rng.uniform(0.02, 0.12, size=2)
    return BoundingBox(
        max(0.0, cx - hx), max(0.0, cy - hy), min(1.0, cx + hx), min(1.0, cy + hy)
    )


def _clutter_feature(bank: FeatureBank, config: ProposerConfig, rng: np.random.Generator) -> np.ndarray:
    if config.clutter_feature_mode == "random-unit":
        return _random_unit(rng, bank.dimension)
    # near-class: a random class prototype pushed off by a fixed distance in a
    # random direction, renormalized. The offset is exact (not a ball draw) so
    # clutter resembles a class without ever collapsing onto its prototype.
    cls = bank.classes[int(rng.integers(len(bank.classes)))]
    raw = cls.prototype + config.near_class_offset * _random_unit(rng, bank.dimension)
    return raw / np.linalg.norm(raw)


def propose(
    true_objects,
    bank: FeatureBank,
    config: ProposerConfig,
    rng: np.random.Generator,
    scene_id: str = "scene",
) -> Scene:
    """Build a Scene from ground-truth placements.

    ``true_objects`` is a sequence of (class_id, instance_seed, BoundingBox).
    Classes listed in ``drop_classes`` are never proposed (a blind detector);
    other objects may be dropped with probability ``miss_rate``; surviving
    boxes get corner jitter; ``clutter_count`` unrelated proposals are
    added; the proposal order is shuffled. An empty result is an error.
    """
    proposals: list[ObjectProposal] = []
    for class_id, instance_seed, box in true_objects:
        if not isinstance(box, BoundingBox):
            box = BoundingBox.from_array(box)
        if class_id in config.drop_classes:
            continue
        if config.miss_rate > 0.0 and rng.uniform() < config.miss_rate:
            continue
        base = instance_base_feature(bank, class_id, instance_seed)
        cls = bank.get(class_id)
        raw = base + _ball_offset(rng, bank.dimension, cls.nuisance_noise)
        feature = raw / np.linalg.norm(raw)
        proposals.append(ObjectProposal(_jitter_box(box, config.box_jitter, rng), feature, class_id))
    for _ in range(config.clutter_count):
        box = _clutter_box(rng)
        feature = _clutter_feature(bank, config, rng)
        proposals.append(ObjectProposal(box, feature, CLUTTER_LABEL))
    if not proposals:
        raise ValueError(
            "proposal set is empty (all objects missed and clutter_count is 0); "
            "a scene needs at least one proposal"
        )
    order = rng.permutation(len(proposals))
    return Scene(scene_id, tuple(proposals[i] for i in order))


def save_scene(path: str, scene: Scene) -> None:
    io.write_json(path, io.scene_to_dict(scene))


def load_external_scene(path: str) -> Scene:
    """Load a scene produced elsewhere; features may be raw (not unit norm)."""
    return io.scene_from_dict(io.read_json(path))


# ---------------------------------------------------------------------------
# Bank persistence


def bank_to_dict(bank: FeatureBank) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "dimension": bank.dimension,
        "min_separation": bank.min_separation,
        "classes": [
            {
                "class_id": c.class_id,
                "prototype": c.prototype.tolist(),
                "instance_noise": c.instance_noise,
                "nuisance_noise": c.nuisance_noise,
            }
            for c in bank.classes
        ],
    }


def bank_from_dict(d: dict) -> FeatureBank:
    io.check_version(d, "bank")
    dim = io.require(d, "dimension", "bank")
    raw = io.require(d, "classes", "bank")
    if not isinstance(raw, list) or not raw:
        raise SchemaError("'bank.classes' must be a non-empty list")
    classes = []
    for i, cd in enumerate(raw):
        ctx = f"bank.classes[{i}]"
        try:
            classes.append(
                ClassPrototype(
                    io.require(cd, "class_id", ctx),
                    np.array(io.require(cd, "prototype", ctx), dtype=float),
                    float(io.require(cd, "instance_noise", ctx)),
                    float(io.require(cd, "nuisance_noise", ctx)),
                )
            )
        except ValueError as exc:
            raise SchemaError(f"'{ctx}': {exc}") from exc
    try:
        return FeatureBank(int(dim), tuple(classes), float(io.require(d, "min_separation", "bank")))
    except ValueError as exc:
        raise SchemaError(f"'bank': {exc}") from exc
