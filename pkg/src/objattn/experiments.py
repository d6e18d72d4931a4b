"""End-to-end experiment runners with machine-readable reports.

Four experiment kinds, each a small pipeline over the other modules:

- instance-generalization: pour at one mug instance, evaluate on unseen
  instances in cluttered scenes, against a no-vision baseline.
- distractor-narrowing: attention trained without a confusable distractor,
  then finetuned with distractor-present demos; selection rates before and
  after.
- scope-broadening: attention initialized from one fruit crop, finetuned on
  demos covering a whole class cluster; per-class selection rates.
- multi-object-sweep: two attention rows, episodic RL on the sweep task,
  evaluated over many conditions with a confusion table per row.

Everything is derived from an ExperimentSpec plus one master seed, so a
rerun of the same resolved spec reproduces the report byte for byte. Wall
clock is kept on the in-memory report only; it never reaches the JSON.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import io
from .attention import (
    AttentionModel,
    TrainConfig,
    finetune_attention,
    hard_observation,
    train_attention,
)
from .core import SCHEMA_VERSION, Scene, SchemaError, derive_seed, seeded_rng
from .policy import BCConfig, Policy, RLConfig, behavior_clone, rollout, train_rl
from .proposals import (
    FeatureBank,
    ProposerConfig,
    add_class_cluster,
    add_related_class,
    instance_base_feature,
    make_feature_bank,
    with_class_noise,
)
from .sim import Placement, TaskSpec, collect_demonstrations, observe, reset

KINDS = (
    "instance-generalization",
    "distractor-narrowing",
    "scope-broadening",
    "multi-object-sweep",
)

_SEED_MOD = 2**31


# ---------------------------------------------------------------------------
# Spec


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one experiment run.

    The dict fields are override maps merged over per-kind defaults by
    :func:`resolve_spec`; empty seed tuples are filled in deterministically
    from the master seed. A fully resolved spec round-trips through JSON
    and resolves to itself.
    """

    experiment_kind: str
    seed: int = 0
    counts: dict = field(default_factory=dict)
    bank: dict = field(default_factory=dict)
    proposer: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)
    rl: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    train_seeds: tuple[int, ...] = ()
    eval_seeds: tuple[int, ...] = ()
    repetitions: int = 1

    def __post_init__(self):
        if self.experiment_kind not in KINDS:
            raise ValueError(
                f"experiment_kind must be one of {list(KINDS)}, got '{self.experiment_kind}'"
            )
        object.__setattr__(self, "train_seeds", tuple(int(s) for s in self.train_seeds))
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        overlap = set(self.train_seeds) & set(self.eval_seeds)
        if overlap:
            raise ValueError(
                f"train and eval condition seeds must be disjoint; shared: {sorted(overlap)[:5]}"
            )


_DEFAULTS: dict[str, dict] = {
    "instance-generalization": {
        "counts": {
            "demos": 14,
            "clean_eval": 12,
            "unseen_eval": 24,
            "probe": 4,
            "unseen_instances": 5,
        },
        "bank": {
            "dimension": 32,
            "classes": ["mug", "block", "bowl", "bottle"],
            "instance_noise": 0.1,
            "nuisance_noise": 0.05,
            "min_separation": 0.6,
        },
        "proposer": {
            # demos are recorded with a clean detector; misses would pair a
            # wrong attended box with a correct expert action and poison the
            # small cloning set. Evaluation keeps misses on.
            "train": {"box_jitter": 0.01, "clutter_count": 2, "miss_rate": 0.0},
            "eval": {"box_jitter": 0.01, "clutter_count": 6, "miss_rate": 0.05},
        },
        "task": {
            "target": "mug",
            "placements": [
                ["mug", 0, [0.62, 0.68], 0.04],
                ["block", 0, [0.30, 0.40], 0.04],
                ["bowl", 0, [0.78, 0.35], 0.04],
                ["bottle", 0, [0.33, 0.78], 0.04],
            ],
            "position_jitter": 0.2,
            "horizon": 100,
            "demo_start_ring": [0.62, 0.68, 0.35],
        },
        "attention": {"epochs": 80, "lambda_ent": 0.1, "hidden_units": 64},
        "bc": {"epochs": 250, "hidden": [32, 32]},
        "thresholds": {
            "trained_clean_min": 0.9,
            "unseen_vision_min": 0.8,
            "no_vision_max": 0.3,
        },
    },
    "distractor-narrowing": {
        "counts": {
            "clean_demos": 8,
            "finetune_demos": 6,
            "select_scenes": 200,
            "clean_select_scenes": 24,
            "pour_eval": 12,
        },
        "bank": {
            "dimension": 128,
            "classes": ["mug_brown", "block", "bowl"],
            "instance_noise": 0.1,
            "nuisance_noise": 0.05,
            "min_separation": 0.7,
            # wide instance spread on a narrowly separated mug pair: a row
            # matched to any single brown exemplar picks between the two mugs
            # near chance, while a row aligned with the class direction still
            # separates them cleanly
            "target_instance_noise": 0.18,
            "target_nuisance_noise": 0.05,
            "pair_class": "mug_pink",
            "pair_angle": 0.06,
            "pair_instance_noise": 0.18,
            "pair_nuisance_noise": 0.05,
        },
        "proposer": {
            "train": {"box_jitter": 0.01, "clutter_count": 3, "miss_rate": 0.0},
            "eval": {"box_jitter": 0.01, "clutter_count": 3, "miss_rate": 0.0},
        },
        "task": {
            "target": "mug_brown",
            "placements": [
                ["mug_brown", 0, [0.60, 0.66], 0.04],
                ["block", 0, [0.30, 0.35], 0.04],
                ["bowl", 0, [0.78, 0.30], 0.04],
            ],
            "distractor_placement": ["mug_pink", 0, [0.38, 0.72], 0.04],
            "position_jitter": 0.18,
            "horizon": 100,
            "demo_start_ring": [0.60, 0.66, 0.35],
        },
        # the clean phase trains the motion predictor on unambiguous scenes;
        # finetuning then starts with a predictor that already punishes
        # attending the wrong box. Epochs stay low so the crop-initialized
        # row barely moves before the distractor appears
        "attention": {"epochs": 30, "lambda_ent": 0.0, "crop_scale": 1.0, "hidden_units": 16},
        # entropy off during narrowing: with the mugs a small angle apart the
        # sharpening term can lock the per-scene winner onto the wrong mug
        # before the prediction loss has separated them
        "finetune": {"epochs": 700, "lambda_ent": 0.0, "hidden_units": 16},
        "bc": {"epochs": 250, "hidden": [32, 32]},
        "thresholds": {"post_select_min": 0.95, "gap_min": 0.3},
    },
    "scope-broadening": {
        "counts": {"demos_per_class": 8, "per_class_scenes": 40, "joint_scenes": 30},
        "bank": {
            "dimension": 128,
            "classes": ["block", "plate", "bottle"],
            "instance_noise": 0.1,
            "nuisance_noise": 0.05,
            "min_separation": 1.0,
            "cluster_classes": ["orange", "lemon", "lime"],
            "cluster_pairwise_angle": 0.5,
            "cluster_instance_noise": 0.04,
            "cluster_nuisance_noise": 0.05,
            "cluster_min_separation": 1.0,
        },
        "proposer": {
            "train": {"box_jitter": 0.01, "clutter_count": 2, "miss_rate": 0.0},
            "eval": {
                "box_jitter": 0.01,
                "clutter_count": 4,
                "miss_rate": 0.0,
                "clutter_feature_mode": "near-class",
                "near_class_offset": 0.35,
            },
        },
        "task": {
            "citrus_placement": [0.62, 0.68],
            "citrus_radius": 0.04,
            "distractor_placements": [
                ["block", 0, [0.30, 0.38], 0.04],
                ["plate", 0, [0.75, 0.33], 0.04],
            ],
            "joint_placements": [
                ["orange", 0, [0.30, 0.65], 0.04],
                ["lemon", 0, [0.62, 0.70], 0.04],
                ["lime", 0, [0.78, 0.40], 0.04],
                ["block", 0, [0.30, 0.30], 0.04],
                ["plate", 0, [0.55, 0.35], 0.04],
            ],
            "position_jitter": 0.18,
            "joint_position_jitter": 0.1,
            "horizon": 100,
        },
        "attention": {"epochs": 0, "crop_scale": 1.0, "hidden_units": 16},
        "finetune": {"epochs": 300, "lambda_ent": 0.1, "hidden_units": 16},
        "thresholds": {"post_per_class_min": 0.9, "distant_distractor_max": 0.05},
    },
    "multi-object-sweep": {
        "counts": {"demos": 10, "rl_train_conditions": 16, "eval": 100},
        "bank": {
            "dimension": 32,
            "classes": ["orange", "dustpan", "block"],
            "instance_noise": 0.08,
            "nuisance_noise": 0.05,
            "min_separation": 0.6,
        },
        "proposer": {
            "train": {"box_jitter": 0.01, "clutter_count": 3, "miss_rate": 0.02},
            "eval": {"box_jitter": 0.01, "clutter_count": 3, "miss_rate": 0.02},
        },
        "task": {
            "swept": "orange",
            "dustpan": "dustpan",
            # start, swept object, and pan sit on one up-right diagonal, so the
            # approach direction roughly equals the push direction on typical
            # draws and demonstrations stay close to straight plows
            "robot_start": [0.12, 0.10],
            "swept_placement": [0.40, 0.38],
            "dustpan_placement": [0.72, 0.70],
            "swept_radius": 0.04,
            "dustpan_radius": 0.04,
            # brush half-width: a tool much wider than the swept object keeps
            # it in front of the tool under small heading errors, where a
            # narrow tool lets it slip around the side mid-push
            "tool_radius": 0.10,
            "distractor_placement": ["block", 0, [0.25, 0.80], 0.04],
            "position_jitter": 0.18,
            "horizon": 100,
        },
        "attention": {"epochs": 100, "lambda_ent": 0.1, "hidden_units": 64},
        "bc": {"epochs": 300, "hidden": [16, 16]},
        "rl": {
            "population": 24,
            "iterations": 12,
            "eval_episodes": 6,
            "init_noise": 0.1,
            "sigma_floor": 0.02,
            "hidden": [16, 16],
        },
        "thresholds": {"vision_min": 0.7, "no_vision_max": 0.3},
    },
}


def _merge(base, override):
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for key, value in override.items():
            out[key] = _merge(base[key], value) if key in base else value
        return out
    return override


def _draw_seeds(master: int, tag: str, count: int, taken: set[int]) -> tuple[int, ...]:
    out = []
    i = 0
    while len(out) < count:
        s = derive_seed(master, tag, i) % _SEED_MOD
        i += 1
        if s in taken:
            continue
        taken.add(s)
        out.append(s)
    return tuple(out)


def _required_seed_counts(kind: str, counts: dict, bank: dict) -> tuple[int, int]:
    if kind == "instance-generalization":
        return counts["demos"], counts["clean_eval"] + counts["unseen_eval"] + counts["probe"]
    if kind == "distractor-narrowing":
        return (
            counts["clean_demos"] + counts["finetune_demos"],
            counts["select_scenes"] + counts["clean_select_scenes"] + counts["pour_eval"],
        )
    if kind == "scope-broadening":
        n_classes = len(bank["cluster_classes"])
        return (
            counts["demos_per_class"] * (n_classes + 1),
            counts["per_class_scenes"] * n_classes + counts["joint_scenes"],
        )
    return max(counts["demos"], counts["rl_train_conditions"]), counts["eval"]


def resolve_spec(spec: ExperimentSpec) -> ExperimentSpec:
    """Merge per-kind defaults and materialize every derived seed."""
    base = _DEFAULTS[spec.experiment_kind]
    counts = _merge(base["counts"], spec.counts)
    bank = _merge(base["bank"], spec.bank)
    bank.setdefault("seed", derive_seed(spec.seed, "bank") % _SEED_MOD)
    proposer = _merge(base["proposer"], spec.proposer)
    task = _merge(base["task"], spec.task)
    attention = _merge(base.get("attention", {}), spec.attention)
    attention.setdefault("seed", derive_seed(spec.seed, "attention") % _SEED_MOD)
    finetune = _merge(base.get("finetune", {}), spec.finetune)
    finetune.setdefault("seed", derive_seed(spec.seed, "finetune") % _SEED_MOD)
    bc = _merge(base.get("bc", {}), spec.bc)
    bc.setdefault("seed", derive_seed(spec.seed, "bc") % _SEED_MOD)
    rl = _merge(base.get("rl", {}), spec.rl)
    rl.setdefault("seed", derive_seed(spec.seed, "rl") % _SEED_MOD)
    thresholds = _merge(base.get("thresholds", {}), spec.thresholds)

    n_train, n_eval = _required_seed_counts(spec.experiment_kind, counts, bank)
    taken = set(spec.train_seeds) | set(spec.eval_seeds)
    train_seeds = spec.train_seeds or _draw_seeds(spec.seed, "train-condition", n_train, taken)
    eval_seeds = spec.eval_seeds or _draw_seeds(spec.seed, "eval-condition", n_eval, taken)
    if len(train_seeds) != n_train:
        raise ValueError(f"spec provides {len(train_seeds)} train seeds, counts require {n_train}")
    if len(eval_seeds) != n_eval:
        raise ValueError(f"spec provides {len(eval_seeds)} eval seeds, counts require {n_eval}")
    return ExperimentSpec(
        spec.experiment_kind,
        spec.seed,
        counts,
        bank,
        proposer,
        task,
        attention,
        finetune,
        bc,
        rl,
        thresholds,
        train_seeds,
        eval_seeds,
        spec.repetitions,
    )


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment_kind": spec.experiment_kind,
        "seed": spec.seed,
        "counts": spec.counts,
        "bank": spec.bank,
        "proposer": spec.proposer,
        "task": spec.task,
        "attention": spec.attention,
        "finetune": spec.finetune,
        "bc": spec.bc,
        "rl": spec.rl,
        "thresholds": spec.thresholds,
        "train_seeds": list(spec.train_seeds),
        "eval_seeds": list(spec.eval_seeds),
        "repetitions": spec.repetitions,
    }


def _dict_field(d: dict, name: str) -> dict:
    value = d.get(name, {})
    if not isinstance(value, dict):
        raise SchemaError(f"'experiment_spec.{name}' must be an object")
    return value


def _seed_list(d: dict, name: str) -> tuple[int, ...]:
    value = d.get(name, [])
    if not isinstance(value, list):
        raise SchemaError(f"'experiment_spec.{name}' must be a list of integers")
    for i, s in enumerate(value):
        if not isinstance(s, int) or isinstance(s, bool):
            raise SchemaError(f"'experiment_spec.{name}[{i}]' must be an integer")
    return tuple(value)


def spec_from_dict(d: dict) -> ExperimentSpec:
    io.check_version(d, "experiment_spec")
    kind = io.require(d, "experiment_kind", "experiment_spec")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise SchemaError("'experiment_spec.seed' must be an integer")
    repetitions = d.get("repetitions", 1)
    if not isinstance(repetitions, int) or isinstance(repetitions, bool):
        raise SchemaError("'experiment_spec.repetitions' must be an integer")
    try:
        return ExperimentSpec(
            kind,
            seed,
            _dict_field(d, "counts"),
            _dict_field(d, "bank"),
            _dict_field(d, "proposer"),
            _dict_field(d, "task"),
            _dict_field(d, "attention"),
            _dict_field(d, "finetune"),
            _dict_field(d, "bc"),
            _dict_field(d, "rl"),
            _dict_field(d, "thresholds"),
            _seed_list(d, "train_seeds"),
            _seed_list(d, "eval_seeds"),
            repetitions,
        )
    except ValueError as exc:
        raise SchemaError(f"'experiment_spec': {exc}") from exc


def load_spec(path: str) -> ExperimentSpec:
    return spec_from_dict(io.read_json(path))


# ---------------------------------------------------------------------------
# Report


@dataclass
class ExperimentReport:
    experiment_kind: str
    spec: dict
    conditions: tuple[dict, ...]
    aggregates: dict
    confusion: dict
    seed_manifest: dict
    attention_unchanged: bool
    wall_clock_seconds: float | None = None

    def __post_init__(self):
        self.conditions = tuple(dict(c) for c in self.conditions)

    def flagged(self) -> list[dict]:
        return [c for c in self.conditions if c.get("target_missing")]


def compute_aggregates(conditions) -> dict:
    """Group-wise success statistics, plus selection histograms when present.

    This is the one function both the runners and the load-time consistency
    check go through, so stored and recomputed aggregates can only diverge
    if the per-condition records were edited.
    """
    by_group: dict[str, list[dict]] = {}
    for rec in conditions:
        by_group.setdefault(rec["group"], []).append(rec)
    out = {}
    for group in sorted(by_group):
        recs = by_group[group]
        successes = sum(1 for r in recs if r["success"])
        entry = {
            "count": len(recs),
            "successes": successes,
            "rate": successes / len(recs),
        }
        if any("selected_class" in r for r in recs):
            hist: dict[str, int] = {}
            for r in recs:
                key = r.get("selected_class", "none")
                hist[key] = hist.get(key, 0) + 1
            entry["selected"] = {k: hist[k] for k in sorted(hist)}
        out[group] = entry
    return out


def report_to_dict(report: ExperimentReport) -> dict:
    # wall_clock_seconds is deliberately absent: reports must be byte-identical
    # across reruns, and elapsed time is the one thing that never is.
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment_kind": report.experiment_kind,
        "spec": report.spec,
        "conditions": list(report.conditions),
        "aggregates": report.aggregates,
        "confusion": report.confusion,
        "seed_manifest": report.seed_manifest,
        "attention_unchanged": report.attention_unchanged,
    }


def report_from_dict(d: dict) -> ExperimentReport:
    io.check_version(d, "experiment_report")
    kind = io.require(d, "experiment_kind", "experiment_report")
    if kind not in KINDS:
        raise SchemaError(f"'experiment_report.experiment_kind' unknown: {kind!r}")
    conditions = io.require(d, "conditions", "experiment_report")
    if not isinstance(conditions, list):
        raise SchemaError("'experiment_report.conditions' must be a list")
    for i, rec in enumerate(conditions):
        if not isinstance(rec, dict) or "group" not in rec or "success" not in rec:
            raise SchemaError(
                f"'experiment_report.conditions[{i}]' must be an object with 'group' and 'success'"
            )
    aggregates = io.require(d, "aggregates", "experiment_report")
    recomputed = compute_aggregates(conditions)
    if not _aggregates_match(aggregates, recomputed):
        raise SchemaError(
            "'experiment_report.aggregates' does not match the per-condition records"
        )
    unchanged = io.require(d, "attention_unchanged", "experiment_report")
    if not isinstance(unchanged, bool):
        raise SchemaError("'experiment_report.attention_unchanged' must be a boolean")
    return ExperimentReport(
        kind,
        io.require(d, "spec", "experiment_report"),
        tuple(conditions),
        aggregates,
        io.require(d, "confusion", "experiment_report"),
        io.require(d, "seed_manifest", "experiment_report"),
        unchanged,
    )


def _aggregates_match(stored, recomputed) -> bool:
    if set(stored) != set(recomputed):
        return False
    for group, entry in recomputed.items():
        got = stored[group]
        if not isinstance(got, dict):
            return False
        if got.get("count") != entry["count"] or got.get("successes") != entry["successes"]:
            return False
        rate = got.get("rate")
        if not isinstance(rate, (int, float)) or abs(rate - entry["rate"]) > 1e-12:
            return False
        if entry.get("selected") is not None and got.get("selected") != entry["selected"]:
            return False
    return True


def load_report(path: str) -> ExperimentReport:
    return report_from_dict(io.read_json(path))


def save_report(path: str, report: ExperimentReport) -> None:
    io.write_json(path, report_to_dict(report))


# ---------------------------------------------------------------------------
# Shared runner plumbing


def _make_config(cls, cfg: dict, ctx: str):
    try:
        return cls(**cfg)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid {ctx} config: {exc}") from exc


def build_bank(spec: ExperimentSpec) -> FeatureBank:
    """Construct the feature bank a resolved spec describes."""
    spec = resolve_spec(spec)
    cfg = spec.bank
    rng = seeded_rng(cfg["seed"])
    bank = make_feature_bank(
        cfg["dimension"],
        cfg["classes"],
        cfg["instance_noise"],
        cfg["nuisance_noise"],
        cfg["min_separation"],
        rng,
    )
    if spec.experiment_kind == "distractor-narrowing":
        target = spec.task["target"]
        bank = with_class_noise(
            bank, target, cfg["target_instance_noise"], cfg["target_nuisance_noise"]
        )
        bank = add_related_class(
            bank,
            target,
            cfg["pair_class"],
            cfg["pair_angle"],
            rng,
            cfg["pair_instance_noise"],
            cfg["pair_nuisance_noise"],
        )
    elif spec.experiment_kind == "scope-broadening":
        bank = add_class_cluster(
            bank,
            cfg["cluster_classes"],
            cfg["cluster_pairwise_angle"],
            rng,
            cfg["cluster_instance_noise"],
            cfg["cluster_nuisance_noise"],
            cfg["cluster_min_separation"],
        )
    return bank


def _placement(entry) -> Placement:
    class_id, instance_seed, pos, radius = entry
    return Placement(class_id, int(instance_seed), (float(pos[0]), float(pos[1])), float(radius))


def _proposer_pair(spec: ExperimentSpec) -> tuple[ProposerConfig, ProposerConfig]:
    train = _make_config(ProposerConfig, spec.proposer["train"], "proposer.train")
    ev = _make_config(ProposerConfig, spec.proposer["eval"], "proposer.eval")
    return train, ev


def _with_instance(task: TaskSpec, class_id: str, instance_seed: int) -> TaskSpec:
    placements = tuple(
        replace(p, instance_seed=instance_seed) if p.class_id == class_id else p
        for p in task.placements
    )
    return replace(task, placements=placements)


def _rep_conditions(seeds, repetitions: int):
    """Yield (repetition, condition_seed); later repetitions re-derive seeds."""
    for rep in range(repetitions):
        for s in seeds:
            yield rep, (int(s) if rep == 0 else derive_seed(s, "rep", rep) % _SEED_MOD)


def _static_scene(task: TaskSpec, cond_seed: int, bank: FeatureBank, proposer: ProposerConfig) -> Scene:
    state = reset(task, cond_seed)
    rng = seeded_rng(derive_seed(cond_seed, "scene"))
    return observe(state, bank, proposer, rng, scene_id=f"s{cond_seed}")


def _select_label(model: AttentionModel, scene: Scene) -> str:
    _, idx = hard_observation(model.W, scene, model.eps_norm)
    label = scene.labels()[idx[0]]
    return label if label is not None else "none"


def _tally_confusion(confusion: dict, label_log) -> None:
    for labels in label_log:
        for row, lab in enumerate(labels):
            hist = confusion.setdefault(f"row{row}", {})
            name = lab if lab is not None else "none"
            hist[name] = hist.get(name, 0) + 1


def _sorted_confusion(confusion: dict) -> dict:
    return {row: {k: confusion[row][k] for k in sorted(confusion[row])} for row in sorted(confusion)}


def _w_bits(model: AttentionModel) -> bytes:
    return np.ascontiguousarray(model.W).tobytes()


def _rollout_record(group: str, rep: int, cond: int, result, target: str) -> dict:
    seen = result.seen_rate(target)
    return {
        "group": group,
        "condition_seed": int(cond),
        "repetition": int(rep),
        "success": bool(result.success),
        "target_seen_rate": float(seen),
        "target_missing": bool(seen == 0.0),
    }


# ---------------------------------------------------------------------------
# Task construction shared by runners and the CLI


def _pour_task(placement_entries, target: str, horizon, jitter) -> TaskSpec:
    return TaskSpec(
        "pour",
        tuple(_placement(p) for p in placement_entries),
        (target,),
        horizon=int(horizon),
        position_jitter=float(jitter),
    )


def _narrowing_tasks(spec: ExperimentSpec) -> tuple[TaskSpec, TaskSpec]:
    """(distractor-free task, task with the confusable distractor placed)."""
    target = spec.task["target"]
    clean = _pour_task(
        spec.task["placements"], target, spec.task["horizon"], spec.task["position_jitter"]
    )
    full = replace(
        clean, placements=clean.placements + (_placement(spec.task["distractor_placement"]),)
    )
    return clean, full


def _scope_class_task(spec: ExperimentSpec, class_id: str, instance_seed: int) -> TaskSpec:
    pos = spec.task["citrus_placement"]
    entries = [[class_id, instance_seed, pos, spec.task["citrus_radius"]]]
    entries.extend(spec.task["distractor_placements"])
    return _pour_task(entries, class_id, spec.task["horizon"], spec.task["position_jitter"])


def _sweep_tasks(spec: ExperimentSpec) -> tuple[TaskSpec, TaskSpec]:
    """(training task, evaluation task with an extra distractor object)."""
    swept, pan = spec.task["swept"], spec.task["dustpan"]
    sp, pp = spec.task["swept_placement"], spec.task["dustpan_placement"]
    train = TaskSpec(
        "sweep",
        (
            Placement(swept, 0, (float(sp[0]), float(sp[1])), float(spec.task["swept_radius"])),
            Placement(pan, 0, (float(pp[0]), float(pp[1])), float(spec.task["dustpan_radius"])),
        ),
        (swept, pan),
        horizon=int(spec.task["horizon"]),
        tool_radius=float(spec.task["tool_radius"]),
        robot_start=tuple(float(v) for v in spec.task["robot_start"]),
        position_jitter=float(spec.task["position_jitter"]),
    )
    ev = replace(
        train, placements=train.placements + (_placement(spec.task["distractor_placement"]),)
    )
    return train, ev


def training_task(spec: ExperimentSpec) -> TaskSpec:
    """The task demonstrations are collected on (distractor-free variants)."""
    spec = resolve_spec(spec)
    kind = spec.experiment_kind
    if kind == "instance-generalization":
        return _pour_task(
            spec.task["placements"],
            spec.task["target"],
            spec.task["horizon"],
            spec.task["position_jitter"],
        )
    if kind == "distractor-narrowing":
        return _narrowing_tasks(spec)[0]
    if kind == "multi-object-sweep":
        return _sweep_tasks(spec)[0]
    raise ValueError(
        "scope-broadening trains on one task per cluster class; there is no single training task"
    )


def evaluation_task(spec: ExperimentSpec) -> TaskSpec:
    """The task evaluation rollouts run on (with distractors where the kind has them)."""
    spec = resolve_spec(spec)
    kind = spec.experiment_kind
    if kind == "instance-generalization":
        return training_task(spec)
    if kind == "distractor-narrowing":
        return _narrowing_tasks(spec)[1]
    if kind == "multi-object-sweep":
        return _sweep_tasks(spec)[1]
    raise ValueError("scope-broadening is evaluated on static scenes, not rollouts")


def _collect_ring_demos(
    task,
    spec: ExperimentSpec,
    n: int,
    seeds,
    bank: FeatureBank,
    prop: ProposerConfig,
    target_convention: str = "ee_delta",
):
    """Collect demos whose starts sit evenly on a ring around the workspace.

    ``task`` is one TaskSpec, or one per demo when the caller varies the scene
    between demos. Cloned policies are only reliable where demonstrations
    visited; starts spread over every approach direction remove the coverage
    holes a single fixed start leaves (states just past the goal are never
    seen when all approaches come from one side). Specs without a ring keep
    the task's own start. Evaluation rollouts always use the task's fixed
    start.
    """
    tasks = list(task) if isinstance(task, (list, tuple)) else [task] * n
    ring = spec.task.get("demo_start_ring")
    if not ring:
        demos = []
        for j in range(n):
            demos.extend(
                collect_demonstrations(tasks[j], 1, [seeds[j]], bank, prop, target_convention)
            )
        return demos
    cx, cy, radius = (float(v) for v in ring)
    demos = []
    for j in range(n):
        ang = 2.0 * np.pi * j / n
        start = (
            float(np.clip(cx + radius * np.cos(ang), 0.02, 0.98)),
            float(np.clip(cy + radius * np.sin(ang), 0.02, 0.98)),
        )
        task_j = replace(tasks[j], robot_start=start)
        demos.extend(
            collect_demonstrations(task_j, 1, [seeds[j]], bank, prop, target_convention)
        )
    return demos


def collect_spec_demonstrations(
    spec: ExperimentSpec, stage: str = "train", bank: FeatureBank | None = None
):
    """Scripted-expert demonstrations for a spec's training (or finetune) stage."""
    spec = resolve_spec(spec)
    if bank is None:
        bank = build_bank(spec)
    train_prop, _ = _proposer_pair(spec)
    kind = spec.experiment_kind
    counts = spec.counts
    if kind == "distractor-narrowing":
        clean_task, full_task = _narrowing_tasks(spec)
        target = spec.task["target"]
        pair = spec.bank["pair_class"]
        n_clean = counts["clean_demos"]
        n_fine = counts["finetune_demos"]
        # every demo places a different mug instance, so the attention row is
        # pushed toward the class direction rather than one exemplar
        if stage == "train":
            tasks = [_with_instance(clean_task, target, j) for j in range(n_clean)]
            return _collect_ring_demos(
                tasks, spec, n_clean, spec.train_seeds[:n_clean], bank, train_prop
            )
        if stage == "finetune":
            tasks = [
                _with_instance(_with_instance(full_task, target, j), pair, 200 + j)
                for j in range(n_fine)
            ]
            return _collect_ring_demos(
                tasks, spec, n_fine, spec.train_seeds[n_clean:], bank, train_prop
            )
        raise ValueError(f"unknown demo stage '{stage}' for {kind}")
    valid_stages = ("train", "finetune") if kind == "scope-broadening" else ("train",)
    if stage not in valid_stages:
        raise ValueError(f"unknown demo stage '{stage}' for {kind}")
    if kind == "instance-generalization":
        return _collect_ring_demos(
            training_task(spec), spec, counts["demos"], spec.train_seeds, bank, train_prop
        )
    if kind == "scope-broadening":
        citrus = list(spec.bank["cluster_classes"])
        per = counts["demos_per_class"]
        if stage == "train":
            # the original task only ever featured the first cluster class
            return collect_demonstrations(
                _scope_class_task(spec, citrus[0], 0),
                per,
                spec.train_seeds[:per],
                bank,
                train_prop,
            )
        # finetune demos cover every cluster class, one scene per demo, and
        # rotate the placed instance so the attention row settles on the
        # cluster centroid instead of memorizing a single exemplar
        demos = []
        for k, c in enumerate(citrus):
            for j in range(per):
                seed = spec.train_seeds[per * (k + 1) + j]
                demos.extend(
                    collect_demonstrations(_scope_class_task(spec, c, j), 1, [seed], bank, train_prop)
                )
        return demos
    task = _sweep_tasks(spec)[0]
    seeds = _sweep_demo_seeds(spec, task, counts["demos"])
    return collect_demonstrations(
        task, counts["demos"], seeds, bank, train_prop, target_convention="action"
    )


def _sweep_demo_seeds(spec: ExperimentSpec, task: TaskSpec, n: int) -> list[int]:
    """Pick demo conditions whose push directions tile the direction spread.

    Ten independent draws tend to cluster near the mean object-to-pan
    direction, leaving the steep and shallow pushes undemonstrated; a
    demonstrator arranging scenes by hand would spread them out instead.
    Candidates come from a dedicated pool (never the evaluation conditions)
    and are ranked by the angle of the object-to-pan line, then read off at
    evenly spaced quantiles.
    """
    pool = _draw_seeds(spec.seed, "demo-pool", 64, set(spec.eval_seeds))
    swept_cls, pan_cls = task.target_classes
    angles = []
    for s in pool:
        state = reset(task, s)
        gap = state.find(pan_cls).position - state.find(swept_cls).position
        angles.append(float(np.arctan2(gap[1], gap[0])))
    order = np.argsort(angles, kind="stable")
    picks = np.linspace(0, len(pool) - 1, n).round().astype(int)
    return [pool[order[p]] for p in picks]


# ---------------------------------------------------------------------------
# Runners


def run_instance_generalization(spec: ExperimentSpec) -> ExperimentReport:
    spec = resolve_spec(spec)
    counts = spec.counts
    bank = build_bank(spec)
    target = spec.task["target"]
    task = training_task(spec)
    train_prop, eval_prop = _proposer_pair(spec)
    clean_prop = replace(eval_prop, clutter_count=0, miss_rate=0.0)
    probe_prop = replace(eval_prop, drop_classes=(target,))

    demos = collect_spec_demonstrations(spec, "train", bank)
    crop = instance_base_feature(bank, target, 0)
    model = train_attention(
        demos, _make_config(TrainConfig, spec.attention, "attention"), n_rows=1, init_crops=[crop]
    )
    w_before = _w_bits(model)

    bc_cfg = _make_config(BCConfig, spec.bc, "bc")
    policy_v = behavior_clone(demos, model, bc_cfg, vision=True)
    policy_b = behavior_clone(demos, model, bc_cfg, vision=False)

    n_clean, n_unseen = counts["clean_eval"], counts["unseen_eval"]
    clean_seeds = spec.eval_seeds[:n_clean]
    unseen_seeds = spec.eval_seeds[n_clean : n_clean + n_unseen]
    probe_seeds = spec.eval_seeds[n_clean + n_unseen :]

    conditions = []
    confusion: dict = {}
    for rep, cond in _rep_conditions(clean_seeds, spec.repetitions):
        res = rollout(policy_v, model, task, cond, bank, clean_prop)
        rec = _rollout_record("train-instance-clean/vision", rep, cond, res, target)
        rec["instance_seed"] = 0
        conditions.append(rec)
    for i, (rep, cond) in enumerate(_rep_conditions(unseen_seeds, spec.repetitions)):
        instance = 1 + (i % counts["unseen_instances"])
        task_i = _with_instance(task, target, instance)
        res_v = rollout(policy_v, model, task_i, cond, bank, eval_prop)
        rec = _rollout_record("unseen/vision", rep, cond, res_v, target)
        rec["instance_seed"] = instance
        conditions.append(rec)
        _tally_confusion(confusion, res_v.label_log)
        res_b = rollout(policy_b, model, task_i, cond, bank, eval_prop)
        rec = _rollout_record("unseen/no-vision", rep, cond, res_b, target)
        rec["instance_seed"] = instance
        conditions.append(rec)
    for rep, cond in _rep_conditions(probe_seeds, spec.repetitions):
        res = rollout(policy_v, model, task, cond, bank, probe_prop)
        rec = _rollout_record("target-missing/vision", rep, cond, res, target)
        rec["instance_seed"] = 0
        conditions.append(rec)

    unchanged = _w_bits(model) == w_before
    manifest = _manifest(spec, attention=True, bc=True)
    return ExperimentReport(
        spec.experiment_kind,
        spec_to_dict(spec),
        tuple(conditions),
        compute_aggregates(conditions),
        _sorted_confusion(confusion),
        manifest,
        unchanged,
    )


def run_distractor_narrowing(spec: ExperimentSpec) -> ExperimentReport:
    spec = resolve_spec(spec)
    counts = spec.counts
    bank = build_bank(spec)
    target = spec.task["target"]
    clean_task, full_task = _narrowing_tasks(spec)
    train_prop, eval_prop = _proposer_pair(spec)

    clean_demos = collect_spec_demonstrations(spec, "train", bank)
    finetune_demos = collect_spec_demonstrations(spec, "finetune", bank)
    crop = instance_base_feature(bank, target, 0)
    model_pre = train_attention(
        clean_demos,
        _make_config(TrainConfig, spec.attention, "attention"),
        n_rows=1,
        init_crops=[crop],
    )
    # clean demos stay in the finetune batch: with only a handful of new
    # scenes the predictor can otherwise memorize scene identity from any
    # attended box, and the row drifts off the target class
    model_post = finetune_attention(
        model_pre,
        finetune_demos,
        _make_config(TrainConfig, spec.finetune, "finetune"),
        prior_demos=clean_demos,
    )
    w_pre, w_post = _w_bits(model_pre), _w_bits(model_post)

    policy = behavior_clone(clean_demos, model_pre, _make_config(BCConfig, spec.bc, "bc"))

    n_sel, n_clean_sel = counts["select_scenes"], counts["clean_select_scenes"]
    select_seeds = spec.eval_seeds[:n_sel]
    clean_select_seeds = spec.eval_seeds[n_sel : n_sel + n_clean_sel]
    pour_seeds = spec.eval_seeds[n_sel + n_clean_sel :]

    # evaluation scenes hold mug instances never placed in any demo, so
    # selection has to come from the class direction, not a memorized exemplar
    pair = spec.bank["pair_class"]
    conditions = []
    for i, (rep, cond) in enumerate(_rep_conditions(select_seeds, spec.repetitions)):
        task_i = _with_instance(_with_instance(full_task, target, 100 + i), pair, 300 + i)
        scene = _static_scene(task_i, cond, bank, eval_prop)
        for tag, mdl in (("pre", model_pre), ("post", model_post)):
            label = _select_label(mdl, scene)
            conditions.append({
                "group": f"{tag}/select",
                "condition_seed": int(cond),
                "repetition": int(rep),
                "success": bool(label == target),
                "selected_class": label,
            })
    for i, (rep, cond) in enumerate(_rep_conditions(clean_select_seeds, spec.repetitions)):
        scene = _static_scene(
            _with_instance(clean_task, target, 100 + i), cond, bank, eval_prop
        )
        for tag, mdl in (("pre", model_pre), ("post", model_post)):
            label = _select_label(mdl, scene)
            conditions.append({
                "group": f"{tag}/select-no-distractor",
                "condition_seed": int(cond),
                "repetition": int(rep),
                "success": bool(label == target),
                "selected_class": label,
            })
    confusion: dict = {}
    for i, (rep, cond) in enumerate(_rep_conditions(pour_seeds, spec.repetitions)):
        task_i = _with_instance(_with_instance(full_task, target, 500 + i), pair, 700 + i)
        for tag, mdl in (("pre", model_pre), ("post", model_post)):
            res = rollout(policy, mdl, task_i, cond, bank, eval_prop)
            conditions.append(_rollout_record(f"{tag}/pour", rep, cond, res, target))
            if tag == "post":
                _tally_confusion(confusion, res.label_log)

    unchanged = _w_bits(model_pre) == w_pre and _w_bits(model_post) == w_post
    manifest = _manifest(spec, attention=True, finetune=True, bc=True)
    return ExperimentReport(
        spec.experiment_kind,
        spec_to_dict(spec),
        tuple(conditions),
        compute_aggregates(conditions),
        _sorted_confusion(confusion),
        manifest,
        unchanged,
    )


def run_scope_broadening(spec: ExperimentSpec) -> ExperimentReport:
    spec = resolve_spec(spec)
    counts = spec.counts
    bank = build_bank(spec)
    citrus = list(spec.bank["cluster_classes"])
    horizon = int(spec.task["horizon"])
    train_prop, eval_prop = _proposer_pair(spec)
    demos = collect_spec_demonstrations(spec, "train", bank)
    finetune_demos = collect_spec_demonstrations(spec, "finetune", bank)

    crop = instance_base_feature(bank, citrus[0], 0)
    model_pre = train_attention(
        demos, _make_config(TrainConfig, spec.attention, "attention"), n_rows=1, init_crops=[crop]
    )
    model_post = finetune_attention(
        model_pre, finetune_demos, _make_config(TrainConfig, spec.finetune, "finetune")
    )

    n_per = counts["per_class_scenes"]
    conditions = []
    for k, c in enumerate(citrus):
        class_seeds = spec.eval_seeds[k * n_per : (k + 1) * n_per]
        for i, (rep, cond) in enumerate(_rep_conditions(class_seeds, spec.repetitions)):
            scene = _static_scene(_scope_class_task(spec, c, 100 + i), cond, bank, eval_prop)
            for tag, mdl in (("pre", model_pre), ("post", model_post)):
                label = _select_label(mdl, scene)
                conditions.append({
                    "group": f"{tag}/{c}",
                    "condition_seed": int(cond),
                    "repetition": int(rep),
                    "success": bool(label == c),
                    "selected_class": label,
                })

    joint_seeds = spec.eval_seeds[len(citrus) * n_per :]
    joint_placements = [list(p) for p in spec.task["joint_placements"]]
    confusion: dict = {}
    for i, (rep, cond) in enumerate(_rep_conditions(joint_seeds, spec.repetitions)):
        entries = [
            [p[0], 100 + i if p[0] in citrus else p[1], p[2], p[3]] for p in joint_placements
        ]
        joint_task = TaskSpec(
            "pour",
            tuple(_placement(p) for p in entries),
            (citrus[0],),
            horizon=horizon,
            position_jitter=float(spec.task["joint_position_jitter"]),
        )
        scene = _static_scene(joint_task, cond, bank, eval_prop)
        for tag, mdl in (("pre", model_pre), ("post", model_post)):
            label = _select_label(mdl, scene)
            conditions.append({
                "group": f"{tag}-joint",
                "condition_seed": int(cond),
                "repetition": int(rep),
                "success": bool(label in citrus),
                "selected_class": label,
            })
            if tag == "post":
                hist = confusion.setdefault("row0", {})
                hist[label] = hist.get(label, 0) + 1

    # no policy stage here, so the staging invariant holds trivially
    manifest = _manifest(spec, attention=True, finetune=True)
    return ExperimentReport(
        spec.experiment_kind,
        spec_to_dict(spec),
        tuple(conditions),
        compute_aggregates(conditions),
        _sorted_confusion(confusion),
        manifest,
        True,
    )


def run_multi_object_sweep(spec: ExperimentSpec) -> ExperimentReport:
    spec = resolve_spec(spec)
    counts = spec.counts
    bank = build_bank(spec)
    swept, pan = spec.task["swept"], spec.task["dustpan"]
    train_task, eval_task = _sweep_tasks(spec)
    train_prop, eval_prop = _proposer_pair(spec)

    rl_seeds = spec.train_seeds[: counts["rl_train_conditions"]]
    demos = collect_spec_demonstrations(spec, "train", bank)
    crops = [instance_base_feature(bank, swept, 0), instance_base_feature(bank, pan, 0)]
    model = train_attention(
        demos, _make_config(TrainConfig, spec.attention, "attention"), n_rows=2, init_crops=crops
    )
    w_before = _w_bits(model)

    bc_cfg = _make_config(BCConfig, spec.bc, "bc")
    rl_cfg = _make_config(RLConfig, spec.rl, "rl")
    policies = {}
    for vision in (True, False):
        warm = behavior_clone(demos, model, bc_cfg, vision=vision)
        policies[vision] = train_rl(
            train_task, model, rl_cfg, vision, bank, train_prop, rl_seeds, init_policy=warm
        )

    conditions = []
    confusion: dict = {}
    for rep, cond in _rep_conditions(spec.eval_seeds, spec.repetitions):
        res_v = rollout(policies[True], model, eval_task, cond, bank, eval_prop)
        conditions.append(_rollout_record("sweep/vision", rep, cond, res_v, swept))
        _tally_confusion(confusion, res_v.label_log)
        res_b = rollout(policies[False], model, eval_task, cond, bank, eval_prop)
        conditions.append(_rollout_record("sweep/no-vision", rep, cond, res_b, swept))

    unchanged = _w_bits(model) == w_before
    manifest = _manifest(spec, attention=True, bc=True, rl=True)
    return ExperimentReport(
        spec.experiment_kind,
        spec_to_dict(spec),
        tuple(conditions),
        compute_aggregates(conditions),
        _sorted_confusion(confusion),
        manifest,
        unchanged,
    )


def _manifest(
    spec: ExperimentSpec,
    attention: bool = False,
    finetune: bool = False,
    bc: bool = False,
    rl: bool = False,
) -> dict:
    manifest = {
        "master_seed": spec.seed,
        "bank_seed": spec.bank["seed"],
        "train_condition_seeds": list(spec.train_seeds),
        "eval_condition_seeds": list(spec.eval_seeds),
        "repetitions": spec.repetitions,
    }
    if attention:
        manifest["attention_seed"] = spec.attention["seed"]
    if finetune:
        manifest["finetune_seed"] = spec.finetune["seed"]
    if bc:
        manifest["bc_seed"] = spec.bc["seed"]
    if rl:
        manifest["rl_seed"] = spec.rl["seed"]
    return manifest


_RUNNERS = {
    "instance-generalization": run_instance_generalization,
    "distractor-narrowing": run_distractor_narrowing,
    "scope-broadening": run_scope_broadening,
    "multi-object-sweep": run_multi_object_sweep,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Dispatch to the kind's runner; wall clock goes on the report in memory."""
    start = time.perf_counter()
    report = _RUNNERS[spec.experiment_kind](spec)
    report.wall_clock_seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# Rendering


def render_report(report: ExperimentReport) -> str:
    lines = [
        f"experiment: {report.experiment_kind} (seed {report.seed_manifest.get('master_seed')})",
        f"attention unchanged by policy stage: {'yes' if report.attention_unchanged else 'NO'}",
        "",
        f"{'group':<34} {'successes':>9} {'count':>6} {'rate':>7}",
    ]
    for group, entry in report.aggregates.items():
        lines.append(
            f"{group:<34} {entry['successes']:>9} {entry['count']:>6} {entry['rate']:>7.3f}"
        )
    if report.confusion:
        lines.append("")
        lines.append("attention selections by row (class: count)")
        for row, hist in report.confusion.items():
            pairs = ", ".join(f"{k}: {v}" for k, v in hist.items())
            lines.append(f"  {row}  {pairs}")
    flagged = report.flagged()
    if flagged:
        lines.append("")
        lines.append(f"conditions with the target class never proposed: {len(flagged)}")
    if report.wall_clock_seconds is not None:
        lines.append("")
        lines.append(f"wall clock: {report.wall_clock_seconds:.1f} s (not stored in the report)")
    return "\n".join(lines) + "\n"
