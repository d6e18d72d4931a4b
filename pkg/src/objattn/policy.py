"""Policies over attended observations: cloning, episodic search, rollouts.

A policy is a small dense network mapping [robot state, hard attended
observation] to a velocity command. Policies with ``vision=False`` see the
observation block zeroed (train and test alike), which is the no-vision
baseline. Attention weights are inputs here, never parameters: nothing in
this module modifies an AttentionModel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import io, nn
from .attention import AttentionModel, hard_observation
from .core import SCHEMA_VERSION, SchemaError, derive_seed, readonly_array, seeded_rng
from .proposals import FeatureBank, ProposerConfig
from .sim import TaskSpec, Trajectory, observe, reset, step, success


@dataclass(frozen=True)
class BCConfig:
    """Behavior-cloning hyperparameters."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class RLConfig:
    """Episodic cross-entropy-style search hyperparameters."""

    population: int = 32
    elite_frac: float = 0.25
    iterations: int = 20
    init_noise: float = 0.5
    eval_episodes: int = 8
    seed: int = 0
    sigma_floor: float = 0.02
    hidden: tuple[int, ...] = (16, 16)
    shaping: dict = field(
        default_factory=lambda: {
            "distance_weight": 1.0,
            "reach_weight": 0.5,
            "success_bonus": 10.0,
        }
    )

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.population < 1:
            raise ValueError("population must be at least 1")
        if not (0.0 < self.elite_frac <= 1.0):
            raise ValueError("elite_frac must be in (0, 1]")
        if self.elite_count > self.population:
            raise ValueError("elite count exceeds population")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be at least 1")

    @property
    def elite_count(self) -> int:
        return max(1, int(round(self.elite_frac * self.population)))


@dataclass(frozen=True)
class Policy:
    """A feedforward controller plus the flag saying whether it uses vision."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    vision: bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple((readonly_array(w), readonly_array(b)) for w, b in self.layers)
        object.__setattr__(self, "layers", layers)
        if layers[-1][0].shape[0] != 2:
            raise ValueError("policy must output a 2-vector")
        if (layers[0][0].shape[1] - 4) % 4 != 0 or layers[0][0].shape[1] < 8:
            raise ValueError(
                f"policy input width {layers[0][0].shape[1]} is not 4 + 4*M for M >= 1"
            )

    @property
    def n_rows(self) -> int:
        return (self.layers[0][0].shape[1] - 4) // 4

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def action(self, state_vec: np.ndarray, nu_hard: np.ndarray) -> np.ndarray:
        x = policy_input(state_vec, nu_hard, self.vision)
        return nn.forward_single(list(self.layers), x)


def policy_input(state_vec: np.ndarray, nu_hard: np.ndarray, vision: bool) -> np.ndarray:
    obs = np.asarray(nu_hard, dtype=float)
    if not vision:
        obs = np.zeros_like(obs)
    return np.concatenate([np.asarray(state_vec, dtype=float), obs])


def behavior_clone(
    demos,
    model: AttentionModel,
    config: BCConfig,
    vision: bool = True,
) -> Policy:
    """Fit a policy to demonstrated targets with mean-squared-error Adam.

    Inputs are [robot state, hard observation under ``model``]; with
    ``vision=False`` the observation block is zeroed during training, the
    same way the resulting policy sees it at execution. The attention model
    is read, never written.
    """
    demos = list(demos)
    if not demos:
        raise ValueError("behavior cloning needs at least one demonstration")
    M = model.n_rows
    rows = []
    targets = []
    for demo in demos:
        for s in demo.steps:
            obs, _ = hard_observation(model.W, s.scene, model.eps_norm)
            rows.append(policy_input(s.state.as_vector(), obs, vision))
            targets.append(s.target)
    X = np.stack(rows)
    Y = np.stack(targets)
    if X.shape[1] != 4 + 4 * M:
        raise ValueError("demo observation width does not match the attention model")
    rng = seeded_rng(config.seed)
    sizes = (X.shape[1], *config.hidden, 2)
    layers = nn.init_layers(sizes, rng)
    params = [arr for layer in layers for arr in layer]
    adam = nn.Adam(params, lr=config.learning_rate, beta1=config.beta1,
                   beta2=config.beta2, eps=config.eps_adam)
    n = X.shape[0]
    loss_log = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            preds, caches = nn.forward_cache(layers, xb)
            err = preds - yb
            loss_sum += float(np.mean(np.sum(err * err, axis=1)))
            grads, _ = nn.backward(layers, caches, (2.0 / xb.shape[0]) * err)
            adam.step(params, [arr for g in grads for arr in g])
            n_batches += 1
        loss_log.append(loss_sum / n_batches)
    meta = {"trained_with": "behavior_clone", "bc_config": asdict(config), "loss_log": loss_log}
    return Policy(tuple(layers), vision, meta)


# ---------------------------------------------------------------------------
# Rollouts


@dataclass(frozen=True)
class RolloutResult:
    trajectory: Trajectory
    success: bool
    index_log: tuple[tuple[int, ...], ...]
    label_log: tuple[tuple[str | None, ...], ...]
    presence_log: tuple[tuple[str, ...], ...]

    def seen_rate(self, class_id: str) -> float:
        """Fraction of steps whose scene contained a proposal of this class."""
        steps = len(self.presence_log)
        return sum(class_id in present for present in self.presence_log) / steps


def _shaped_reward(task: TaskSpec, state, shaping: dict) -> float:
    w_dist = float(shaping.get("distance_weight", 1.0))
    if task.task_kind == "pour":
        target = state.find(task.target_classes[0])
        return -w_dist * float(np.linalg.norm(state.robot.position - target.position))
    w_reach = float(shaping.get("reach_weight", 0.5))
    swept = state.find(task.target_classes[0])
    pan = state.find(task.target_classes[1])
    contact = task.tool_radius + swept.radius
    d_goal = float(np.linalg.norm(swept.position - pan.position))
    d_reach = max(0.0, float(np.linalg.norm(state.robot.position - swept.position)) - contact)
    return -w_dist * d_goal - w_reach * d_reach


def _run_policy_episode(
    layers,
    vision: bool,
    model: AttentionModel,
    task: TaskSpec,
    condition_seed: int,
    bank: FeatureBank,
    proposer: ProposerConfig,
    shaping: dict | None = None,
):
    """Shared rollout loop; returns (trajectory, logs, shaped return, success)."""
    rng = seeded_rng(derive_seed(condition_seed, "rollout"))
    state = reset(task, condition_seed)
    states = [state]
    actions = []
    index_log = []
    label_log = []
    presence_log = []
    shaped = 0.0
    for _ in range(task.horizon):
        scene = observe(state, bank, proposer, rng)
        obs, idx = hard_observation(model.W, scene, model.eps_norm)
        labels = scene.labels()
        index_log.append(idx)
        label_log.append(tuple(labels[i] for i in idx))
        presence_log.append(tuple(sorted({lab for lab in labels if lab is not None})))
        x = policy_input(state.robot.as_vector(), obs, vision)
        a = nn.forward_single(layers, x)
        state = step(task, state, a)
        states.append(state)
        actions.append(state.robot.velocity)
        if shaping is not None:
            shaped += _shaped_reward(task, state, shaping)
    trajectory = Trajectory(tuple(states), tuple(actions))
    ok = success(task, trajectory)
    if shaping is not None and ok:
        shaped += float(shaping.get("success_bonus", 10.0))
    return trajectory, index_log, label_log, presence_log, shaped, ok


def rollout(
    policy: Policy,
    model: AttentionModel,
    task: TaskSpec,
    condition_seed: int,
    bank: FeatureBank,
    proposer: ProposerConfig,
) -> RolloutResult:
    """Execute the policy on one condition; logs attention choices per step."""
    trajectory, index_log, label_log, presence_log, _, ok = _run_policy_episode(
        list(policy.layers), policy.vision, model, task, condition_seed, bank, proposer
    )
    return RolloutResult(trajectory, ok, tuple(index_log), tuple(label_log), tuple(presence_log))


# ---------------------------------------------------------------------------
# Episodic RL (cross-entropy-style search)


def train_rl(
    task: TaskSpec,
    model: AttentionModel,
    config: RLConfig,
    vision: bool,
    bank: FeatureBank,
    proposer: ProposerConfig,
    condition_seeds,
    init_policy: Policy | None = None,
) -> Policy:
    """Search policy parameters by iterated sampling and elite refitting.

    Each candidate is scored by its mean shaped return over a fixed set of
    training conditions (common random numbers across candidates). The
    sampling distribution is refit to the elite fraction each iteration.
    With elite_frac=1.0 there is no selection pressure: the new mean is the
    population mean. Returns the best candidate ever evaluated. May be
    parallelized over candidates; this implementation is sequential and
    deterministic.
    """
    seeds = list(condition_seeds)
    if not seeds:
        raise ValueError("train_rl needs at least one training condition seed")
    eval_seeds = [seeds[i % len(seeds)] for i in range(config.eval_episodes)]
    sizes = (4 + 4 * model.n_rows, *config.hidden, 2)
    n_params = nn.param_count(sizes)
    if init_policy is not None:
        if nn.layer_sizes(list(init_policy.layers)) != sizes:
            raise ValueError(
                f"init_policy architecture {nn.layer_sizes(list(init_policy.layers))} "
                f"does not match configured sizes {sizes}"
            )
        mu = nn.flatten_layers(list(init_policy.layers))
    else:
        mu = np.zeros(n_params)
    sigma = np.full(n_params, config.init_noise)
    rng = seeded_rng(config.seed)

    def evaluate(vec: np.ndarray) -> float:
        layers = nn.unflatten_layers(vec, sizes)
        total = 0.0
        for cond in eval_seeds:
            _, _, _, _, shaped, _ = _run_policy_episode(
                layers, vision, model, task, cond, bank, proposer, config.shaping
            )
            total += shaped
        return total / len(eval_seeds)

    best_vec = mu.copy()
    best_reward = evaluate(best_vec)
    history = [{"iteration": -1, "mean_reward": best_reward, "best_reward": best_reward}]
    for it in range(config.iterations):
        pop = mu + sigma * rng.standard_normal((config.population, n_params))
        rewards = np.array([evaluate(pop[i]) for i in range(config.population)])
        elite_idx = np.argsort(-rewards, kind="stable")[: config.elite_count]
        elite = pop[elite_idx]
        mu = elite.mean(axis=0)
        sigma = np.maximum(elite.std(axis=0), config.sigma_floor)
        top = int(elite_idx[0])
        if rewards[top] > best_reward:
            best_reward = float(rewards[top])
            best_vec = pop[top].copy()
        history.append({
            "iteration": it,
            "mean_reward": float(rewards.mean()),
            "best_reward": best_reward,
        })
    meta = {
        "trained_with": "train_rl",
        "rl_config": {**asdict(config), "hidden": list(config.hidden)},
        "history": history,
    }
    return Policy(tuple(nn.unflatten_layers(best_vec, sizes)), vision, meta)


# ---------------------------------------------------------------------------
# Persistence


def policy_to_dict(policy: Policy) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "vision": policy.vision,
        "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in policy.layers],
        "meta": _jsonable(policy.meta),
    }


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def policy_from_dict(d: dict) -> Policy:
    io.check_version(d, "policy")
    raw_layers = io.require(d, "layers", "policy")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SchemaError("'policy.layers' must be a non-empty list")
    layers = tuple(
        (
            np.array(io.require(ld, "W", f"policy.layers[{i}]"), dtype=float),
            np.array(io.require(ld, "b", f"policy.layers[{i}]"), dtype=float),
        )
        for i, ld in enumerate(raw_layers)
    )
    vision = io.require(d, "vision", "policy")
    if not isinstance(vision, bool):
        raise SchemaError("'policy.vision' must be a boolean")
    try:
        return Policy(layers, vision, dict(d.get("meta", {})))
    except ValueError as exc:
        raise SchemaError(f"'policy': {exc}") from exc
