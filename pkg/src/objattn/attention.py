"""Task-specific attention over object proposals, trained from demonstrations.

An attention model is a weight matrix W with one row per attended object
slot. Row j scores proposal i by the dot product of w_j with the proposal's
unit-normalized feature; a row-wise softmax turns scores into a distribution
over proposals. The soft observation concatenates, per row, the
probability-weighted average of proposal boxes; the hard observation takes
the argmax proposal's box instead (ties break toward the lowest proposal
index). W is deliberately not norm-constrained: its magnitude sets how
peaked the softmax is, and an entropy regularizer during training pushes
rows toward committing to single proposals.

Training fits W jointly with a small motion-prediction network that maps
[soft observation, robot state] to the demonstrated target motion. Gradients
are computed analytically (see ``gradients``) and applied with Adam.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import io, nn
from .core import (
    SCHEMA_VERSION,
    Demonstration,
    RobotState,
    Scene,
    SchemaError,
    readonly_array,
    seeded_rng,
)

EPS_NORM_DEFAULT = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for attention training (all have sane defaults)."""

    lambda_ent: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    eps_norm: float = EPS_NORM_DEFAULT
    hidden_units: int = 80
    crop_scale: float = 5.0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.lambda_ent < 0:
            raise ValueError("lambda_ent must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be at least 1")


@dataclass(frozen=True)
class AttentionModel:
    """Trained attention: W (rows x feature dim), predictor net, config echo."""

    W: np.ndarray
    predictor: tuple[tuple[np.ndarray, np.ndarray], ...]
    train_config: dict
    training_log: tuple[dict, ...] = ()

    def __post_init__(self):
        W = readonly_array(self.W)
        if W.ndim != 2:
            raise ValueError(f"W must be 2-D (rows x feature dim), got shape {W.shape}")
        object.__setattr__(self, "W", W)
        layers = tuple((readonly_array(w), readonly_array(b)) for w, b in self.predictor)
        object.__setattr__(self, "predictor", layers)
        expected_in = 4 * W.shape[0] + 4
        if layers[0][0].shape[1] != expected_in:
            raise ValueError(
                f"predictor input width {layers[0][0].shape[1]} does not match 4*M+4={expected_in}"
            )
        if layers[-1][0].shape[0] != 2:
            raise ValueError("predictor must output a 2-vector")
        object.__setattr__(self, "training_log", tuple(dict(e) for e in self.training_log))

    @property
    def n_rows(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.predictor[0][0].shape[0]

    @property
    def lambda_ent(self) -> float:
        return float(self.train_config.get("lambda_ent", 0.1))

    @property
    def eps_norm(self) -> float:
        return float(self.train_config.get("eps_norm", EPS_NORM_DEFAULT))


# ---------------------------------------------------------------------------
# Forward math


def normalize_feature(feature: np.ndarray, eps_norm: float = EPS_NORM_DEFAULT) -> np.ndarray:
    """f / max(||f||, eps): unit norm for real features, zero stays zero."""
    f = np.asarray(feature, dtype=float)
    return f / max(float(np.linalg.norm(f)), eps_norm)


def normalize_rows(F: np.ndarray, eps_norm: float = EPS_NORM_DEFAULT) -> np.ndarray:
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return F / np.maximum(norms, eps_norm)


def softmax_rows(Z: np.ndarray) -> np.ndarray:
    """Row-wise softmax stabilized by max subtraction."""
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention_probs(W: np.ndarray, scene: Scene, eps_norm: float = EPS_NORM_DEFAULT) -> np.ndarray:
    """(M, N) matrix: row j is the softmax over proposals for attention row j."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Fhat = normalize_rows(scene.features(), eps_norm)
    if Fhat.shape[1] != W.shape[1]:
        raise ValueError(
            f"attention rows have dimension {W.shape[1]}, scene features {Fhat.shape[1]}"
        )
    return softmax_rows(W @ Fhat.T)


def soft_observation(probs: np.ndarray, scene: Scene) -> np.ndarray:
    """Concatenated probability-weighted box averages, one 4-block per row."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if probs.shape[1] != len(scene):
        raise ValueError(f"probs cover {probs.shape[1]} proposals, scene has {len(scene)}")
    return (probs @ scene.boxes()).ravel()


def hard_observation(
    W: np.ndarray, scene: Scene, eps_norm: float = EPS_NORM_DEFAULT
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Argmax-proposal boxes per row, plus the selected indices.

    Ties break toward the lowest proposal index.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Fhat = normalize_rows(scene.features(), eps_norm)
    logits = W @ Fhat.T
    indices = tuple(int(i) for i in np.argmax(logits, axis=1))
    boxes = scene.boxes()
    return np.concatenate([boxes[i] for i in indices]), indices


def _entropy_terms(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(probs)
    terms = np.where(probs > 0.0, probs * logp, 0.0)
    return -terms


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    return _entropy_terms(np.atleast_2d(probs)).sum(axis=1)


def entropy_loss(probs: np.ndarray) -> float:
    """Sum over rows of the Shannon entropy of the attention distribution."""
    return float(entropy_rows(probs).sum())


def predictor_input(nu_soft: np.ndarray, state) -> np.ndarray:
    state_vec = state.as_vector() if isinstance(state, RobotState) else np.asarray(state, float)
    if state_vec.shape != (4,):
        raise ValueError(f"robot state must be a 4-vector, got shape {state_vec.shape}")
    return np.concatenate([np.asarray(nu_soft, float), state_vec])


def predict_motion(model: AttentionModel, nu_soft: np.ndarray, state) -> np.ndarray:
    """Predicted 2-D motion from the soft observation and robot state."""
    return nn.forward_single(list(model.predictor), predictor_input(nu_soft, state))


# ---------------------------------------------------------------------------
# Loss and gradients

class _Prep:
    """Pre-extracted arrays for one demo step (labels are dropped here)."""

    __slots__ = ("Fhat", "G", "state_vec", "target")

    def __init__(self, step, eps_norm: float):
        self.Fhat = normalize_rows(step.scene.features(), eps_norm)
        self.G = step.scene.boxes()
        self.state_vec = step.state.as_vector()
        self.target = np.asarray(step.target, dtype=float)


def _prep_steps(steps, eps_norm: float) -> list[_Prep]:
    return [s if isinstance(s, _Prep) else _Prep(s, eps_norm) for s in steps]


def _forward_batch(W, layers, prep):
    B = len(prep)
    M = W.shape[0]
    X = np.empty((B, 4 * M + 4))
    targets = np.empty((B, 2))
    probs = []
    ent_total = 0.0
    for b, p in enumerate(prep):
        P = softmax_rows(W @ p.Fhat.T)
        probs.append(P)
        X[b, : 4 * M] = (P @ p.G).ravel()
        X[b, 4 * M :] = p.state_vec
        targets[b] = p.target
        ent_total += entropy_rows(P).sum()
    preds, caches = nn.forward_cache(layers, X)
    err = preds - targets
    mse = float(np.sum(err * err) / B)
    mean_ent = ent_total / B
    return X, probs, caches, err, mse, mean_ent


def total_loss(model: AttentionModel, batch, lambda_ent: float | None = None, eps_norm: float | None = None) -> float:
    """Mean squared prediction error plus lambda_ent times mean entropy.

    ``batch`` is a non-empty sequence of demo steps.
    """
    if len(batch) == 0:
        raise ValueError("batch must contain at least one step")
    lam = model.lambda_ent if lambda_ent is None else lambda_ent
    eps = model.eps_norm if eps_norm is None else eps_norm
    prep = _prep_steps(batch, eps)
    _, _, _, _, mse, mean_ent = _forward_batch(model.W, list(model.predictor), prep)
    return mse + lam * mean_ent


def _loss_and_grads(W, layers, prep, lam):
    """Analytic gradients of total_loss w.r.t. W and the predictor layers.

    Backprop order: MSE through the predictor gives d(loss)/d(input); the
    soft-observation block of that maps back through nu = P @ G to dP, then
    through the softmax Jacobian to the logits, then dW = dZ @ Fhat. The
    entropy term contributes dH/dz_k = -p_k (log p_k + H) per row directly
    at the logits.
    """
    B = len(prep)
    M = W.shape[0]
    X, probs, caches, err, mse, mean_ent = _forward_batch(W, layers, prep)
    dY = (2.0 / B) * err
    layer_grads, dX = nn.backward(layers, caches, dY)
    dW = np.zeros_like(W)
    for b, p in enumerate(prep):
        P = probs[b]
        dnu = dX[b, : 4 * M].reshape(M, 4)
        dP = dnu @ p.G.T
        dZ = P * (dP - np.sum(dP * P, axis=1, keepdims=True))
        if lam != 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                logP = np.log(P)
            logP = np.where(P > 0.0, logP, 0.0)
            H = entropy_rows(P).reshape(-1, 1)
            dZ += (lam / B) * (-(P * (logP + H)))
        dW += dZ @ p.Fhat
    loss = mse + lam * mean_ent
    return loss, mean_ent, dW, layer_grads


def gradients(model: AttentionModel, batch, lambda_ent: float | None = None, eps_norm: float | None = None):
    """Return (dW, predictor layer grads) for total_loss over ``batch``."""
    if len(batch) == 0:
        raise ValueError("batch must contain at least one step")
    lam = model.lambda_ent if lambda_ent is None else lambda_ent
    eps = model.eps_norm if eps_norm is None else eps_norm
    prep = _prep_steps(batch, eps)
    layers = [(w.copy(), b.copy()) for w, b in model.predictor]
    _, _, dW, layer_grads = _loss_and_grads(model.W.copy(), layers, prep, lam)
    return dW, layer_grads


def init_from_crop(crop_feature: np.ndarray, scale: float = 5.0, eps_norm: float = EPS_NORM_DEFAULT) -> np.ndarray:
    """Attention row from an example crop: scale times the unit feature.

    A zero crop feature is rejected (it carries no direction). Scale zero
    gives a zero row, i.e. uniform attention.
    """
    f = np.asarray(crop_feature, dtype=float)
    norm = float(np.linalg.norm(f))
    if norm < eps_norm:
        raise ValueError("crop feature has (near-)zero norm; cannot initialize a row from it")
    return scale * (f / norm)


# ---------------------------------------------------------------------------
# Training


def _flatten_demos(demos) -> list:
    steps = []
    convention = None
    dim = None
    for demo in demos:
        if not isinstance(demo, Demonstration):
            raise ValueError(f"expected Demonstration, got {type(demo).__name__}")
        if convention is None:
            convention = demo.target_convention
        elif demo.target_convention != convention:
            raise ValueError(
                f"demonstrations mix target conventions: '{convention}' vs "
                f"'{demo.target_convention}' in '{demo.episode_id}'"
            )
        if dim is None:
            dim = demo.feature_dim
        elif demo.feature_dim != dim:
            raise ValueError(
                f"demonstrations mix feature dimensions: {dim} vs {demo.feature_dim} "
                f"in '{demo.episode_id}'"
            )
        steps.extend(demo.steps)
    if not steps:
        raise ValueError("no demonstration steps to train on")
    return steps


def _run_training(W0, layers0, steps, config: TrainConfig):
    prep = _prep_steps(steps, config.eps_norm)
    rng = seeded_rng(config.seed)
    W = W0.copy()
    layers = [(w.copy(), b.copy()) for w, b in layers0]
    params = [W] + [arr for layer in layers for arr in layer]
    adam = nn.Adam(params, lr=config.learning_rate, beta1=config.beta1,
                   beta2=config.beta2, eps=config.eps_adam)
    log = []
    n = len(prep)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        ent_sum = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = [prep[i] for i in order[start : start + config.batch_size]]
            loss, ent, dW, layer_grads = _loss_and_grads(W, layers, batch, config.lambda_ent)
            grads = [dW] + [arr for g in layer_grads for arr in g]
            adam.step(params, grads)
            loss_sum += loss
            ent_sum += ent
            n_batches += 1
        log.append({
            "epoch": epoch,
            "loss": loss_sum / n_batches,
            "entropy": ent_sum / n_batches,
        })
    return W, layers, log


def train_attention(
    demos,
    config: TrainConfig,
    n_rows: int = 1,
    init_crops=None,
) -> AttentionModel:
    """Fit attention rows and the motion predictor to demonstrations.

    ``init_crops``, when given, must hold one crop feature per row; rows are
    then initialized to crop_scale * normalized crop. Otherwise rows start
    as small random vectors. With epochs=0 the initialized model is returned
    untouched, which is how a crop-only model is built.
    """
    steps = _flatten_demos(demos)
    d = steps[0].scene.feature_dim
    if n_rows < 1:
        raise ValueError("n_rows must be at least 1")
    rng = seeded_rng(config.seed)
    if init_crops is not None:
        crops = list(init_crops)
        if len(crops) != n_rows:
            raise ValueError(f"got {len(crops)} init crops for {n_rows} attention rows")
        W0 = np.stack([init_from_crop(c, config.crop_scale, config.eps_norm) for c in crops])
        if W0.shape[1] != d:
            raise ValueError(f"crop features have dimension {W0.shape[1]}, demos have {d}")
    else:
        W0 = config.init_scale * rng.standard_normal((n_rows, d))
    sizes = (4 * n_rows + 4, config.hidden_units, config.hidden_units, 2)
    layers0 = nn.init_layers(sizes, rng)
    W, layers, log = _run_training(W0, layers0, steps, config)
    return AttentionModel(W, tuple(layers), asdict(config), tuple(log))


def finetune_attention(
    model: AttentionModel,
    new_demos,
    config: TrainConfig,
    prior_demos=None,
) -> AttentionModel:
    """Continue training an existing model on new demonstrations.

    ``prior_demos`` may be passed to mix the original data back in.
    Optimizer state restarts (fresh Adam moments). Zero epochs returns a
    model numerically identical to the input.
    """
    demos = list(new_demos) + (list(prior_demos) if prior_demos else [])
    steps = _flatten_demos(demos)
    if steps[0].scene.feature_dim != model.feature_dim:
        raise ValueError(
            f"model expects feature dimension {model.feature_dim}, demos have "
            f"{steps[0].scene.feature_dim}"
        )
    W, layers, log = _run_training(model.W, list(model.predictor), steps, config)
    return AttentionModel(
        W, tuple(layers), asdict(config), tuple(model.training_log) + tuple(log)
    )


# ---------------------------------------------------------------------------
# Persistence


def model_to_dict(model: AttentionModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "M": model.n_rows,
        "d": model.feature_dim,
        "H": model.hidden_units,
        "W": model.W.tolist(),
        "predictor": {
            "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in model.predictor]
        },
        "train_config": dict(model.train_config),
        "training_log": [dict(e) for e in model.training_log],
    }


def model_from_dict(d: dict) -> AttentionModel:
    io.check_version(d, "attention_model")
    W = np.array(io.require(d, "W", "attention_model"), dtype=float)
    pred = io.require(d, "predictor", "attention_model")
    raw_layers = io.require(pred, "layers", "attention_model.predictor")
    layers = tuple(
        (
            np.array(io.require(ld, "W", f"attention_model.predictor.layers[{i}]"), dtype=float),
            np.array(io.require(ld, "b", f"attention_model.predictor.layers[{i}]"), dtype=float),
        )
        for i, ld in enumerate(raw_layers)
    )
    try:
        model = AttentionModel(
            W,
            layers,
            dict(io.require(d, "train_config", "attention_model")),
            tuple(d.get("training_log", ())),
        )
    except ValueError as exc:
        raise SchemaError(f"'attention_model': {exc}") from exc
    for key, value in (("M", model.n_rows), ("d", model.feature_dim), ("H", model.hidden_units)):
        if key in d and int(d[key]) != value:
            raise SchemaError(
                f"'attention_model.{key}' says {d[key]} but arrays imply {value}"
            )
    return model
