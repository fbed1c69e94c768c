"""Latent-variable surrogate simulator.

``(s, onehot(a))`` is encoded to a latent mean ``z`` and a diagonal
covariance ``Sigma``; decoder heads read ``z`` and predict the next state,
a reconstruction of the current state, delay risk, delivery-time class,
on-time status and reward.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import OfflineDataset, TransitionBatch
from .numerics import (
    SOFTPLUS_FLOOR,
    ModelSpec,
    NumericOverflowError,
    ShapeError,
    backward,
    forward,
    forward_cached,
    init_params,
    load_checkpoint,
    log_sigmoid,
    log_softmax,
    save_checkpoint,
    sigmoid,
    softplus,
)

log = logging.getLogger(__name__)

HEADS = ("next_state", "recon", "risk", "status", "time", "reward")
NET_NAMES = ("encoder", "cov") + HEADS
MAX_REWARD = 2.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossCoefficients:
    next_state: float = 1.0
    reward: float = 1.0
    risk: float = 1.0
    time: float = 1.0
    status: float = 1.0
    recon: float = 1.0
    nll: float = 1.0


@dataclass
class SimulatorModel:
    d: int
    K: int
    C: int
    L: int
    specs: dict[str, ModelSpec]
    params: dict[str, np.ndarray]

    def copy(self) -> "SimulatorModel":
        return SimulatorModel(self.d, self.K, self.C, self.L, dict(self.specs), {k: v.copy() for k, v in self.params.items()})

    # flat view over every network, in NET_NAMES order
    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n] for n in NET_NAMES])

    def set_flat(self, theta: np.ndarray) -> None:
        off = 0
        for n in NET_NAMES:
            k = self.specs[n].n_params
            self.params[n] = np.array(theta[off : off + k], dtype=np.float64)
            off += k
        if off != theta.shape[0]:
            raise ShapeError(f"expected {off} parameters, got {theta.shape[0]}")

    @property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.specs.values())


def build_simulator(d: int, K: int, C: int, latent_dim: int = 8, hidden: int = 32, seed=0) -> SimulatorModel:
    """Fresh simulator with seeded uniform fan-in initialization."""
    rng = np.random.default_rng(seed)
    L = latent_dim
    h = (hidden,) if hidden else ()
    acts = ("tanh",) * len(h)
    specs = {
        "encoder": ModelSpec((d + K, *h, L), acts, "identity"),
        "cov": ModelSpec((d + K, *h, L), acts, "identity"),
        "next_state": ModelSpec((L, *h, d), acts, "sigmoid"),
        "recon": ModelSpec((L, *h, d), acts, "sigmoid"),
        "risk": ModelSpec((L, *h, 1), acts, "sigmoid"),
        "status": ModelSpec((L, *h, 1), acts, "sigmoid"),
        "time": ModelSpec((L, *h, C), acts, "softmax"),
        "reward": ModelSpec((L, *h, 1), acts, "sigmoid"),
    }
    params = {n: init_params(specs[n], rng) for n in NET_NAMES}
    return SimulatorModel(d, K, C, L, specs, params)


class SimOutput(NamedTuple):
    next_state: np.ndarray  # (n, d)
    reward: np.ndarray  # (n,) in (0, 2)
    risk: np.ndarray  # (n,) P(delay risk)
    status: np.ndarray  # (n,) P(on time)
    time: np.ndarray  # (n, C) class distribution
    recon: np.ndarray  # (n, d)
    z: np.ndarray  # (n, L)
    sigma: np.ndarray  # (n, L) diagonal covariance


def encoder_input(model: SimulatorModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.shape[1] != model.d:
        raise ShapeError(f"state width {states.shape[1]} != model d = {model.d}")
    actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (states.shape[0],))
    if np.any(actions < 0) or np.any(actions >= model.K):
        raise ShapeError(f"action ids must be in [0, {model.K})")
    return np.hstack([states, np.eye(model.K)[actions]])


def _net(model: SimulatorModel, name: str, x: np.ndarray) -> np.ndarray:
    return forward(model.specs[name], model.params[name], x)


def encode(model: SimulatorModel, states: np.ndarray, actions) -> tuple[np.ndarray, np.ndarray]:
    """Latent mean ``z`` and diagonal covariance ``Sigma`` (both ``(n, L)``)."""
    x = encoder_input(model, states, actions)
    z = _net(model, "encoder", x)
    sigma = softplus(_net(model, "cov", x)) + SOFTPLUS_FLOOR
    return z, sigma


def decode_state(model: SimulatorModel, z: np.ndarray) -> np.ndarray:
    """Map latents back to states in ``[0, 1]^d`` through the reconstruction head."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.L:
        raise ShapeError(f"latent width {z.shape[-1]} != L = {model.L}")
    return _net(model, "recon", z)


def reward_from_latent(model: SimulatorModel, z: np.ndarray) -> np.ndarray:
    return MAX_REWARD * _net(model, "reward", z)[..., 0]


def predict(model: SimulatorModel, states: np.ndarray, actions) -> SimOutput:
    z, sigma = encode(model, states, actions)
    return SimOutput(
        next_state=_net(model, "next_state", z),
        reward=MAX_REWARD * _net(model, "reward", z)[:, 0],
        risk=_net(model, "risk", z)[:, 0],
        status=_net(model, "status", z)[:, 0],
        time=_net(model, "time", z),
        recon=_net(model, "recon", z),
        z=z,
        sigma=sigma,
    )


def sim_forward(model: SimulatorModel, s: np.ndarray, a: int) -> SimOutput:
    """Single ``(s, a)`` query; every field drops the batch axis."""
    out = predict(model, np.asarray(s, dtype=np.float64)[None, :], np.array([a]))
    return SimOutput(*(v[0] for v in out))


def predict_rewards(model: SimulatorModel, states: np.ndarray, actions) -> np.ndarray:
    z, _ = encode(model, states, actions)
    return reward_from_latent(model, z)


def reward_table(model: SimulatorModel, states: np.ndarray) -> np.ndarray:
    """``(n, K)`` predicted reward of every action at every state."""
    states = np.atleast_2d(states)
    n = states.shape[0]
    x = np.repeat(states, model.K, axis=0)
    a = np.tile(np.arange(model.K), n)
    return predict_rewards(model, x, a).reshape(n, model.K)


# ---------------------------------------------------------------------------
# loss


class LossResult(NamedTuple):
    loss: float  # mean over the batch of weight * per-sample loss
    per_sample: np.ndarray  # unweighted per-sample loss
    components: dict  # batch means of each unweighted component
    grad: Optional[np.ndarray]  # flat gradient (NET_NAMES order) or None
    latent_residual: np.ndarray  # (n, L), held constant in the gradient


def loss_and_grad(
    model: SimulatorModel,
    batch: TransitionBatch,
    weights: Optional[np.ndarray] = None,
    coefs: LossCoefficients = LossCoefficients(),
    *,
    need_grad: bool = True,
    latent_residual: Optional[np.ndarray] = None,
) -> LossResult:
    """Weighted composite loss and its analytic gradient.

    Per sample: mean squared next-state error, squared reward error,
    binary cross-entropy of risk and status, cross-entropy of the time class,
    mean squared state-reconstruction error, and a Gaussian NLL of the
    latent residual under ``N(0, Sigma)``. The latent residual is the
    gradient of the supervised terms with respect to ``z`` (how far the latent
    would have to move to fix the prediction); it is treated as a constant.
    Passing ``latent_residual`` pins it, which the finite-difference check uses.
    """
    n = len(batch)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sample weights must be finite and >= 0")
    sp, pp = model.specs, model.params
    x = encoder_input(model, batch.states, batch.actions)
    z, c_enc = forward_cached(sp["encoder"], pp["encoder"], x)
    cov_pre, c_cov = forward_cached(sp["cov"], pp["cov"], x)
    sigma = softplus(cov_pre) + SOFTPLUS_FLOOR

    outs, caches = {}, {}
    for h in HEADS:
        outs[h], caches[h] = forward_cached(sp[h], pp[h], z)
    d = model.d

    ns_err = outs["next_state"] - batch.next_states
    rc_err = outs["recon"] - batch.states
    r_hat = MAX_REWARD * outs["reward"][:, 0]
    r_err = r_hat - batch.reward
    risk_logit = caches["risk"].pre[-1][:, 0]
    status_logit = caches["status"].pre[-1][:, 0]
    time_logits = caches["time"].pre[-1]
    y_risk = batch.risk.astype(np.float64)
    y_status = batch.status.astype(np.float64)

    comp = {
        "next_state": np.mean(ns_err**2, axis=1),
        "reward": r_err**2,
        "risk": -(y_risk * log_sigmoid(risk_logit) + (1 - y_risk) * log_sigmoid(-risk_logit)),
        "status": -(y_status * log_sigmoid(status_logit) + (1 - y_status) * log_sigmoid(-status_logit)),
        "time": -log_softmax(time_logits)[np.arange(n), batch.time],
        "recon": np.mean(rc_err**2, axis=1),
    }

    # d(supervised per-sample loss)/d(head output or logits), unweighted
    g_heads = {
        "next_state": coefs.next_state * 2.0 * ns_err / d,
        "recon": coefs.recon * 2.0 * rc_err / d,
        "reward": (coefs.reward * 2.0 * r_err * MAX_REWARD)[:, None],
        "risk": (coefs.risk * (sigmoid(risk_logit) - y_risk))[:, None],
        "status": (coefs.status * (sigmoid(status_logit) - y_status))[:, None],
        "time": coefs.time * (outs["time"] - np.eye(model.C)[batch.time]),
    }
    logits_heads = {"risk", "status", "time"}
    head_grads = {}
    dz = np.zeros_like(z)
    for h in HEADS:
        gp, gz = backward(sp[h], pp[h], caches[h], g_heads[h], wrt_logits=h in logits_heads)
        head_grads[h] = gp
        dz += gz
    delta = dz if latent_residual is None else np.asarray(latent_residual, dtype=np.float64)

    comp["nll"] = 0.5 * np.mean(np.log(sigma) + delta**2 / sigma, axis=1)
    per_sample = sum(getattr(coefs, k) * v for k, v in comp.items())
    loss = float(np.mean(w * per_sample))
    if not np.isfinite(loss):
        raise NumericOverflowError("non-finite simulator loss")
    components = {k: float(np.mean(v)) for k, v in comp.items()}
    if not need_grad:
        return LossResult(loss, per_sample, components, None, delta)

    # batch-mean with sample weights: scale per-sample gradients by w/n
    scale = (w / n)[:, None]
    grads = {}
    for h in HEADS:
        gp, _ = backward(sp[h], pp[h], caches[h], g_heads[h] * scale, wrt_logits=h in logits_heads)
        grads[h] = gp
    grads["encoder"], _ = backward(sp["encoder"], pp["encoder"], c_enc, dz * scale)
    # d/d sigma of 0.5*mean(log s + delta^2/s); softplus' = sigmoid(pre)
    g_sigma = coefs.nll * 0.5 * (1.0 / sigma - delta**2 / sigma**2) / model.L
    grads["cov"], _ = backward(sp["cov"], pp["cov"], c_cov, g_sigma * sigmoid(cov_pre) * scale)
    flat = np.concatenate([grads[nm] for nm in NET_NAMES])
    if not np.all(np.isfinite(flat)):
        raise NumericOverflowError("non-finite simulator gradient")
    return LossResult(loss, per_sample, components, flat, delta)


def weighted_sample_loss(
    model: SimulatorModel, transition, weight: float, coefs: LossCoefficients = LossCoefficients()
) -> float:
    """``weight`` times the composite loss of one transition."""
    if not np.isfinite(weight) or weight < 0:
        raise ValueError("weight must be finite and >= 0")
    batch = transition if isinstance(transition, TransitionBatch) else TransitionBatch.from_transitions([transition])
    return float(weight) * float(loss_and_grad(model, batch, None, coefs, need_grad=False).per_sample[0])


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SimTrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 256
    early_stopping_patience: int = 4
    l2_penalty: float = 1e-5
    momentum: float = 0.9
    seed: int = 0
    coefs: LossCoefficients = field(default_factory=LossCoefficients)

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.early_stopping_patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, patience >= 1 required")
        if self.l2_penalty < 0 or not 0 <= self.momentum < 1:
            raise ValueError("l2_penalty >= 0 and momentum in [0, 1) required")


def dataset_loss(model: SimulatorModel, rows: TransitionBatch, coefs: LossCoefficients, chunk: int = 8192) -> float:
    total = 0.0
    for start in range(0, len(rows), chunk):
        part = rows.take(np.arange(start, min(start + chunk, len(rows))))
        total += loss_and_grad(model, part, None, coefs, need_grad=False).loss * len(part)
    return total / len(rows)


def train_simulator(
    model: SimulatorModel,
    dataset: OfflineDataset,
    config: SimTrainConfig,
    weights: Optional[np.ndarray] = None,
) -> tuple[SimulatorModel, list[dict]]:
    """Minibatch gradient descent (with momentum) on the weighted mean loss.

    ``weights`` are per train-split row. Early stopping watches the
    unweighted validation loss; the best-validation parameters are returned.
    """
    config.validate()
    train, val = dataset.train, dataset.val
    if len(train) == 0 or len(val) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    w_all = np.ones(len(train)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w_all.shape != (len(train),):
        raise ShapeError(f"expected {len(train)} train weights, got {w_all.shape}")

    rng = np.random.default_rng(config.seed)
    model = model.copy()
    theta = model.flat()
    velocity = np.zeros_like(theta)
    best_val = dataset_loss(model, val, config.coefs)
    best_theta = theta.copy()
    curve = [{"epoch": 0, "train_loss": None, "val_loss": best_val}]
    stale = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), config.batch_size):
            idx = perm[start : start + config.batch_size]
            res = loss_and_grad(model, train.take(idx), w_all[idx], config.coefs)
            g = res.grad + config.l2_penalty * theta
            velocity = config.momentum * velocity - config.learning_rate * g
            theta = theta + velocity
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergedError(f"parameters became non-finite at epoch {epoch}")
            model.set_flat(theta)
            epoch_loss += res.loss * len(idx)
        val_loss = dataset_loss(model, val, config.coefs)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss non-finite at epoch {epoch}")
        curve.append({"epoch": epoch, "train_loss": epoch_loss / len(train), "val_loss": val_loss})
        log.debug("sim epoch %d train %.5f val %.5f", epoch, epoch_loss / len(train), val_loss)
        if val_loss < best_val:
            best_val, best_theta, stale = val_loss, theta.copy(), 0
        else:
            stale += 1
            if stale >= config.early_stopping_patience:
                break
    model.set_flat(best_theta)
    return model, curve


# ---------------------------------------------------------------------------
# evaluation


class SimAccuracy(NamedTuple):
    risk: float
    time: float
    status: float
    overall: float

    @classmethod
    def from_components(cls, risk: float, time: float, status: float) -> "SimAccuracy":
        return cls(risk, time, status, (risk + time + status) / 3.0)


def accuracy_from_predictions(
    risk_p: np.ndarray, time_p: np.ndarray, status_p: np.ndarray, rows: TransitionBatch
) -> SimAccuracy:
    return SimAccuracy.from_components(
        float(np.mean((risk_p >= 0.5).astype(np.int64) == rows.risk)),
        float(np.mean(np.argmax(time_p, axis=1) == rows.time)),
        float(np.mean((status_p >= 0.5).astype(np.int64) == rows.status)),
    )


def sim_accuracy(model: SimulatorModel, rows: TransitionBatch, states: Optional[np.ndarray] = None) -> SimAccuracy:
    """Risk/status accuracy at a 0.5 threshold, time accuracy by argmax.

    ``states`` optionally replaces the row states (perturbed inputs) while
    labels stay those of ``rows``.
    """
    if len(rows) == 0:
        raise ValueError("sim_accuracy needs at least one row")
    out = predict(model, rows.states if states is None else states, rows.actions)
    return accuracy_from_predictions(out.risk, out.time, out.status, rows)


def reward_mae_by_action(model: SimulatorModel, states: np.ndarray, truth_table: np.ndarray) -> np.ndarray:
    """Per-action mean |r_hat(s, a) - r_true(s, a)| over ``states``."""
    return np.mean(np.abs(reward_table(model, states) - truth_table), axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_simulator(model: SimulatorModel, path: str | Path, meta: Optional[dict] = None) -> None:
    schema = {"d": model.d, "K": model.K, "C": model.C, "L": model.L}
    save_checkpoint(path, {n: (model.specs[n], model.params[n]) for n in NET_NAMES}, {"kind": "simulator", **schema, **(meta or {})})


def load_simulator(path: str | Path) -> SimulatorModel:
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "simulator":
        raise ValueError(f"{path}: not a simulator checkpoint")
    return SimulatorModel(
        meta["d"], meta["K"], meta["C"], meta["L"], {n: nets[n][0] for n in NET_NAMES}, {n: nets[n][1] for n in NET_NAMES}
    )
