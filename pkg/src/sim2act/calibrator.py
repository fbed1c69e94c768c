"""Adversarial action-conditioned calibration of the simulator.

The calibrator assigns each sample the softmax weight of its own action,
``b(s, a; w) = exp(<s, w_a>) / sum_k exp(<s, w_k>)``. The objective is the
weighted mean residual norm ``J = mean_i b(s_i, a_i; w) * ||y_i - S(x_i)||``
with ``y = (s', r)``. ``w`` ascends ``J``; the simulator descends it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import OfflineDataset, TransitionBatch
from .numerics import ModelSpec, NumericOverflowError, backward, forward_cached, load_checkpoint, save_checkpoint, softmax
from .simulator import (
    MAX_REWARD,
    NET_NAMES,
    SimulatorModel,
    TrainingDivergedError,
    encoder_input,
    sim_accuracy,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationConfig:
    ascent_rate: float = 2.0
    descent_rate: float = 0.05
    rounds: int = 20
    ascent_steps: int = 5
    descent_steps: int = 50
    batch_size: int = 256
    tolerance: float = 1e-3
    patience: int = 3
    monitor_rows: int = 4096
    action_balanced: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.ascent_rate < 0 or self.descent_rate < 0:
            raise ValueError("calibration rates must be >= 0")
        if self.rounds < 0 or self.ascent_steps < 0 or self.descent_steps < 0:
            raise ValueError("rounds and inner step counts must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")


def init_calibrator(d: int, K: int) -> np.ndarray:
    """``(K, d)`` zero weights, i.e. uniform ``1/K`` importance."""
    return np.zeros((K, d))


def action_weights(states: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``(n, K)`` calibrator distribution over actions at each state."""
    return softmax(np.atleast_2d(states) @ w.T, axis=1)


def calib_weight(s: np.ndarray, a: int, w: np.ndarray) -> float:
    return float(action_weights(np.asarray(s)[None, :], w)[0, a])


class Residuals(NamedTuple):
    norm: np.ndarray  # (n,)
    ns_err: np.ndarray  # (n, d) predicted minus observed next state
    r_err: np.ndarray  # (n,) predicted minus observed reward


def _forward_residual(model: SimulatorModel, batch: TransitionBatch):
    sp, pp = model.specs, model.params
    x = encoder_input(model, batch.states, batch.actions)
    z, c_enc = forward_cached(sp["encoder"], pp["encoder"], x)
    ns, c_ns = forward_cached(sp["next_state"], pp["next_state"], z)
    rw, c_rw = forward_cached(sp["reward"], pp["reward"], z)
    ns_err = ns - batch.next_states
    r_err = MAX_REWARD * rw[:, 0] - batch.reward
    norm = np.sqrt(np.sum(ns_err**2, axis=1) + r_err**2)
    return Residuals(norm, ns_err, r_err), (c_enc, c_ns, c_rw)


def residuals(model: SimulatorModel, batch: TransitionBatch) -> Residuals:
    """Euclidean norm of the ``(next state, reward)`` prediction error."""
    return _forward_residual(model, batch)[0]


def calib_objective(w: np.ndarray, model: SimulatorModel, batch: TransitionBatch, res: Optional[Residuals] = None) -> float:
    if len(batch) == 0:
        raise ValueError("calibration objective needs a non-empty batch")
    res = residuals(model, batch) if res is None else res
    b = action_weights(batch.states, w)[np.arange(len(batch)), batch.actions]
    return float(np.mean(b * res.norm))


def grad_w(w: np.ndarray, batch: TransitionBatch, res: Residuals) -> np.ndarray:
    """dJ/dw for fixed residuals."""
    n = len(batch)
    p = action_weights(batch.states, w)
    b = p[np.arange(n), batch.actions]
    onehot = np.eye(w.shape[0])[batch.actions]
    # d b_i / d logit_ik = b_i (1[a_i = k] - p_ik)
    coef = (res.norm * b)[:, None] * (onehot - p) / n
    return coef.T @ batch.states


def grad_theta(w: np.ndarray, model: SimulatorModel, batch: TransitionBatch) -> tuple[float, np.ndarray]:
    """``(J, dJ/dtheta_s)`` with ``w`` frozen; flat gradient in NET_NAMES order.

    The norm's gradient at a zero residual is taken as zero.
    """
    n = len(batch)
    res, (c_enc, c_ns, c_rw) = _forward_residual(model, batch)
    b = action_weights(batch.states, w)[np.arange(n), batch.actions]
    J = float(np.mean(b * res.norm))
    safe = np.where(res.norm > 0, res.norm, 1.0)
    coef = np.where(res.norm > 0, b / safe, 0.0) / n
    sp, pp = model.specs, model.params
    g_ns, dz_ns = backward(sp["next_state"], pp["next_state"], c_ns, coef[:, None] * res.ns_err)
    g_rw, dz_rw = backward(sp["reward"], pp["reward"], c_rw, (coef * res.r_err * MAX_REWARD)[:, None])
    g_enc, _ = backward(sp["encoder"], pp["encoder"], c_enc, dz_ns + dz_rw)
    parts = {name: np.zeros(sp[name].n_params) for name in NET_NAMES}
    parts["next_state"], parts["reward"], parts["encoder"] = g_ns, g_rw, g_enc
    return J, np.concatenate([parts[nm] for nm in NET_NAMES])


def calibrator_ascent_step(w: np.ndarray, model: SimulatorModel, batch: TransitionBatch, rate: float) -> np.ndarray:
    """``w + rate * dJ/dw``."""
    if rate < 0:
        raise ValueError("ascent rate must be >= 0")
    g = grad_w(w, batch, residuals(model, batch))
    if not np.all(np.isfinite(g)):
        raise NumericOverflowError("non-finite calibrator gradient")
    return w + rate * g


def simulator_descent_step(w: np.ndarray, model: SimulatorModel, batch: TransitionBatch, rate: float) -> SimulatorModel:
    """Copy of ``model`` with ``theta_s - rate * dJ/dtheta_s``."""
    if rate < 0:
        raise ValueError("descent rate must be >= 0")
    _, g = grad_theta(w, model, batch)
    if not np.all(np.isfinite(g)):
        raise NumericOverflowError("non-finite simulator gradient")
    out = model.copy()
    if rate:
        out.set_flat(model.flat() - rate * g)
    return out


class CalibrationResult(NamedTuple):
    model: SimulatorModel
    w: np.ndarray
    trace: list  # rows {round, J, val_overall}


def run_calibration(model: SimulatorModel, dataset: OfflineDataset, config: CalibrationConfig) -> CalibrationResult:
    """Alternate ascent on ``w`` and descent on the simulator.

    Each round runs ``ascent_steps`` minibatch ascent steps then
    ``descent_steps`` minibatch descent steps. ``val_overall`` is the
    validation overall error ``1 - sim accuracy``; the loop stops early once
    it changes by less than ``tolerance`` for ``patience`` consecutive
    rounds. The checkpoint with the lowest ``val_overall`` among calibrated
    rounds is returned.
    """
    config.validate()
    w = init_calibrator(model.d, model.K)
    if config.rounds == 0:
        return CalibrationResult(model.copy(), w, [])
    train, val = dataset.train, dataset.val
    rng = np.random.default_rng(config.seed)
    monitor = train.take(rng.choice(len(train), size=min(config.monitor_rows, len(train)), replace=False))

    by_action = [np.flatnonzero(train.actions == k) for k in range(model.K)]
    by_action = [ix for ix in by_action if len(ix)]

    def minibatch() -> TransitionBatch:
        size = min(config.batch_size, len(train))
        if not config.action_balanced:
            return train.take(rng.integers(0, len(train), size=size))
        # equal share per observed action, drawn with replacement
        counts = np.bincount(rng.integers(0, len(by_action), size=size), minlength=len(by_action))
        idx = np.concatenate([ix[rng.integers(0, len(ix), size=c)] for ix, c in zip(by_action, counts)])
        return train.take(idx)

    current = model.copy()
    prev_err = 1.0 - sim_accuracy(current, val).overall
    best = None
    trace = []
    calm = 0
    for rnd in range(1, config.rounds + 1):
        for _ in range(config.ascent_steps):
            w = calibrator_ascent_step(w, current, minibatch(), config.ascent_rate)
        theta = current.flat()
        for _ in range(config.descent_steps):
            _, g = grad_theta(w, current, minibatch())
            theta = theta - config.descent_rate * g
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergedError(f"calibration diverged in round {rnd}; trace so far: {trace}")
            current.set_flat(theta)
        J = calib_objective(w, current, monitor)
        err = 1.0 - sim_accuracy(current, val).overall
        if not np.isfinite(J):
            raise TrainingDivergedError(f"calibration objective non-finite in round {rnd}; trace so far: {trace}")
        trace.append({"round": rnd, "J": J, "val_overall": err})
        log.debug("calibration round %d J %.5f val err %.5f", rnd, J, err)
        if best is None or err < best[0]:
            best = (err, current.copy(), w.copy())
        calm = calm + 1 if abs(err - prev_err) < config.tolerance else 0
        prev_err = err
        if calm >= config.patience:
            break
    return CalibrationResult(best[1], best[2], trace)


def save_calibrator(w: np.ndarray, path: str | Path) -> None:
    K, d = w.shape
    save_checkpoint(path, {"w": (ModelSpec((d, K)), np.concatenate([w.T.ravel(), np.zeros(K)]))}, {"kind": "calibrator"})


def load_calibrator(path: str | Path) -> np.ndarray:
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "calibrator":
        raise ValueError(f"{path}: not a calibrator checkpoint")
    spec, values = nets["w"]
    d, K = spec.layer_widths
    return values[: d * K].reshape(d, K).T.copy()


def write_trace(trace: list, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")
