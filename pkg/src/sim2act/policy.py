"""Stochastic shipment-mode policy trained with group-relative perturbation.

For each nominal state a group of ``M`` latents is drawn around the
simulator's encoding, decoded into perturbed states, and the policy acts on
every member. The decision loss is

    eta * L_group_adv + (r_star - E_{a ~ pi(.|s)} S_r(s, a))

where ``L_group_adv = -(1/M) sum_i (r_i - r_bar) log pi(a_i | s_i)`` with the
advantages held constant.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import OfflineDataset
from .numerics import (
    ModelSpec,
    NumericOverflowError,
    ShapeError,
    backward,
    forward,
    forward_cached,
    init_params,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
)
from .simulator import SimulatorModel, TrainingDivergedError, decode_state, encode, predict_rewards, reward_table

log = logging.getLogger(__name__)

LOG_PROB_FLOOR = -30.0
R_STAR_RULES = ("per_state_max", "dataset_max")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class PolicyModel:
    spec: ModelSpec
    params: np.ndarray

    @property
    def K(self) -> int:
        return self.spec.n_out

    @property
    def d(self) -> int:
        return self.spec.n_in

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.spec, self.params.copy())


def build_policy(d: int, K: int, hidden: int = 32, seed=0) -> PolicyModel:
    h = (hidden,) if hidden else ()
    spec = ModelSpec((d, *h, K), ("tanh",) * len(h), "softmax")
    return PolicyModel(spec, init_params(spec, seed))


def policy_inputs(s: np.ndarray) -> np.ndarray:
    """Fixed centering of ``[0, 1]`` features to ``[-1, 1]``.

    Uncentered inputs let the softmax saturate on the best-on-average action
    before any state dependence is learned.
    """
    return 2.0 * np.asarray(s, dtype=np.float64) - 1.0


def policy_forward(policy: PolicyModel, s: np.ndarray) -> np.ndarray:
    """Action distribution for one state ``(K,)`` or a batch ``(n, K)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != policy.d:
        raise ShapeError(f"state width {s.shape[-1]} != policy input {policy.d}")
    return forward(policy.spec, policy.params, policy_inputs(s))


def greedy_actions(policy: PolicyModel, states: np.ndarray) -> np.ndarray:
    """Deterministic evaluation action; ties go to the lowest action id."""
    return np.argmax(policy_forward(policy, np.atleast_2d(states)), axis=1)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# perturbation groups


@dataclass(frozen=True)
class DecisionTrainConfig:
    M: int = 8
    eta: float = 1.0
    perturb_scale: float = 1.0
    learning_rate: float = 0.01
    optimizer: str = "adam"
    momentum: float = 0.9  # sgd only
    epochs: int = 10
    batch_size: int = 256
    patience: int = 3
    r_star_rule: str = "per_state_max"
    seed: int = 0

    def validate(self) -> None:
        if self.M < 2:
            raise ValueError(f"group size M must be >= 2, got {self.M}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0 (0 disables the group term)")
        if self.perturb_scale < 0 or self.learning_rate < 0:
            raise ValueError("perturb_scale and learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.r_star_rule not in R_STAR_RULES:
            raise ValueError(f"r_star_rule must be one of {R_STAR_RULES}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, patience >= 1 required")


@dataclass
class PerturbationGroup:
    """Groups for ``B`` nominal states; member arrays have leading ``(B, M)``."""

    states: np.ndarray  # (B, d)
    latents: np.ndarray  # (B, M, L)
    perturbed: np.ndarray  # (B, M, d)
    actions: np.ndarray  # (B, M)
    rewards: np.ndarray  # (B, M)

    @property
    def M(self) -> int:
        return int(self.actions.shape[1])

    @property
    def r_bar(self) -> np.ndarray:
        return self.rewards.mean(axis=1)

    @property
    def advantages(self) -> np.ndarray:
        adv = self.rewards - self.r_bar[:, None]
        # the rounded mean of equal rewards can differ from them in the last bit
        adv[np.ptp(self.rewards, axis=1) == 0] = 0.0
        return adv


def decode_group(
    simulator: SimulatorModel, policy: PolicyModel, states: np.ndarray, latents: np.ndarray, rng: np.random.Generator
) -> PerturbationGroup:
    """Decode given latents, let the policy act on each member, score with the simulator."""
    B, M, L = latents.shape
    pert = decode_state(simulator, latents.reshape(B * M, L))
    acts = sample_actions(policy_forward(policy, pert), rng)
    rewards = predict_rewards(simulator, pert, acts)
    return PerturbationGroup(
        np.asarray(states), latents, pert.reshape(B, M, -1), acts.reshape(B, M), rewards.reshape(B, M)
    )


def sample_groups(
    simulator: SimulatorModel, policy: PolicyModel, states: np.ndarray, M: int, perturb_scale: float, rng: np.random.Generator
) -> PerturbationGroup:
    """One group per row of ``states``.

    The nominal latent is ``encode(s, a0)`` with ``a0`` drawn from the policy;
    members are ``z_i ~ N(z, perturb_scale^2 Sigma)``.
    """
    if M < 2:
        raise ValueError("group size must be >= 2")
    states = np.atleast_2d(states)
    B = states.shape[0]
    a0 = sample_actions(policy_forward(policy, states), rng)
    z, sigma = encode(simulator, states, a0)
    eps = rng.standard_normal((B, M, simulator.L))
    latents = z[:, None, :] + perturb_scale * np.sqrt(sigma)[:, None, :] * eps
    return decode_group(simulator, policy, states, latents, rng)


def sample_group(
    simulator: SimulatorModel, policy: PolicyModel, s: np.ndarray, config: DecisionTrainConfig, seed
) -> PerturbationGroup:
    """Group around a single state (batch axis of size 1)."""
    rng = np.random.default_rng(seed)
    return sample_groups(simulator, policy, np.asarray(s)[None, :], config.M, config.perturb_scale, rng)


def select_group_action(group: PerturbationGroup) -> np.ndarray:
    """Deployment-time pick: the action of the best-scoring member of each group."""
    best = np.argmax(group.rewards, axis=1)
    return group.actions[np.arange(group.actions.shape[0]), best]


# ---------------------------------------------------------------------------
# losses


class LossTerms(NamedTuple):
    total: float
    adv: float
    gap: float
    grad: Optional[np.ndarray]
    clamped: int  # taken actions whose log-prob hit the floor


def _group_adv(policy: PolicyModel, group: PerturbationGroup, advantages: np.ndarray, need_grad: bool):
    B, M = group.actions.shape
    flat_states = group.perturbed.reshape(B * M, -1)
    _, cache = forward_cached(policy.spec, policy.params, policy_inputs(flat_states))
    logits = cache.pre[-1]
    logp_all = log_softmax(logits)
    acts = group.actions.reshape(-1)
    logp = logp_all[np.arange(B * M), acts]
    clamped = logp < LOG_PROB_FLOOR
    logp_c = np.maximum(logp, LOG_PROB_FLOOR)
    A = advantages.reshape(-1)
    loss = -float(np.sum(A * logp_c)) / (M * B)
    if not need_grad:
        return loss, None, int(clamped.sum())
    probs = np.exp(logp_all)
    # d(-A log p_a)/d logits = -A (onehot - p); zero where the floor is active
    g = -(A * ~clamped)[:, None] * (np.eye(policy.K)[acts] - probs) / (M * B)
    grad, _ = backward(policy.spec, policy.params, cache, g, wrt_logits=True)
    return loss, grad, int(clamped.sum())


def group_adv_loss(group: PerturbationGroup, policy: PolicyModel) -> float:
    """Batch mean of ``-(1/M) sum_i (r_i - r_bar) log pi(a_i | s_i)``."""
    return _group_adv(policy, group, group.advantages, False)[0]


def group_policy_gradient(policy: PolicyModel, group: PerturbationGroup, relative: bool = True) -> np.ndarray:
    """Score-function gradient estimate with group-relative or absolute rewards."""
    adv = group.advantages if relative else group.rewards
    return _group_adv(policy, group, adv, True)[1]


def resolve_r_star(rule: str, rewards: np.ndarray, dataset_max: Optional[float]) -> np.ndarray:
    if rule == "per_state_max":
        return rewards.max(axis=1)
    if rule == "dataset_max":
        if dataset_max is None:
            raise ValueError("dataset_max rule needs the train-split maximum reward")
        return np.full(rewards.shape[0], float(dataset_max))
    raise ValueError(f"unknown r* rule {rule!r}")


def _utility_gap(policy: PolicyModel, states: np.ndarray, rewards: np.ndarray, r_star: np.ndarray, need_grad: bool):
    B = states.shape[0]
    probs, cache = forward_cached(policy.spec, policy.params, policy_inputs(states))
    expected = np.sum(probs * rewards, axis=1)
    gap = float(np.mean(r_star - expected))
    if not need_grad:
        return gap, None
    g = -probs * (rewards - expected[:, None]) / B
    return gap, backward(policy.spec, policy.params, cache, g, wrt_logits=True)[0]


def utility_gap(
    simulator: SimulatorModel,
    policy: PolicyModel,
    s: np.ndarray,
    r_star_rule: str = "per_state_max",
    dataset_max: Optional[float] = None,
) -> float:
    """``r_star - sum_a pi(a|s) S_r(s, a)``, averaged if ``s`` is a batch."""
    states = np.atleast_2d(s)
    R = reward_table(simulator, states)
    return _utility_gap(policy, states, R, resolve_r_star(r_star_rule, R, dataset_max), False)[0]


def decision_loss_terms(
    policy: PolicyModel,
    group: Optional[PerturbationGroup],
    states: np.ndarray,
    rewards: np.ndarray,
    r_star: np.ndarray,
    eta: float,
    need_grad: bool = True,
) -> LossTerms:
    """Composite loss from precomputed simulator rewards ``(B, K)`` at ``states``."""
    gap, g_gap = _utility_gap(policy, states, rewards, r_star, need_grad)
    adv, g_adv, clamped = 0.0, None, 0
    if group is not None and eta != 0:
        adv, g_adv, clamped = _group_adv(policy, group, group.advantages, need_grad)
    total = eta * adv + gap
    grad = None
    if need_grad:
        grad = g_gap if g_adv is None else eta * g_adv + g_gap
        if not np.all(np.isfinite(grad)):
            raise NumericOverflowError("non-finite policy gradient")
    return LossTerms(total, adv, gap, grad, clamped)


def decision_loss(
    group: Optional[PerturbationGroup],
    policy: PolicyModel,
    simulator: SimulatorModel,
    s: np.ndarray,
    config: DecisionTrainConfig,
    dataset_max: Optional[float] = None,
) -> float:
    states = np.atleast_2d(s)
    R = reward_table(simulator, states)
    r_star = resolve_r_star(config.r_star_rule, R, dataset_max)
    return decision_loss_terms(policy, group, states, R, r_star, config.eta, need_grad=False).total


# ---------------------------------------------------------------------------
# training


def expected_reward(policy: PolicyModel, simulator: SimulatorModel, states: np.ndarray) -> float:
    """Mean simulator reward of the stochastic policy."""
    return float(np.mean(np.sum(policy_forward(policy, states) * reward_table(simulator, states), axis=1)))


def _optimizer(config: DecisionTrainConfig, shape):
    """Returns ``grad -> parameter increment``."""
    lr = config.learning_rate
    if config.optimizer == "sgd":
        velocity = np.zeros(shape)

        def sgd(g):
            nonlocal velocity
            velocity = config.momentum * velocity - lr * g
            return velocity

        return sgd
    b1, b2, eps = 0.9, 0.999, 1e-8
    m, v, t = np.zeros(shape), np.zeros(shape), 0

    def adam(g):
        nonlocal m, v, t
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        return -lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    return adam


def train_policy(
    policy: PolicyModel,
    simulator: SimulatorModel,
    dataset: OfflineDataset,
    config: DecisionTrainConfig,
) -> tuple[PolicyModel, list[dict]]:
    """Alternate group generation and gradient descent on the decision loss.

    Groups are skipped when ``eta == 0`` (the loss is the utility gap alone).
    Returns the checkpoint with the highest validation expected simulator
    reward and one trace row per epoch.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    train_states = dataset.train.states
    val_states = dataset.val.states
    dataset_max = float(dataset.train.reward.max())
    train_R = reward_table(simulator, train_states)
    val_R = reward_table(simulator, val_states)

    policy = policy.copy()
    theta = policy.params.copy()
    step = _optimizer(config, theta.shape)

    def val_reward() -> float:
        return float(np.mean(np.sum(policy_forward(policy, val_states) * val_R, axis=1)))

    best_val, best_theta = val_reward(), theta.copy()
    trace = [{"epoch": 0, "loss": None, "adv_term": None, "gap_term": None, "val_expected_reward": best_val}]
    stale = 0
    use_groups = config.eta != 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_states))
        sums = np.zeros(3)
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            states, R = train_states[idx], train_R[idx]
            r_star = resolve_r_star(config.r_star_rule, R, dataset_max)
            group = sample_groups(simulator, policy, states, config.M, config.perturb_scale, rng) if use_groups else None
            terms = decision_loss_terms(policy, group, states, R, r_star, config.eta)
            theta = theta + step(terms.grad)
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergedError(f"policy parameters non-finite at epoch {epoch}; trace: {trace}")
            policy.params = theta
            sums += np.array([terms.total, terms.adv, terms.gap]) * len(idx)
        sums /= len(perm)
        v = val_reward()
        trace.append({"epoch": epoch, "loss": sums[0], "adv_term": sums[1], "gap_term": sums[2], "val_expected_reward": v})
        log.debug("policy epoch %d loss %.5f val %.5f", epoch, sums[0], v)
        if v > best_val:
            best_val, best_theta, stale = v, theta.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    policy.params = best_theta
    return policy, trace


def save_policy(policy: PolicyModel, path: str | Path, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, {"policy": (policy.spec, policy.params)}, {"kind": "policy", **(meta or {})})


def load_policy(path: str | Path) -> PolicyModel:
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    spec, params = nets["policy"]
    return PolicyModel(spec, params)


def write_trace(trace: list, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")
