"""Perturbation probes, decision/simulation robustness metrics, CVaR, sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .data import GroundTruth, TransitionBatch
from .policy import PolicyModel, greedy_actions, policy_forward
from .simulator import SimulatorModel, decode_state, encode, predict, reward_table, sim_accuracy

PERTURB_KINDS = ("latent_structured", "random_input")
DEFAULT_LEVELS = (0.0, 0.1, 0.25, 0.5, 1.0)


def level_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, level index, run) so cells can run in any order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class PerturbSpec:
    kind: str = "random_input"
    magnitude: float = 0.0
    samples: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"perturbation kind must be one of {PERTURB_KINDS}")
        if not self.magnitude >= 0:
            raise ValueError("perturbation magnitude must be >= 0")
        if self.samples < 1:
            raise ValueError("samples per state must be >= 1")


class PerturbedStates(NamedTuple):
    nominal: np.ndarray  # (n, d) zero point of the perturbation
    perturbed: np.ndarray  # (n, samples, d)


def perturb_states(
    spec: PerturbSpec,
    simulator: Optional[SimulatorModel],
    states: np.ndarray,
    policy: Optional[PolicyModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> PerturbedStates:
    """Random input noise ``clip(s + eps * N(0, I))`` or latent noise.

    Latent noise encodes ``(s, argmax policy(s))`` and decodes
    ``z' ~ N(z, p^2 Sigma)``; its zero point is the decoded latent mean.
    """
    rng = level_rng(spec.seed) if rng is None else rng
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n, d = states.shape
    m = spec.samples
    if spec.kind == "random_input":
        noise = rng.standard_normal((n, m, d))
        pert = np.clip(states[:, None, :] + spec.magnitude * noise, 0.0, 1.0)
        return PerturbedStates(states, pert)
    if simulator is None or policy is None:
        raise ValueError("latent perturbation needs a simulator and a policy")
    z, sigma = encode(simulator, states, greedy_actions(policy, states))
    nominal = decode_state(simulator, z)
    eps = rng.standard_normal((n, m, simulator.L))
    zp = z[:, None, :] + spec.magnitude * np.sqrt(sigma)[:, None, :] * eps
    pert = decode_state(simulator, zp.reshape(n * m, -1)).reshape(n, m, d)
    return PerturbedStates(nominal, pert)


def greedy_weights(policy: PolicyModel, states: np.ndarray) -> np.ndarray:
    """``(n, K)`` uniform weights over the exactly-tied argmax actions.

    Identical to one-hot argmax whenever the maximum is unique; an untrained
    zero-weight policy spreads evenly over all actions.
    """
    p = policy_forward(policy, np.atleast_2d(states))
    top = (p == p.max(axis=1, keepdims=True)).astype(np.float64)
    return top / top.sum(axis=1, keepdims=True)


def greedy_sim_reward(policy: PolicyModel, simulator: SimulatorModel, states: np.ndarray) -> np.ndarray:
    """``S_r(s, D(s))`` per row."""
    states = np.atleast_2d(states)
    return np.sum(greedy_weights(policy, states) * reward_table(simulator, states), axis=1)


def robustness_score(
    policy: PolicyModel, simulator: SimulatorModel, states: np.ndarray, spec: PerturbSpec, rng=None
) -> float:
    """``R = -mean[S_r(s, D(s)) - S_r(s', D(s'))]`` with the greedy policy ``D``."""
    states = np.atleast_2d(states)
    if states.shape[0] == 0:
        raise ValueError("robustness score needs at least one probe state")
    ps = perturb_states(spec, simulator, states, policy, rng)
    n, m, d = ps.perturbed.shape
    base = greedy_sim_reward(policy, simulator, ps.nominal)
    pert = greedy_sim_reward(policy, simulator, ps.perturbed.reshape(n * m, d)).reshape(n, m)
    return float(-np.mean(base[:, None] - pert))


def robustness_gate(R: float, delta: float) -> bool:
    """Strict ``R > delta``; reported only, never fed back into training."""
    if not math.isfinite(R):
        raise ValueError("robustness score must be finite")
    return bool(R > delta)


# ---------------------------------------------------------------------------
# decision metrics


class DecisionMetrics(NamedTuple):
    timely: float
    profit: float
    diff: float
    overall: float

    @classmethod
    def from_rates(cls, timely: float, profit: float) -> "DecisionMetrics":
        return cls(timely, profit, abs(profit - timely), timely + profit)


class OutcomeOracle(Protocol):
    name: str

    def outcomes(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row on-time indicator (or probability) and normalized profit."""


class GroundTruthOracle:
    name = "ground_truth"

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def outcomes(self, states, actions):
        out = self.truth.outcomes(states, actions)
        return out["status"].astype(np.float64), out["profit"]


class SimulatorOracle:
    """Outcomes as predicted by a simulator: P(on time), and reward minus that."""

    name = "simulator"

    def __init__(self, simulator: SimulatorModel):
        self.simulator = simulator

    def outcomes(self, states, actions):
        out = predict(self.simulator, states, actions)
        return out.status, np.clip(out.reward - out.status, 0.0, 1.0)


def decision_returns(
    policy: PolicyModel, true_states: np.ndarray, oracle: OutcomeOracle, observed: Optional[np.ndarray] = None
) -> tuple[DecisionMetrics, np.ndarray]:
    """Greedy decisions from ``observed`` states scored at ``true_states``.

    Exact argmax ties are averaged over the tied actions. Returns the
    metrics and the per-row return ``on_time + profit``.
    """
    true_states = np.atleast_2d(true_states)
    n = true_states.shape[0]
    if n == 0:
        raise ValueError("decision metrics need at least one row")
    obs = true_states if observed is None else np.atleast_2d(observed)
    weights = greedy_weights(policy, obs)
    status, profit = np.zeros(n), np.zeros(n)
    for a in np.flatnonzero(weights.any(axis=0)):
        st, pr = oracle.outcomes(true_states, np.full(n, a))
        status += weights[:, a] * st
        profit += weights[:, a] * pr
    return DecisionMetrics.from_rates(float(np.mean(status)), float(np.mean(profit))), status + profit


def decision_metrics(
    policy: PolicyModel, states: np.ndarray, oracle: OutcomeOracle, observed: Optional[np.ndarray] = None
) -> DecisionMetrics:
    return decision_returns(policy, states, oracle, observed)[0]


def cvar(returns: Sequence[float], alpha: float = 0.05) -> float:
    """Mean of the ceil(alpha * n) smallest returns."""
    r = np.sort(np.asarray(returns, dtype=np.float64).ravel())
    if r.size == 0:
        raise ValueError("CVaR of an empty sample")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    k = max(1, math.ceil(alpha * r.size - 1e-9))
    return float(np.mean(r[:k]))


# ---------------------------------------------------------------------------
# sweeps


class SimRobustness(NamedTuple):
    level: float
    nominal: float
    mean: float
    worst_case: float
    variance: float  # population standard deviation of overall accuracy
    drop_rate: float


def sim_robustness(
    model: SimulatorModel, rows: TransitionBatch, levels: Sequence[float], runs: int, seed: int
) -> list[SimRobustness]:
    """Overall sim accuracy under input noise, summarized per level across seeded runs."""
    if runs < 2:
        raise ValueError("sim_robustness needs at least 2 runs per level")
    nominal = sim_accuracy(model, rows).overall
    out = []
    for li, level in enumerate(levels):
        scores = []
        for run in range(runs):
            spec = PerturbSpec("random_input", float(level), 1, seed)
            ps = perturb_states(spec, None, rows.states, rng=level_rng(seed, li, run))
            scores.append(sim_accuracy(model, rows, ps.perturbed[:, 0, :]).overall)
        scores = np.asarray(scores)
        out.append(SimRobustness(float(level), nominal, float(scores.mean()), float(scores.min()), float(scores.std()), nominal - float(scores.mean())))
    return out


def summarize_sim_runs(scores: Sequence[float], nominal: float, level: float = 0.0) -> SimRobustness:
    s = np.asarray(scores, dtype=np.float64)
    return SimRobustness(level, nominal, float(s.mean()), float(s.min()), float(s.std()), nominal - float(s.mean()))


def degradation_slope(levels: Sequence[float], overall: Sequence[float]) -> float:
    """Least-squares slope of Overall against perturbation level."""
    x = np.asarray(levels, dtype=np.float64)
    y = np.asarray(overall, dtype=np.float64)
    xc = x - x.mean()
    return float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))


class SweepCell(NamedTuple):
    kind: str
    level: float
    run: int
    metrics: DecisionMetrics
    cvar5: float
    R: float


class SweepResult(NamedTuple):
    kind: str
    levels: tuple
    curve: tuple  # mean Overall per level
    slope: float
    cells: list


def sweep(
    policy: PolicyModel,
    simulator: SimulatorModel,
    kind: str,
    levels: Sequence[float],
    runs: int,
    seed: int,
    states: np.ndarray,
    oracle: OutcomeOracle,
    alpha: float = 0.05,
) -> SweepResult:
    """Decision metrics, CVaR and R per (level, run) plus the degradation curve.

    Perturbed states are treated as the states actually faced: the greedy
    policy acts on them and ``oracle`` scores the outcome there.
    """
    levels = tuple(float(v) for v in levels)
    if 0.0 not in levels:
        raise ValueError("sweep levels must include 0")
    cells = []
    for li, level in enumerate(levels):
        for run in range(runs):
            spec = PerturbSpec(kind, level, 1, seed)
            ps = perturb_states(spec, simulator, states, policy, rng=level_rng(seed, li, run))
            observed = ps.perturbed[:, 0, :]
            metrics, returns = decision_returns(policy, observed, oracle)
            R = float(-np.mean(greedy_sim_reward(policy, simulator, ps.nominal) - greedy_sim_reward(policy, simulator, observed)))
            cells.append(SweepCell(kind, level, run, metrics, cvar(returns, alpha), R))
    curve = tuple(float(np.mean([c.metrics.overall for c in cells if c.level == lv])) for lv in levels)
    return SweepResult(kind, levels, curve, degradation_slope(levels, curve), cells)
