"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL criterion N: ...`` line, printed on stdout
(visible with ``-s``) and again in the terminal summary.
"""

from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import CRITERIA
from oracles import cvar_ref
from sim2act import pipeline
from sim2act.calibrator import calib_objective, calibrator_ascent_step, grad_theta, grad_w, residuals, simulator_descent_step
from sim2act.config import resolve_config
from sim2act.data import SyntheticEnvConfig, generate_synthetic
from sim2act.numerics import ModelSpec, central_difference, forward, gradient, max_relative_error
from sim2act.policy import (
    DecisionTrainConfig,
    PerturbationGroup,
    PolicyModel,
    build_policy,
    decision_loss_terms,
    group_adv_loss,
    group_policy_gradient,
    policy_forward,
    sample_groups,
    train_policy,
)
from sim2act.robustness import DecisionMetrics, PerturbSpec, cvar, degradation_slope, robustness_gate, robustness_score
from sim2act.simulator import SimAccuracy, build_simulator, loss_and_grad, reward_mae_by_action, sim_accuracy

FD_TOL = 1e-4
# simulator losses are O(1) with many near-zero partials; 1e-6 steps drown them in rounding
SIM_FD_STEP = 1e-5
N_CONFIGS = 100


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    CRITERIA.append(line)
    assert ok, line


def _random_group(rng, d, K, B=None, M=None):
    B = int(rng.integers(1, 4)) if B is None else B
    M = int(rng.integers(2, 6)) if M is None else M
    pert = rng.uniform(size=(B, M, d))
    return PerturbationGroup(pert[:, 0], np.zeros((B, M, 1)), pert, rng.integers(0, K, size=(B, M)), rng.uniform(0, 2, size=(B, M)))


# ---------------------------------------------------------------------------
# 1


def test_criterion_1_metric_identities():
    lp = DecisionMetrics.from_rates(0.5162, 0.5434)
    dqn = DecisionMetrics.from_rates(0.2827, 0.9326)
    acc = SimAccuracy.from_components(0.4978, 0.1487, 0.5040)
    ok = (
        abs(lp.diff - 0.0272) <= 1e-12
        and abs(lp.overall - 1.0596) <= 1e-12
        and abs(dqn.diff - 0.6499) <= 1e-12
        and abs(dqn.overall - 1.2153) <= 1e-12
        and abs(acc.overall - 0.3835) <= 1e-4
    )
    report(1, ok, f"LP diff {lp.diff:.4f} overall {lp.overall:.4f}; DQN diff {dqn.diff:.4f} overall {dqn.overall:.4f}; sim acc {acc.overall:.4f}")


# ---------------------------------------------------------------------------
# 2


def _fd_forward(rng) -> float:
    widths = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4)))
    out_act = ("identity", "sigmoid", "softmax")[int(rng.integers(0, 3))]
    if out_act == "softmax" and widths[-1] < 2:
        widths = widths[:-1] + (2,)
    spec = ModelSpec(widths, (("tanh", "relu", "identity")[int(rng.integers(0, 3))],), out_act)
    params = rng.normal(size=spec.n_params)
    x = rng.normal(size=widths[0])
    target = rng.normal(size=widths[-1])

    def loss(y):
        return float(np.sum((y - target) ** 2)), 2 * (y - target)

    num = central_difference(lambda p: loss(forward(spec, p, x))[0], params, 1e-5)
    return max_relative_error(gradient(spec, params, loss, x), num)


def _sim_case(rng):
    d, K, C = int(rng.integers(2, 4)), int(rng.integers(2, 4)), 3
    seed = int(rng.integers(0, 2**31))
    m = build_simulator(d, K, C, latent_dim=2, hidden=int(rng.integers(0, 4)), seed=seed)
    ds = generate_synthetic(SyntheticEnvConfig(d=d, K=K, C=C, n_rows=40, seed=seed, label_noise=0.2))
    return m, ds.rows.take(rng.integers(0, 40, size=int(rng.integers(1, 5))))


def _flat_fn(m, fn):
    def f(th):
        mm = m.copy()
        mm.set_flat(th)
        return fn(mm)

    return f


def _fd_sample_loss(rng) -> float:
    m, batch = _sim_case(rng)
    w = rng.uniform(0.1, 3.0, size=len(batch))
    res = loss_and_grad(m, batch, w)
    f = _flat_fn(m, lambda mm: loss_and_grad(mm, batch, w, need_grad=False, latent_residual=res.latent_residual).loss)
    return max_relative_error(res.grad, central_difference(f, m.flat(), SIM_FD_STEP))


def _fd_calib(rng) -> tuple[float, float]:
    m, batch = _sim_case(rng)
    w = rng.normal(size=(m.K, m.d))
    _, g = grad_theta(w, m, batch)
    e_theta = max_relative_error(g, central_difference(_flat_fn(m, lambda mm: calib_objective(w, mm, batch)), m.flat(), SIM_FD_STEP))
    res = residuals(m, batch)
    num = central_difference(lambda v: calib_objective(v.reshape(w.shape), m, batch, res), w.ravel(), 1e-6)
    return e_theta, max_relative_error(grad_w(w, batch, res).ravel(), num)


def _policy_case(rng):
    d, K = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    p = build_policy(d, K, hidden=int(rng.integers(0, 5)), seed=int(rng.integers(0, 2**31)))
    return p, _random_group(rng, d, K)


def _fd_group_adv(rng) -> float:
    p, g = _policy_case(rng)
    num = central_difference(lambda th: group_adv_loss(g, PolicyModel(p.spec, th)), p.params, 1e-6)
    return max_relative_error(group_policy_gradient(p, g, relative=True), num)


def _fd_decision(rng) -> float:
    p, g = _policy_case(rng)
    R = rng.uniform(0, 2, size=(g.states.shape[0], p.K))
    r_star = R.max(axis=1)
    eta = float(rng.uniform(0.1, 3))
    analytic = decision_loss_terms(p, g, g.states, R, r_star, eta).grad

    def f(th):
        return decision_loss_terms(PolicyModel(p.spec, th), g, g.states, R, r_star, eta, need_grad=False).total

    return max_relative_error(analytic, central_difference(f, p.params, 1e-6))


def test_criterion_2_gradient_integrity():
    rng = np.random.default_rng(2024)
    worst = {
        "forward": max(_fd_forward(rng) for _ in range(N_CONFIGS)),
        "weighted_sample_loss": max(_fd_sample_loss(rng) for _ in range(N_CONFIGS)),
    }
    calib = [_fd_calib(rng) for _ in range(N_CONFIGS)]
    worst["calib_objective/theta"] = max(c[0] for c in calib)
    worst["calib_objective/w"] = max(c[1] for c in calib)
    worst["group_adv_loss"] = max(_fd_group_adv(rng) for _ in range(N_CONFIGS))
    worst["decision_loss"] = max(_fd_decision(rng) for _ in range(N_CONFIGS))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, all(v < FD_TOL for v in worst.values()), f"max rel err over {N_CONFIGS} configs each: {detail}")


# ---------------------------------------------------------------------------
# 3


def test_criterion_3_minimax_monotonicity(small_dataset, trained_sim):
    train = small_dataset.train
    worst_ascent, worst_descent = np.inf, -np.inf
    for seed in range(50):
        rng = np.random.default_rng(seed)
        batch = train.take(rng.integers(0, len(train), size=128))
        w = rng.normal(size=(trained_sim.K, trained_sim.d))
        J0 = calib_objective(w, trained_sim, batch)
        worst_ascent = min(worst_ascent, calib_objective(calibrator_ascent_step(w, trained_sim, batch, 1e-3), trained_sim, batch) - J0)
        worst_descent = max(worst_descent, calib_objective(w, simulator_descent_step(w, trained_sim, batch, 1e-4), batch) - J0)
    ok = worst_ascent >= -1e-9 and worst_descent <= 1e-9
    report(3, ok, f"50 batches; min ascent dJ {worst_ascent:.2e}, max descent dJ {worst_descent:.2e}")


# ---------------------------------------------------------------------------
# 4


@pytest.mark.slow
def test_criterion_4_calibration_efficacy():
    wins, drops, parts = 0, [], []
    for seed in range(5):
        cfg = resolve_config(flags={"seed": seed}, environ={"SIM2ACT__DATASET__SYNTHETIC__RARE_ACTION_LABEL_BIAS": "0.5"})
        assert cfg["dataset"]["synthetic"]["n_rows"] == 50000
        ds = pipeline.make_dataset(cfg)
        sim, _ = pipeline.pretrain_simulator(cfg, ds)
        cal = pipeline.calibrate(cfg, ds, sim).model
        S = ds.test.states
        truth = ds.ground_truth.reward_table(S)
        before, after = reward_mae_by_action(sim, S, truth).max(), reward_mae_by_action(cal, S, truth).max()
        wins += after < before
        drops.append(sim_accuracy(sim, ds.test).overall - sim_accuracy(cal, ds.test).overall)
        parts.append(f"{before:.4f}->{after:.4f}")
    mean_drop = float(np.mean(drops))
    report(4, wins >= 4 and mean_drop < 0.01, f"worst-action reward MAE wins {wins}/5 ({', '.join(parts)}); mean accuracy drop {mean_drop:+.4f}")


# ---------------------------------------------------------------------------
# 5


def test_criterion_5_group_identities():
    rng = np.random.default_rng(5)
    worst_sum = 0.0
    for _ in range(10_000):
        M = int(rng.integers(2, 17))
        r = rng.uniform(-3, 3, size=(1, M)) * 10 ** rng.uniform(-3, 3)
        g = PerturbationGroup(np.zeros((1, 1)), np.zeros((1, M, 1)), np.zeros((1, M, 1)), np.zeros((1, M), dtype=int), r)
        worst_sum = max(worst_sum, abs(g.advantages.sum()) / max(1.0, np.abs(r).sum()))

    equal_max = 0.0
    for _ in range(200):
        d, K = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        p = build_policy(d, K, hidden=int(rng.integers(0, 5)), seed=int(rng.integers(0, 2**31)))
        g = _random_group(rng, d, K)
        g.rewards[:] = g.rewards[:, :1]
        equal_max = max(equal_max, abs(group_adv_loss(g, p)))

    lin_err = 0.0
    for _ in range(200):
        d, K = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        p = build_policy(d, K, hidden=3, seed=int(rng.integers(0, 2**31)))
        g = _random_group(rng, d, K)
        R = rng.uniform(0, 2, size=(g.states.shape[0], K))
        etas = (0.5, 1.0, 2.5)
        t = [decision_loss_terms(p, g, g.states, R, R.max(axis=1), e, need_grad=False) for e in etas]
        slope01 = (t[1].total - t[0].total) / (etas[1] - etas[0])
        slope12 = (t[2].total - t[1].total) / (etas[2] - etas[1])
        lin_err = max(lin_err, abs(slope01 - slope12), max(abs(x.total - (e * x.adv + x.gap)) for x, e in zip(t, etas)))
    ok = worst_sum <= 1e-12 and equal_max == 0.0 and lin_err <= 1e-10
    report(5, ok, f"10000 groups max rel adv sum {worst_sum:.1e}; equal-reward loss {equal_max:.1e}; eta linearity err {lin_err:.1e}")


# ---------------------------------------------------------------------------
# 6


def test_criterion_6_variance_reduction(small_dataset, trained_sim):
    K, d = trained_sim.K, trained_sim.d
    cfg = DecisionTrainConfig(M=8, epochs=2, batch_size=128, patience=5, seed=0)
    policy, _ = train_policy(build_policy(d, K, hidden=16, seed=0), trained_sim, small_dataset, cfg)
    states = small_dataset.train.states
    rel, absolute = [], []
    for b in range(200):
        rng = np.random.default_rng(b)
        batch = states[rng.integers(0, len(states), size=32)]
        g = sample_groups(trained_sim, policy, batch, 8, 1.0, rng)
        rel.append(group_policy_gradient(policy, g, relative=True))
        absolute.append(group_policy_gradient(policy, g, relative=False))
    v_rel = float(np.var(np.array(rel), axis=0).mean())
    v_abs = float(np.var(np.array(absolute), axis=0).mean())
    report(6, v_rel <= v_abs, f"200 batches; mean component variance relative {v_rel:.3e} vs absolute {v_abs:.3e}")


# ---------------------------------------------------------------------------
# 7


@pytest.mark.slow
def test_criterion_7_non_collapse():
    env = {
        "SIM2ACT__DATASET__SYNTHETIC__KIND": "risky_two_action",
        "SIM2ACT__DATASET__SYNTHETIC__K": "2",
        "SIM2ACT__DATASET__SYNTHETIC__N_ROWS": "20000",
    }
    probs = []
    for seed in range(5):
        cfg = resolve_config(flags={"seed": seed, "variant": "both"}, environ=env)
        ds = pipeline.make_dataset(cfg)
        sim, _ = pipeline.pretrain_simulator(cfg, ds)
        cal = pipeline.calibrate(cfg, ds, sim).model
        policy, _ = pipeline.train_decision(cfg, ds, cal, "both")
        # action 0 carries the higher mean and the higher variance
        probs.append(float(policy_forward(policy, ds.test.states)[:, 0].mean()))
    hits = sum(p >= 0.5 for p in probs)
    report(7, hits >= 4, f"P(high-mean action) >= 0.5 on {hits}/5 seeds ({', '.join(f'{p:.3f}' for p in probs)})")


# ---------------------------------------------------------------------------
# 8


def _variant_stats(rows: list[dict], variant: str) -> tuple[float, float, float]:
    r = [x for x in rows if x["variant"] == variant]
    levels = sorted({float(x["level"]) for x in r})
    curve = [np.mean([float(x["overall"]) for x in r if float(x["level"]) == lv]) for lv in levels]
    cv = float(np.mean([float(x["cvar5"]) for x in r if float(x["level"]) == 0.5]))
    return degradation_slope(levels, curve), cv, float(curve[0])


@pytest.mark.slow
def test_criterion_8_robustness_ordering(tmp_path):
    slope_wins = cvar_wins = nominal_ok = 0
    parts = []
    for seed in range(5):
        cfg = resolve_config(flags={"seed": seed})
        assert list(cfg["robustness"]["levels"]) == [0.0, 0.1, 0.25, 0.5, 1.0]
        res = pipeline.ablate(cfg, tmp_path / str(seed))
        with open(res["csv"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        n, b = _variant_stats(rows, "none"), _variant_stats(rows, "both")
        slope_wins += abs(b[0]) <= abs(n[0])
        cvar_wins += b[1] >= n[1]
        nominal_ok += abs(b[2] - n[2]) <= 0.02 * abs(n[2])
        parts.append(f"s{seed} slope {b[0]:+.4f}/{n[0]:+.4f} cvar {b[1]:.3f}/{n[1]:.3f} nominal {b[2]:.4f}/{n[2]:.4f}")
    ok = slope_wins >= 4 and cvar_wins >= 4 and nominal_ok == 5
    report(
        8,
        ok,
        f"slope {slope_wins}/5, cvar@0.5 {cvar_wins}/5, nominal within 2% {nominal_ok}/5 (both/none: {'; '.join(parts)})",
    )


# ---------------------------------------------------------------------------
# 9


def test_criterion_9_score_and_cvar_contracts(small_dataset, trained_sim):
    s = small_dataset.test.states[:200]
    pol = build_policy(trained_sim.d, trained_sim.K, hidden=5, seed=0)
    R0 = max(abs(robustness_score(pol, trained_sim, s, PerturbSpec(kind, 0.0, 3, seed=1))) for kind in ("random_input", "latent_structured"))
    strict = robustness_gate(-0.05, -0.05) is False and robustness_gate(-0.05 + 1e-12, -0.05) is True
    const = abs(cvar([0.42] * 37, 0.05) - 0.42) <= 1e-12
    c100 = cvar(list(range(1, 101)), 0.05)
    ok = R0 <= 1e-9 and strict and const and c100 == 3.0 and c100 == cvar_ref(list(range(1, 101)), 0.05)
    report(9, ok, f"|R| at magnitude 0 {R0:.1e}; gate strict {strict}; constant CVaR {const}; CVaR(1..100, 0.05) = {c100}")


# ---------------------------------------------------------------------------
# 10


@pytest.mark.slow
def test_criterion_10_reproducibility(tmp_path):
    cfg = resolve_config(flags={"seed": 0})
    a = pipeline.ablate(cfg, tmp_path / "a")
    b = pipeline.ablate(cfg, tmp_path / "b")
    same = (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    variants = sorted(a["results"])
    for v in variants:
        same &= (tmp_path / "a" / v / "reports" / "summary.csv").read_bytes() == (tmp_path / "b" / v / "reports" / "summary.csv").read_bytes()
    assert sorted(b["results"]) == variants
    report(10, bool(same), f"two default-config ablate runs: ablation.csv and {len(variants)} summary.csv files byte-identical = {same}")
