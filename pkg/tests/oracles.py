"""Reference implementations written independently of the package.

Plain Python loops and ``math`` where practical, so a shared bug between
the package and its tests is unlikely.
"""

from __future__ import annotations

import math
from typing import Sequence


def softmax_ref(logits: Sequence[float]) -> list[float]:
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def sigmoid_ref(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def mlp_ref(widths, activations, output_activation, flat, x) -> list[float]:
    """Layer-by-layer forward pass over a flat (W row-major, then b) layout."""
    h = list(map(float, x))
    off = 0
    n_layers = len(widths) - 1
    for i in range(n_layers):
        fi, fo = widths[i], widths[i + 1]
        W = [[flat[off + r * fo + c] for c in range(fo)] for r in range(fi)]
        off += fi * fo
        b = [flat[off + c] for c in range(fo)]
        off += fo
        pre = [sum(h[r] * W[r][c] for r in range(fi)) + b[c] for c in range(fo)]
        if i < n_layers - 1:
            act = activations[i]
            if act == "tanh":
                h = [math.tanh(v) for v in pre]
            elif act == "relu":
                h = [max(v, 0.0) for v in pre]
            else:
                h = pre
        elif output_activation == "sigmoid":
            h = [sigmoid_ref(v) for v in pre]
        elif output_activation == "softmax":
            h = softmax_ref(pre)
        else:
            h = pre
    return h


def cvar_ref(returns: Sequence[float], alpha: float) -> float:
    r = sorted(returns)
    k = max(1, math.ceil(alpha * len(r) - 1e-9))
    return sum(r[:k]) / k


def slope_ref(xs: Sequence[float], ys: Sequence[float]) -> float:
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sum((x - mx) ** 2 for x in xs)


def group_adv_loss_ref(rewards: Sequence[float], probs_taken: Sequence[float]) -> float:
    M = len(rewards)
    rbar = sum(rewards) / M
    return -sum((r - rbar) * max(math.log(p), -30.0) for r, p in zip(rewards, probs_taken)) / M


def calib_objective_ref(states, actions, norms, w) -> float:
    """mean_i softmax(<s_i, w_k>)_k=a_i * norm_i."""
    total = 0.0
    for s, a, nrm in zip(states, actions, norms):
        logits = [sum(si * wi for si, wi in zip(s, wk)) for wk in w]
        total += softmax_ref(logits)[a] * nrm
    return total / len(states)


def pop_std_ref(values: Sequence[float]) -> float:
    m = sum(values) / len(values)
    return math.sqrt(sum((v - m) ** 2 for v in values) / len(values))
