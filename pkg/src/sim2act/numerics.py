"""Small feed-forward networks with hand-written backprop.

Parameters of a network live in one flat float64 vector. The layout is
layer by layer, each layer stored as its weight matrix (row-major,
shape ``(fan_in, fan_out)``) followed by its bias vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

HIDDEN_ACTIVATIONS = ("identity", "tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")

CHECKPOINT_FORMAT = "sim2act.params"
CHECKPOINT_VERSION = 1

SOFTPLUS_FLOOR = 1e-8

# 1-D float64 array holding every parameter of one network.
ParamTensor = np.ndarray
SeedLike = Union[int, np.random.Generator, None]


class ShapeError(ValueError):
    """Input or parameter dimensions do not match a model spec."""


class NumericOverflowError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    output_activation: str = "identity"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("a model needs at least one layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        n_hidden = len(widths) - 2
        acts = tuple(self.activations)
        if not acts and n_hidden:
            acts = ("tanh",) * n_hidden
        if len(acts) != n_hidden:
            raise ValueError(f"expected {n_hidden} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unknown hidden activation {a!r}")
        object.__setattr__(self, "activations", acts)
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activations": list(self.activations),
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]), d["output_activation"])


def unpack(spec: ModelSpec, params: ParamTensor) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into the flat parameter vector."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    off = 0
    for fan_in, fan_out in spec.layer_shapes():
        W = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_params(spec: ModelSpec, seed: SeedLike) -> ParamTensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = as_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks).astype(np.float64)


# ---------------------------------------------------------------------------
# elementwise helpers


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -softplus(-np.asarray(x, dtype=np.float64))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _hidden_act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _hidden_act_grad(name: str, pre: np.ndarray, post: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - post * post)
    if name == "relu":
        return g * (pre > 0)
    return g


def _output_act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return sigmoid(x)
    if name == "softmax":
        return softmax(x, axis=-1)
    return x


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer
    output: np.ndarray | None = None
    squeeze: bool = False


def _check_input(spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"expected input width {spec.n_in}, got shape {x.shape}")
    return x, squeeze


def forward_cached(spec: ModelSpec, params: ParamTensor, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x, squeeze = _check_input(spec, x)
    layers = unpack(spec, params)
    cache = ForwardCache(squeeze=squeeze)
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        pre = h @ W + b
        cache.pre.append(pre)
        h = _output_act(spec.output_activation, pre) if i == last else _hidden_act(spec.activations[i], pre)
    cache.output = h
    return (h[0] if squeeze else h), cache


def forward(spec: ModelSpec, params: ParamTensor, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    return forward_cached(spec, params, x)[0]


def backward(
    spec: ModelSpec,
    params: ParamTensor,
    cache: ForwardCache,
    grad_out: np.ndarray,
    *,
    wrt_logits: bool = False,
) -> tuple[ParamTensor, np.ndarray]:
    """Backpropagate ``grad_out`` through a cached forward pass.

    ``grad_out`` is the gradient with respect to the network output, or with
    respect to the last pre-activation when ``wrt_logits`` is set. Returns the
    flat parameter gradient and the gradient with respect to the input batch.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    y = cache.output
    if not wrt_logits:
        if spec.output_activation == "sigmoid":
            g = g * y * (1.0 - y)
        elif spec.output_activation == "softmax":
            g = y * (g - np.sum(g * y, axis=1, keepdims=True))
    layers = unpack(spec, params)
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = cache.inputs[i]
        grads[2 * i] = (h_in.T @ g).ravel()
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ W.T
        if i > 0:
            g = _hidden_act_grad(spec.activations[i - 1], cache.pre[i - 1], h_in, g)
    flat = np.concatenate(grads)
    if not np.all(np.isfinite(flat)):
        raise NumericOverflowError("non-finite value in backward pass")
    return flat, (g[0] if cache.squeeze else g)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def gradient(spec: ModelSpec, params: ParamTensor, loss: LossFn, x: np.ndarray) -> ParamTensor:
    """d loss(forward(x)) / d params.

    ``loss`` maps the network output to ``(value, d value / d output)``.
    """
    out, cache = forward_cached(spec, params, x)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError("non-finite network output")
    value, g = loss(out)
    if not np.isfinite(value):
        raise NumericOverflowError("non-finite loss value")
    return backward(spec, params, cache, g)[0]


# ---------------------------------------------------------------------------
# sampling and gradient checking


def sample_gaussian(mean: np.ndarray, diag_cov: np.ndarray, n: int, seed: SeedLike) -> np.ndarray:
    """``n`` draws from N(mean, diag(diag_cov)); shape ``(n, len(mean))``."""
    mean = np.asarray(mean, dtype=np.float64)
    diag_cov = np.asarray(diag_cov, dtype=np.float64)
    if mean.shape != diag_cov.shape:
        raise ShapeError(f"mean {mean.shape} and covariance {diag_cov.shape} differ")
    if np.any(diag_cov < 0):
        raise ValueError("covariance entries must be non-negative")
    eps = as_rng(seed).standard_normal((int(n),) + mean.shape)
    return mean + np.sqrt(diag_cov) * eps


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over components.

    The floor keeps components that are zero up to rounding from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, nets: dict[str, tuple[ModelSpec, ParamTensor]], meta: dict | None = None) -> None:
    """Write networks as a versioned JSON document.

    Layout: ``{"format", "version", "meta", "nets": {name: {layer_widths,
    activations, output_activation, values}}}``. Floats are written with
    ``repr`` precision so a round trip is exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {
            name: {**spec.to_dict(), "values": [float(v) for v in params]}
            for name, (spec, params) in nets.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, tuple[ModelSpec, ParamTensor]], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nets = {}
    for name, entry in doc["nets"].items():
        spec = ModelSpec.from_dict(entry)
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.shape[0] != spec.n_params:
            raise ShapeError(f"{path}: net {name!r} has {values.shape[0]} values, spec needs {spec.n_params}")
        nets[name] = (spec, values)
    return nets, doc.get("meta", {})
