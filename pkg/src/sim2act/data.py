"""Offline order datasets: synthetic generation, CSV ingest, 8:1:1 splits.

Every dataset is a set of single-step transitions ``(s, a, s', outcomes,
reward)`` with ``reward = profit + on_time_status`` in ``[0, 2]``. States are
normalized to ``[0, 1]^d``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DATASET_FORMAT = "sim2act.dataset"
DATASET_VERSION = 1

ENV_KINDS = ("supply_chain", "risky_two_action")


@dataclass(frozen=True)
class Outcomes:
    delay_risk: int
    delivery_time: int
    on_time_status: int
    profit: float


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    outcomes: Outcomes
    reward: float


@dataclass(frozen=True)
class Schema:
    feature_names: tuple[str, ...]
    K: int
    C: int
    on_time_threshold: int
    action_names: tuple[str, ...] = ()

    @property
    def d(self) -> int:
        return len(self.feature_names)


@dataclass
class TransitionBatch:
    """Column-oriented block of transitions."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    risk: np.ndarray
    time: np.ndarray
    status: np.ndarray
    profit: np.ndarray
    reward: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, f)[idx] for f in _COLUMNS))

    def row(self, i: int) -> Transition:
        return Transition(
            state=self.states[i].copy(),
            action=int(self.actions[i]),
            next_state=self.next_states[i].copy(),
            outcomes=Outcomes(int(self.risk[i]), int(self.time[i]), int(self.status[i]), float(self.profit[i])),
            reward=float(self.reward[i]),
        )

    @classmethod
    def from_transitions(cls, rows: Sequence[Transition]) -> "TransitionBatch":
        return cls(
            states=np.array([t.state for t in rows], dtype=np.float64),
            actions=np.array([t.action for t in rows], dtype=np.int64),
            next_states=np.array([t.next_state for t in rows], dtype=np.float64),
            risk=np.array([t.outcomes.delay_risk for t in rows], dtype=np.int64),
            time=np.array([t.outcomes.delivery_time for t in rows], dtype=np.int64),
            status=np.array([t.outcomes.on_time_status for t in rows], dtype=np.int64),
            profit=np.array([t.outcomes.profit for t in rows], dtype=np.float64),
            reward=np.array([t.reward for t in rows], dtype=np.float64),
        )


_COLUMNS = ("states", "actions", "next_states", "risk", "time", "status", "profit", "reward")


# ---------------------------------------------------------------------------
# ground truth of the synthetic environment


@dataclass(frozen=True)
class GroundTruth:
    """Noise-free outcome model of a synthetic environment.

    Hidden from training; evaluation oracles query it for counterfactual
    outcomes of any ``(s, a)``.
    """

    kind: str
    C: int
    on_time_threshold: int
    time_weights: np.ndarray
    value_weights: np.ndarray
    congestion_weights: np.ndarray
    speed: np.ndarray
    cost: np.ndarray
    drift_targets: np.ndarray

    @property
    def K(self) -> int:
        return int(self.speed.shape[0])

    def delivery_time(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Continuous delivery time in ``[0, 1)``."""
        base = states @ self.time_weights
        cong = states @ self.congestion_weights
        t = 0.3 + 0.7 * base + 0.2 * (cong - 0.5) - self.speed[actions]
        return np.clip(t, 0.0, 1.0 - 1e-9)

    def outcomes(self, states: np.ndarray, actions: np.ndarray) -> dict[str, np.ndarray]:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (states.shape[0],))
        value = states @ self.value_weights
        if self.kind == "risky_two_action":
            # expected outcomes; per-row draws happen in the generator
            status_p = np.where(actions == 0, RISKY_ON_TIME_P, 1.0)
            profit = np.where(actions == 0, RISKY_PROFIT_MEAN, SAFE_PROFIT) + 0.0 * value
            time_cls = np.where(status_p >= 0.5, 0, self.on_time_threshold + 1)
            return {
                "time": time_cls.astype(np.int64),
                "status": status_p,
                "risk": (actions == 0).astype(np.int64),
                "profit": profit,
                "reward": profit + status_p,
            }
        t = self.delivery_time(states, actions)
        time_cls = np.minimum((t * self.C).astype(np.int64), self.C - 1)
        status = (time_cls <= self.on_time_threshold).astype(np.int64)
        cong = states @ self.congestion_weights
        risk = (0.5 * t + 0.5 * cong > 0.5).astype(np.int64)
        profit = np.clip(0.15 + 0.7 * value - self.cost[actions], 0.0, 1.0)
        return {"time": time_cls, "status": status, "risk": risk, "profit": profit, "reward": profit + status}

    def reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.outcomes(states, actions)["reward"]

    def reward_table(self, states: np.ndarray) -> np.ndarray:
        """``(n, K)`` rewards of every action at every state."""
        states = np.atleast_2d(states)
        return np.stack([self.reward(states, np.full(states.shape[0], a)) for a in range(self.K)], axis=1)

    def next_state(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.clip(0.8 * states + 0.2 * self.drift_targets[actions], 0.0, 1.0)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in d.items() if isinstance(v, list)}
        return cls(kind=d["kind"], C=int(d["C"]), on_time_threshold=int(d["on_time_threshold"]), **arrays)


# risky_two_action environment: action 0 is high-mean/high-variance, action 1 is safe
RISKY_ON_TIME_P = 0.85
RISKY_PROFIT_MEAN = 0.6
RISKY_PROFIT_SD = 0.25
SAFE_PROFIT = 0.2


# ---------------------------------------------------------------------------
# dataset


@dataclass
class OfflineDataset:
    schema: Schema
    rows: TransitionBatch
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    ground_truth: Optional[GroundTruth] = None
    # ground-truth labels before corruption (synthetic only)
    clean: Optional[dict[str, np.ndarray]] = None
    dropped_rows: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def split_rows(self, name: str) -> TransitionBatch:
        if name not in self.splits:
            raise KeyError(f"dataset has no {name!r} split")
        return self.rows.take(self.splits[name])

    @property
    def train(self) -> TransitionBatch:
        return self.split_rows("train")

    @property
    def val(self) -> TransitionBatch:
        return self.split_rows("val")

    @property
    def test(self) -> TransitionBatch:
        return self.split_rows("test")


@dataclass(frozen=True)
class SyntheticEnvConfig:
    d: int = 16
    K: int = 4
    C: int = 5
    n_rows: int = 50_000
    action_frequency_skew: float = 3.0
    rare_action_label_bias: float = 0.0
    label_noise: float = 0.0
    seed: int = 0
    kind: str = "supply_chain"

    def validate(self) -> None:
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 2 <= self.K <= 16:
            raise ValueError(f"K must be in [2, 16], got {self.K}")
        if self.kind == "risky_two_action" and self.K != 2:
            raise ValueError("risky_two_action needs K = 2")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.n_rows < 20:
            raise ValueError(f"n_rows = {self.n_rows} < 20 cannot be split 8:1:1")
        if self.action_frequency_skew < 1:
            raise ValueError("action_frequency_skew must be >= 1")
        for name in ("rare_action_label_bias", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def on_time_threshold(C: int) -> int:
    """Highest delivery-time class that still counts as on time."""
    return (C - 1) // 2


def rare_actions(K: int) -> np.ndarray:
    """The ceil(K/4) least frequent action ids (highest ids under the skew)."""
    n = math.ceil(K / 4)
    return np.arange(K - n, K)


def action_probabilities(K: int, skew: float) -> np.ndarray:
    """Log-linear frequencies: p_k proportional to skew**(-k)."""
    logp = -np.arange(K) * np.log(skew)
    p = np.exp(logp - logp.max())
    return p / p.sum()


def _env_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def make_ground_truth(config: SyntheticEnvConfig) -> GroundTruth:
    rng = _env_rng(config.seed, 0)
    d, K = config.d, config.K

    def simplex() -> np.ndarray:
        # sparse-ish convex weights: a few features carry most of the signal
        return rng.dirichlet(np.full(d, 0.3))

    ramp = np.arange(K) / max(K - 1, 1)
    return GroundTruth(
        kind=config.kind,
        C=config.C,
        on_time_threshold=on_time_threshold(config.C),
        time_weights=simplex(),
        value_weights=simplex(),
        congestion_weights=simplex(),
        speed=0.45 * ramp,
        cost=0.3 * ramp,
        drift_targets=rng.uniform(size=(K, d)),
    )


def generate_synthetic(config: SyntheticEnvConfig) -> OfflineDataset:
    """Sample a synthetic order dataset and split it 8:1:1.

    Actions are drawn independently of the state with log-skewed
    frequencies. With probability ``label_noise`` a row's delivery-time class
    moves one step (status and reward follow). The delay-risk label of rows
    taking one of the rarest ceil(K/4) actions is flipped with probability
    ``rare_action_label_bias``.
    """
    config.validate()
    gt = make_ground_truth(config)
    rng = _env_rng(config.seed, 1)
    n, d, K, C = config.n_rows, config.d, config.K, config.C
    thr = gt.on_time_threshold

    states = rng.uniform(size=(n, d))
    actions = rng.choice(K, size=n, p=action_probabilities(K, config.action_frequency_skew))
    clean = gt.outcomes(states, actions)

    if config.kind == "risky_two_action":
        u = rng.uniform(size=n)
        status = np.where(actions == 0, (u < RISKY_ON_TIME_P).astype(np.int64), 1)
        noise = rng.normal(0.0, RISKY_PROFIT_SD, size=n)
        profit = np.where(actions == 0, np.clip(RISKY_PROFIT_MEAN + noise, 0.0, 1.0), SAFE_PROFIT)
        late_cls = rng.integers(thr + 1, C, size=n)
        early_cls = rng.integers(0, thr + 1, size=n)
        time_cls = np.where(status == 1, early_cls, late_cls)
        risk = clean["risk"].copy()
    else:
        time_cls = clean["time"].copy()
        noisy = rng.uniform(size=n) < config.label_noise
        step = rng.choice(np.array([-1, 1]), size=n)
        time_cls = np.where(noisy, np.clip(time_cls + step, 0, C - 1), time_cls)
        status = (time_cls <= thr).astype(np.int64)
        profit = clean["profit"].copy()
        risk = clean["risk"].copy()

    is_rare = np.isin(actions, rare_actions(K))
    flip = is_rare & (rng.uniform(size=n) < config.rare_action_label_bias)
    risk = np.where(flip, 1 - risk, risk)

    rows = TransitionBatch(
        states=states,
        actions=actions.astype(np.int64),
        next_states=gt.next_state(states, actions),
        risk=risk.astype(np.int64),
        time=time_cls.astype(np.int64),
        status=status.astype(np.int64),
        profit=profit.astype(np.float64),
        reward=(profit + status).astype(np.float64),
    )
    schema = Schema(
        feature_names=tuple(f"x{i}" for i in range(d)),
        K=K,
        C=C,
        on_time_threshold=thr,
        action_names=tuple(f"mode{k}" for k in range(K)),
    )
    ds = OfflineDataset(
        schema=schema,
        rows=rows,
        ground_truth=gt,
        clean={k: np.asarray(v) for k, v in clean.items()},
        meta={"source": "synthetic", "generator": asdict(config)},
    )
    return split(ds, config.seed)


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 with val/test floored and the remainder going to train."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def split(dataset: OfflineDataset, seed: int) -> OfflineDataset:
    n = len(dataset)
    if n < 20:
        raise ValueError(f"{n} rows cannot be split 8:1:1 (need >= 20)")
    perm = _env_rng(seed, 2).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    return replace(dataset, splits=splits)


# ---------------------------------------------------------------------------
# CSV ingest


@dataclass(frozen=True)
class ColumnMapping:
    features: tuple[str, ...]
    action_column: str
    risk_column: str
    time_column: str
    status_column: str
    profit_column: str
    time_classes: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMapping":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown mapping keys: {sorted(unknown)}")
        missing = known - set(d) - {"time_classes"}
        if missing:
            raise ValueError(f"mapping is missing keys: {sorted(missing)}")
        return cls(**{**d, "features": tuple(d["features"])})

    @classmethod
    def load(cls, path: str | Path) -> "ColumnMapping":
        return cls.from_dict(json.loads(Path(path).read_text()))


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_bool(cell: str) -> int:
    c = cell.strip().lower()
    if c in _TRUE:
        return 1
    if c in _FALSE:
        return 0
    raise ValueError(f"not a binary value: {cell!r}")


def _parse_float(cell: str) -> float:
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value: {cell!r}")
    return v


def _is_numeric_column(values: list[str]) -> bool:
    for v in values:
        try:
            float(v)
        except ValueError:
            return False
    return True


def _minmax(col: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    lo = col[train_idx].min()
    hi = col[train_idx].max()
    if hi - lo <= 0:
        return np.zeros_like(col)
    return np.clip((col - lo) / (hi - lo), 0.0, 1.0)


def ingest_csv(path: str | Path, mapping: ColumnMapping, seed: int = 0) -> OfflineDataset:
    """Load order-level records from a CSV file with a header row.

    Numeric feature columns are min-max scaled with train-split statistics
    (out-of-range values clamped); non-numeric feature columns are one-hot
    encoded. Delivery time is binned into ``time_classes`` equal-width
    classes over the train-split range. Rows with an unparseable cell are
    dropped and counted. Rows carry no successor state, so ``next_state``
    equals ``state``. Files with fewer than 20 usable rows are returned
    unsplit, normalized with statistics over all rows.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        body = [r for r in reader if r]
    header = [h.strip() for h in header]
    needed = list(mapping.features) + [
        mapping.action_column,
        mapping.risk_column,
        mapping.time_column,
        mapping.status_column,
        mapping.profit_column,
    ]
    for col in needed:
        if col not in header:
            raise ValueError(f"{path}: missing mapped column {col!r}")
    if not body:
        raise ValueError(f"{path}: no data rows")
    pos = {h: i for i, h in enumerate(header)}

    # pass 1: decide per-feature column type on cells that are present
    raw = [[r[pos[c]].strip() if pos[c] < len(r) else "" for c in needed] for r in body]
    n_feat = len(mapping.features)
    numeric = []
    for j in range(n_feat):
        cells = [r[j] for r in raw if r[j] != ""]
        numeric.append(bool(cells) and _is_numeric_column(cells))

    # pass 2: parse; drop rows with any unparseable cell
    parsed = []
    dropped = 0
    for r in raw:
        try:
            if len(r) != len(needed) or any(c == "" for c in r):
                raise ValueError("missing cell")
            feats = [_parse_float(r[j]) if numeric[j] else r[j] for j in range(n_feat)]
            action = r[n_feat]
            risk = _parse_bool(r[n_feat + 1])
            t = _parse_float(r[n_feat + 2])
            status = _parse_bool(r[n_feat + 3])
            profit = _parse_float(r[n_feat + 4])
        except ValueError:
            dropped += 1
            continue
        parsed.append((feats, action, risk, t, status, profit))
    if not parsed:
        raise ValueError(f"{path}: no parseable rows ({dropped} dropped)")

    n = len(parsed)
    action_names = tuple(sorted({p[1] for p in parsed}))
    if not 2 <= len(action_names) <= 16:
        raise ValueError(f"{path}: {len(action_names)} distinct actions, need 2..16")
    action_ids = {a: i for i, a in enumerate(action_names)}

    C = int(mapping.time_classes)
    placeholder = OfflineDataset(
        schema=Schema((), len(action_names), C, on_time_threshold(C), action_names),
        rows=TransitionBatch(*(np.zeros(n) for _ in _COLUMNS)),
    )
    if n >= 20:
        splits = split(placeholder, seed).splits
        train = splits["train"]
    else:
        # too small to split 8:1:1: kept unsplit, statistics over every row
        splits = {}
        train = np.arange(n)

    columns = []
    names = []
    for j, fname in enumerate(mapping.features):
        if numeric[j]:
            col = np.array([p[0][j] for p in parsed], dtype=np.float64)
            columns.append(_minmax(col, train)[:, None])
            names.append(fname)
        else:
            cats = sorted({p[0][j] for p in parsed})
            col = np.array([cats.index(p[0][j]) for p in parsed])
            columns.append(np.eye(len(cats))[col])
            names.extend(f"{fname}={c}" for c in cats)
    states = np.hstack(columns)

    t_raw = np.array([p[3] for p in parsed], dtype=np.float64)
    t_norm = _minmax(t_raw, train)
    time_cls = np.minimum((t_norm * C).astype(np.int64), C - 1)
    profit = _minmax(np.array([p[5] for p in parsed], dtype=np.float64), train)
    status = np.array([p[4] for p in parsed], dtype=np.int64)

    rows = TransitionBatch(
        states=states,
        actions=np.array([action_ids[p[1]] for p in parsed], dtype=np.int64),
        next_states=states.copy(),
        risk=np.array([p[2] for p in parsed], dtype=np.int64),
        time=time_cls,
        status=status,
        profit=profit,
        reward=profit + status,
    )
    schema = Schema(tuple(names), len(action_names), C, on_time_threshold(C), action_names)
    return OfflineDataset(
        schema=schema,
        rows=rows,
        splits=splits,
        dropped_rows=dropped,
        meta={"source": "csv", "path": str(path), "mapping": asdict(mapping)},
    )


# ---------------------------------------------------------------------------
# dataset checkpoints


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """Write ``<path>`` (CSV, one row per transition) and ``<path>.meta.json``.

    CSV columns: ``split``, the d state features, ``action``, ``next_<f>``
    for each feature, ``risk``, ``time``, ``status``, ``profit``, ``reward``.
    The sidecar holds the schema, drop count, provenance and (synthetic
    only) the ground-truth parameters and uncorrupted labels.
    """
    path = Path(path)
    r = dataset.rows
    split_of = np.full(len(dataset), "", dtype=object)
    for name, idx in dataset.splits.items():
        split_of[idx] = name
    names = list(dataset.schema.feature_names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", *names, "action", *(f"next_{f}" for f in names), "risk", "time", "status", "profit", "reward"])
        for i in range(len(dataset)):
            w.writerow(
                [split_of[i]]
                + [repr(float(v)) for v in r.states[i]]
                + [int(r.actions[i])]
                + [repr(float(v)) for v in r.next_states[i]]
                + [int(r.risk[i]), int(r.time[i]), int(r.status[i]), repr(float(r.profit[i])), repr(float(r.reward[i]))]
            )
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "schema": {
            "feature_names": names,
            "K": dataset.schema.K,
            "C": dataset.schema.C,
            "on_time_threshold": dataset.schema.on_time_threshold,
            "action_names": list(dataset.schema.action_names),
        },
        "dropped_rows": dataset.dropped_rows,
        "meta": dataset.meta,
        "ground_truth": dataset.ground_truth.to_dict() if dataset.ground_truth else None,
        "clean": {k: np.asarray(v).tolist() for k, v in dataset.clean.items()} if dataset.clean else None,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n")


def load_dataset(path: str | Path) -> OfflineDataset:
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    if not path.exists():
        raise FileNotFoundError(path)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
        raise ValueError(f"{meta_path}: unsupported dataset format")
    sch = meta["schema"]
    schema = Schema(tuple(sch["feature_names"]), sch["K"], sch["C"], sch["on_time_threshold"], tuple(sch["action_names"]))
    d = schema.d
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        lines = list(reader)
    split_col = np.array([ln[0] for ln in lines])
    num = np.array([ln[1:] for ln in lines], dtype=np.float64).reshape(len(lines), -1)
    rows = TransitionBatch(
        states=num[:, :d].copy(),
        actions=num[:, d].astype(np.int64),
        next_states=num[:, d + 1 : 2 * d + 1].copy(),
        risk=num[:, 2 * d + 1].astype(np.int64),
        time=num[:, 2 * d + 2].astype(np.int64),
        status=num[:, 2 * d + 3].astype(np.int64),
        profit=num[:, 2 * d + 4].copy(),
        reward=num[:, 2 * d + 5].copy(),
    )
    splits = {name: np.flatnonzero(split_col == name) for name in ("train", "val", "test") if np.any(split_col == name)}
    gt = GroundTruth.from_dict(meta["ground_truth"]) if meta.get("ground_truth") else None
    clean = {k: np.asarray(v) for k, v in meta["clean"].items()} if meta.get("clean") else None
    return OfflineDataset(schema, rows, splits, gt, clean, meta["dropped_rows"], meta["meta"])
