from __future__ import annotations

import numpy as np
import pytest

from sim2act.data import (
    ColumnMapping,
    OfflineDataset,
    SyntheticEnvConfig,
    action_probabilities,
    generate_synthetic,
    ingest_csv,
    load_dataset,
    rare_actions,
    save_dataset,
    split,
    split_sizes,
)


def _cfg(**kw):
    base = dict(d=5, K=4, C=5, n_rows=2000, seed=3)
    base.update(kw)
    return SyntheticEnvConfig(**base)


def test_uniform_action_frequencies_without_skew():
    ds = generate_synthetic(SyntheticEnvConfig(n_rows=50_000, action_frequency_skew=1.0, seed=1))
    freq = np.bincount(ds.rows.actions, minlength=4) / len(ds)
    assert np.all(np.abs(freq - 0.25) <= 0.03 * 0.25)


def test_skewed_frequencies_are_log_linear():
    p = action_probabilities(4, 3.0)
    assert np.allclose(p[:-1] / p[1:], 3.0)
    ds = generate_synthetic(_cfg(n_rows=40_000))
    freq = np.bincount(ds.rows.actions, minlength=4) / len(ds)
    assert np.all(np.diff(freq) < 0)
    assert list(rare_actions(4)) == [3]
    assert list(rare_actions(5)) == [3, 4]


def test_rare_action_flip_rate():
    ds = generate_synthetic(SyntheticEnvConfig(n_rows=50_000, action_frequency_skew=1.0, rare_action_label_bias=0.5, seed=2))
    rare = np.isin(ds.rows.actions, rare_actions(4))
    flipped = ds.rows.risk[rare] != ds.clean["risk"][rare]
    assert abs(flipped.mean() - 0.5) <= 0.02
    assert np.all(ds.rows.risk[~rare] == ds.clean["risk"][~rare])


def test_generation_is_deterministic():
    a, b = generate_synthetic(_cfg(label_noise=0.2)), generate_synthetic(_cfg(label_noise=0.2))
    for f in ("states", "actions", "next_states", "risk", "time", "status", "profit", "reward"):
        assert np.array_equal(getattr(a.rows, f), getattr(b.rows, f))
    for k in a.splits:
        assert np.array_equal(a.splits[k], b.splits[k])


def test_noise_free_rows_match_ground_truth():
    ds = generate_synthetic(_cfg())
    gt = ds.ground_truth
    r = ds.rows
    assert np.array_equal(gt.reward(r.states, r.actions), r.reward)
    out = gt.outcomes(r.states, r.actions)
    assert np.array_equal(out["time"], r.time) and np.array_equal(out["risk"], r.risk)


def test_row_invariants():
    ds = generate_synthetic(_cfg(label_noise=0.3, rare_action_label_bias=0.4))
    r = ds.rows
    thr = ds.schema.on_time_threshold
    assert np.all(r.time[r.status == 1] <= thr)
    assert np.all((r.reward >= 0) & (r.reward <= 2))
    assert np.allclose(r.reward, r.profit + r.status)
    assert np.all((r.states >= 0) & (r.states <= 1)) and np.all((r.next_states >= 0) & (r.next_states <= 1))


def test_config_validation():
    with pytest.raises(ValueError):
        generate_synthetic(_cfg(n_rows=19))
    for bad in (dict(K=1), dict(K=17), dict(action_frequency_skew=0.5), dict(label_noise=1.5), dict(kind="other")):
        with pytest.raises(ValueError):
            _cfg(**bad).validate()


def test_risky_two_action_environment():
    ds = generate_synthetic(SyntheticEnvConfig(K=2, n_rows=20_000, kind="risky_two_action", seed=0))
    r = ds.rows
    hi, lo = r.actions == 0, r.actions == 1
    assert r.reward[hi].mean() > r.reward[lo].mean()
    assert r.reward[hi].std() > 0.3 and r.reward[lo].std() == 0
    assert np.all(r.time[r.status == 1] <= ds.schema.on_time_threshold)


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (101, (81, 10, 10)), (20, (16, 2, 2))])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes
    ds = generate_synthetic(_cfg(n_rows=n))
    got = tuple(len(ds.splits[k]) for k in ("train", "val", "test"))
    assert got == sizes
    allidx = np.concatenate(list(ds.splits.values()))
    assert len(np.unique(allidx)) == n


def test_split_determinism_and_seed_dependence():
    ds = generate_synthetic(_cfg(n_rows=200))
    a, b, c = split(ds, 5), split(ds, 5), split(ds, 6)
    assert all(np.array_equal(a.splits[k], b.splits[k]) for k in a.splits)
    assert not np.array_equal(a.splits["val"], c.splits["val"])
    tiny = OfflineDataset(ds.schema, ds.rows.take(np.arange(19)))
    with pytest.raises(ValueError):
        split(tiny, 0)


def test_dataset_round_trip(tmp_path):
    ds = generate_synthetic(_cfg(n_rows=300, label_noise=0.1))
    p = tmp_path / "ds.csv"
    save_dataset(ds, p)
    back = load_dataset(p)
    for f in ("states", "actions", "next_states", "risk", "time", "status", "profit", "reward"):
        assert np.array_equal(getattr(ds.rows, f), getattr(back.rows, f))
    assert all(np.array_equal(ds.splits[k], back.splits[k]) for k in ds.splits)
    assert np.array_equal(back.ground_truth.time_weights, ds.ground_truth.time_weights)
    save_dataset(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == p.read_bytes()


# ---------------------------------------------------------------------------
# CSV ingest

MAPPING = {
    "features": ["weight", "distance"],
    "action_column": "mode",
    "risk_column": "late_risk",
    "time_column": "days",
    "status_column": "on_time",
    "profit_column": "margin",
    "time_classes": 2,
}

ROWS = [
    # weight, distance, mode, late_risk, days, on_time, margin
    ("1", "100", "air", "0", "1", "1", "10"),
    ("2", "200", "sea", "1", "9", "0", "20"),
    ("3", "300", "air", "0", "2", "1", "30"),
    ("4", "400", "sea", "1", "8", "0", "40"),
    ("5", "500", "air", "0", "3", "1", "50"),
    ("6", "600", "sea", "1", "7", "0", "60"),
    ("7", "700", "air", "0", "4", "1", "70"),
    ("8", "800", "sea", "yes", "6", "no", "80"),
    ("9", "900", "air", "0", "5", "1", "90"),
    ("10", "1000", "sea", "1", "5", "0", "110"),
]


def _write_csv(path, rows, header=("weight", "distance", "mode", "late_risk", "days", "on_time", "margin")):
    path.write_text(",".join(header) + "\n" + "".join(",".join(r) + "\n" for r in rows))
    return path


def test_ingest_hand_computed(tmp_path):
    ds = ingest_csv(_write_csv(tmp_path / "o.csv", ROWS), ColumnMapping.from_dict(MAPPING))
    assert len(ds) == 10 and ds.dropped_rows == 0
    assert ds.schema.K == 2 and ds.schema.action_names == ("air", "sea")
    # min-max over all rows: weight (w - 1) / 9, distance (x - 100) / 900
    expect = (np.arange(1, 11) - 1) / 9
    assert np.allclose(ds.rows.states[:, 0], expect, atol=1e-15)
    assert np.allclose(ds.rows.states[:, 1], expect, atol=1e-15)
    assert list(ds.rows.actions) == [0, 1] * 5
    assert list(ds.rows.risk) == [0, 1] * 5
    # days 1..9 -> two equal-width classes split at 5
    assert list(ds.rows.time) == [0, 1, 0, 1, 0, 1, 0, 1, 1, 1]
    assert np.allclose(ds.rows.profit, (np.array([10, 20, 30, 40, 50, 60, 70, 80, 90, 110]) - 10) / 100)
    assert np.allclose(ds.rows.reward, ds.rows.profit + ds.rows.status)
    assert ds.splits == {}


def test_ingest_constant_column_is_zero(tmp_path):
    rows = [(r[0], "5", *r[2:]) for r in ROWS]
    ds = ingest_csv(_write_csv(tmp_path / "c.csv", rows), ColumnMapping.from_dict(MAPPING))
    assert np.array_equal(ds.rows.states[:, 1], np.zeros(10))


def test_ingest_drops_malformed_row(tmp_path):
    rows = list(ROWS)
    rows[3] = ("4", "400", "sea", "maybe", "8", "0", "40")
    rows[6] = ("7", "700", "air", "0", "soon", "1", "70")
    ds = ingest_csv(_write_csv(tmp_path / "m.csv", rows), ColumnMapping.from_dict(MAPPING))
    assert len(ds) == 8 and ds.dropped_rows == 2


def test_ingest_categorical_one_hot(tmp_path):
    header = ("weight", "region", "mode", "late_risk", "days", "on_time", "margin")
    rows = [(r[0], "north" if i % 3 else "south", *r[2:]) for i, r in enumerate(ROWS)]
    mapping = dict(MAPPING, features=["weight", "region"])
    ds = ingest_csv(_write_csv(tmp_path / "cat.csv", rows, header), ColumnMapping.from_dict(mapping))
    assert ds.schema.feature_names == ("weight", "region=north", "region=south")
    assert np.array_equal(ds.rows.states[:, 1:].sum(axis=1), np.ones(10))


def test_ingest_train_statistics_only(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(f"{rng.uniform(0, 10):.6f}", f"{rng.uniform(0, 5):.6f}", ("air", "sea")[i % 2], "0", "3", "1", "1") for i in range(60)]
    ds = ingest_csv(_write_csv(tmp_path / "big.csv", rows), ColumnMapping.from_dict(MAPPING), seed=4)
    raw = np.array([float(r[0]) for r in rows])
    tr = ds.splits["train"]
    lo, hi = raw[tr].min(), raw[tr].max()
    assert np.allclose(ds.rows.states[:, 0], np.clip((raw - lo) / (hi - lo), 0, 1))
    assert np.all((ds.rows.states >= 0) & (ds.rows.states <= 1))


def test_ingest_errors(tmp_path):
    with pytest.raises(ValueError, match="margin"):
        ingest_csv(_write_csv(tmp_path / "x.csv", [r[:-1] for r in ROWS], header=("weight", "distance", "mode", "late_risk", "days", "on_time")), ColumnMapping.from_dict(MAPPING))
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError, match="empty"):
        ingest_csv(tmp_path / "empty.csv", ColumnMapping.from_dict(MAPPING))
    with pytest.raises(ValueError):
        ColumnMapping.from_dict({**MAPPING, "typo": 1})
    with pytest.raises(ValueError):
        ColumnMapping.from_dict({k: v for k, v in MAPPING.items() if k != "action_column"})
