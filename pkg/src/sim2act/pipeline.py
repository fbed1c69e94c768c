"""End-to-end experiment runs: stages, reports, manifests and the ablation grid.

Layout of an output directory::

    dataset.csv (+ .meta.json)      shared by every variant
    <variant>/manifest.json
    <variant>/simulator.json        pretrained simulator
    <variant>/simulator_calibrated.json, calibrator.json   (sim_cal, both)
    <variant>/policy.json
    <variant>/traces/*.jsonl
    <variant>/reports/*.jsonl, summary.csv
    ablation.csv, ablation_manifest.json                   (ablate only)
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import __version__
from .calibrator import CalibrationResult, run_calibration, save_calibrator
from .calibrator import write_trace as write_jsonl
from .config import (
    calibration_config,
    column_mapping,
    config_hash,
    decision_config,
    robustness_settings,
    sim_train_config,
    stage_seed,
    stage_seeds,
    synthetic_config,
)
from .data import OfflineDataset, generate_synthetic, ingest_csv, load_dataset, save_dataset
from .numerics import CHECKPOINT_FORMAT, CHECKPOINT_VERSION
from .policy import PolicyModel, build_policy, save_policy, train_policy
from .robustness import (
    GroundTruthOracle,
    SimulatorOracle,
    decision_metrics,
    robustness_gate,
    sim_robustness,
    sweep,
)
from .simulator import SimulatorModel, build_simulator, save_simulator, train_simulator

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("run_id", "variant", "kind", "level", "run", "timely", "profit", "diff", "overall", "cvar5", "R", "gate")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, manifest_path: Optional[Path] = None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest_path = manifest_path


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def run_id(cfg: dict, variant: str) -> str:
    return hashlib.sha256(f"{config_hash(cfg)}:{variant}".encode()).hexdigest()[:12]


def versions() -> dict:
    return {
        "sim2act": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "checkpoint": f"{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}",
    }


def _num(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# stages


def make_dataset(cfg: dict) -> OfflineDataset:
    if cfg["dataset"]["source"] == "csv":
        return ingest_csv(cfg["dataset"]["csv"]["path"], column_mapping(cfg), seed=stage_seed(cfg["seed"], "data"))
    return generate_synthetic(synthetic_config(cfg))


def pretrain_simulator(cfg: dict, dataset: OfflineDataset) -> tuple[SimulatorModel, list]:
    s = dataset.schema
    sim = cfg["simulator"]
    model = build_simulator(s.d, s.K, s.C, sim["latent_dim"], sim["hidden"], seed=stage_seed(cfg["seed"], "sim_init"))
    return train_simulator(model, dataset, sim_train_config(cfg))


def calibrate(cfg: dict, dataset: OfflineDataset, model: SimulatorModel) -> CalibrationResult:
    return run_calibration(model, dataset, calibration_config(cfg))


def train_decision(cfg: dict, dataset: OfflineDataset, model: SimulatorModel, variant: str) -> tuple[PolicyModel, list]:
    s = dataset.schema
    policy = build_policy(s.d, s.K, cfg["decision"]["hidden"], seed=stage_seed(cfg["seed"], "policy_init"))
    return train_policy(policy, model, dataset, decision_config(cfg, variant))


def primary_oracle(dataset: OfflineDataset, model: SimulatorModel):
    """Ground truth on synthetic data, the simulator on ingested CSV data."""
    if dataset.ground_truth is not None:
        return GroundTruthOracle(dataset.ground_truth)
    return SimulatorOracle(model)


def evaluate(
    cfg: dict, dataset: OfflineDataset, model: SimulatorModel, policy: PolicyModel, variant: str, rid: str
) -> dict[str, list[dict]]:
    """All evaluation reports for one trained variant, as lists of rows."""
    rob = robustness_settings(cfg)
    seed = stage_seed(cfg["seed"], "evaluate")
    test = dataset.test
    oracle = primary_oracle(dataset, model)
    oracles = [oracle] + ([SimulatorOracle(model)] if oracle.name != "simulator" else [])

    decision = []
    for orc in oracles:
        m = decision_metrics(policy, test.states, orc)
        decision.append({"run_id": rid, "variant": variant, "oracle": orc.name, **m._asdict()})

    sweep_rows, curves = [], []
    for kind in ("latent_structured", "random_input"):
        res = sweep(policy, model, kind, rob.levels, rob.runs, seed, test.states, oracle, rob.alpha)
        for c in res.cells:
            sweep_rows.append(
                {
                    "run_id": rid,
                    "variant": variant,
                    "kind": kind,
                    "level": c.level,
                    "run": c.run,
                    "oracle": oracle.name,
                    **c.metrics._asdict(),
                    "cvar5": c.cvar5,
                    "R": c.R,
                    "gate": robustness_gate(c.R, rob.delta),
                }
            )
        curves.append({"run_id": rid, "variant": variant, "kind": kind, "levels": list(res.levels), "curve": list(res.curve), "slope": res.slope})

    sim_rows = [
        {"run_id": rid, "variant": variant, **r._asdict()} for r in sim_robustness(model, test, rob.levels, rob.runs, seed)
    ]
    return {"decision": decision, "sweep": sweep_rows, "curves": curves, "sim_robustness": sim_rows}


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow(
            [r["run_id"], r["variant"], r["kind"], _num(r["level"]), r["run"]]
            + [_num(r[k]) for k in ("timely", "profit", "diff", "overall", "cvar5", "R")]
            + [str(bool(r["gate"])).lower()]
        )
    return buf.getvalue()


def write_reports(reports: dict[str, list[dict]], directory: Path) -> dict[str, str]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, rows in reports.items():
        p = directory / f"{name}.jsonl"
        write_jsonl(rows, p)
        paths[name] = str(p)
    p = directory / "summary.csv"
    p.write_text(summary_csv(reports["sweep"]))
    paths["summary"] = str(p)
    return paths


# ---------------------------------------------------------------------------
# manifests and orchestration


class Manifest:
    """Mutable run record, written to disk after every stage."""

    def __init__(self, path: Path, cfg: dict, variant: str, dataset_hash: Optional[str] = None):
        self.path = path
        self.doc = {
            "id": run_id(cfg, variant),
            "variant": variant,
            "config_hash": config_hash(cfg),
            "dataset_hash": dataset_hash,
            "versions": versions(),
            "seeds": {"global": cfg["seed"], **stage_seeds(cfg["seed"])},
            "checkpoints": {},
            "reports": {},
            "wall_clock_s": {},
            "status": "running",
            "error": None,
            "config": cfg,
        }

    @property
    def id(self) -> str:
        return self.doc["id"]

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            self.doc["wall_clock_s"][name] = time.perf_counter() - t0
            self.doc["status"] = "failed"
            self.doc["error"] = {"stage": name, "type": type(exc).__name__, "message": str(exc)}
            self.write()
            raise PipelineError(name, exc, self.path) from exc
        self.doc["wall_clock_s"][name] = time.perf_counter() - t0
        self.write()


def prepare_dataset(cfg: dict, out: Path) -> tuple[OfflineDataset, Path]:
    """Build and save the dataset, then reload it so every consumer sees the on-disk rows."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    save_dataset(make_dataset(cfg), path)
    return load_dataset(path), path


def run_variant(
    cfg: dict,
    variant: str,
    dataset: OfflineDataset,
    dataset_path: Path,
    out: Path,
    cache: Optional[dict] = None,
) -> dict:
    """Pretrain (or reuse), optionally calibrate, train the policy, evaluate.

    ``cache`` carries pretrained/calibrated simulators between variants of
    one ablation; results are identical to uncached runs because every stage
    is seeded from the global seed only.
    """
    cache = {} if cache is None else cache
    vdir = out / variant
    man = Manifest(vdir / "manifest.json", cfg, variant, file_sha256(dataset_path))
    man.doc["checkpoints"]["dataset"] = str(dataset_path)
    man.write()
    rid = man.id

    with man.stage("pretrain"):
        if "pretrained" not in cache:
            cache["pretrained"] = pretrain_simulator(cfg, dataset)
        model, curve = cache["pretrained"]
        p = vdir / "simulator.json"
        save_simulator(model, p, {"run_id": rid})
        write_jsonl(curve, _trace_path(vdir, "simulator"))
        man.doc["checkpoints"]["simulator"] = str(p)

    if variant in ("sim_cal", "both"):
        with man.stage("calibrate"):
            if "calibrated" not in cache:
                cache["calibrated"] = calibrate(cfg, dataset, model)
            res = cache["calibrated"]
            model = res.model
            p = vdir / "simulator_calibrated.json"
            save_simulator(model, p, {"run_id": rid, "calibrated": True})
            save_calibrator(res.w, vdir / "calibrator.json")
            write_jsonl(res.trace, _trace_path(vdir, "calibration"))
            man.doc["checkpoints"]["simulator_calibrated"] = str(p)
            man.doc["checkpoints"]["calibrator"] = str(vdir / "calibrator.json")

    with man.stage("train_policy"):
        policy, trace = train_decision(cfg, dataset, model, variant)
        p = vdir / "policy.json"
        save_policy(policy, p, {"run_id": rid, "variant": variant})
        write_jsonl(trace, _trace_path(vdir, "policy"))
        man.doc["checkpoints"]["policy"] = str(p)

    with man.stage("evaluate"):
        reports = evaluate(cfg, dataset, model, policy, variant, rid)
        man.doc["reports"] = write_reports(reports, vdir / "reports")

    man.doc["status"] = "ok"
    man.write()
    return {"manifest": man.doc, "reports": reports}


def _trace_path(vdir: Path, name: str) -> Path:
    (vdir / "traces").mkdir(parents=True, exist_ok=True)
    return vdir / "traces" / f"{name}.jsonl"


def run_pipeline(cfg: dict, out: Optional[str | Path] = None) -> dict:
    """One variant end to end; returns ``{"manifest", "reports"}``."""
    out = Path(out or cfg["out"])
    dataset, path = _dataset_stage(cfg, out)
    return run_variant(cfg, cfg["variant"], dataset, path, out)


def _dataset_stage(cfg: dict, out: Path) -> tuple[OfflineDataset, Path]:
    try:
        return prepare_dataset(cfg, out)
    except Exception as exc:
        man = Manifest(out / "dataset_manifest.json", cfg, "dataset")
        man.doc["status"] = "failed"
        man.doc["error"] = {"stage": "data", "type": type(exc).__name__, "message": str(exc)}
        man.write()
        raise PipelineError("data", exc, man.path) from exc


def ablate(cfg: dict, out: Optional[str | Path] = None) -> dict:
    """All four variants on one dataset and one seed; writes ``ablation.csv``.

    The combined CSV holds the ``robustness.ablate_kind`` sweep rows, i.e.
    4 variants x levels x runs rows.
    """
    from .config import VARIANTS

    out = Path(out or cfg["out"])
    dataset, path = _dataset_stage(cfg, out)
    kind = robustness_settings(cfg).ablate_kind
    cache: dict = {}
    results, rows = {}, []
    for variant in VARIANTS:
        res = run_variant(cfg, variant, dataset, path, out, cache)
        results[variant] = res
        rows.extend(r for r in res["reports"]["sweep"] if r["kind"] == kind)
    (out / "ablation.csv").write_text(summary_csv(rows))
    index = {
        "config_hash": config_hash(cfg),
        "kind": kind,
        "dataset_hash": file_sha256(path),
        "variants": {v: str(out / v / "manifest.json") for v in VARIANTS},
        "run_ids": {v: results[v]["manifest"]["id"] for v in VARIANTS},
    }
    (out / "ablation_manifest.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return {"results": results, "csv": str(out / "ablation.csv")}
