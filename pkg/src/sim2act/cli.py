"""Command-line entry point: ``sim2act <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .calibrator import save_calibrator
from .calibrator import write_trace as write_jsonl
from .config import VARIANTS, ConfigError, resolve_config, robustness_settings, stage_seed
from .data import load_dataset, save_dataset
from .policy import load_policy, save_policy
from .robustness import PERTURB_KINDS, robustness_gate, sweep
from .simulator import load_simulator, save_simulator

log = logging.getLogger("sim2act")


class MissingInputError(FileNotFoundError):
    pass


def _need(path: Optional[str], what: str) -> Path:
    if path is None:
        raise MissingInputError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing input {what}: {p}")
    return p


def _config(args) -> dict:
    flags = {"seed": args.seed, "variant": getattr(args, "variant", None)}
    if getattr(args, "out_dir", False):
        flags["out"] = args.out
    return resolve_config(args.config, flags)


def _out_file(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_config(args) -> int:
    print(json.dumps(_config(args), indent=2, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = pipeline.make_dataset(cfg)
    out = _out_file(args.out)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} rows ({ds.dropped_rows} dropped) to {out}")
    return 0


def cmd_train_sim(args) -> int:
    cfg = _config(args)
    ds = load_dataset(_need(args.data, "--data"))
    model, curve = pipeline.pretrain_simulator(cfg, ds)
    out = _out_file(args.out)
    save_simulator(model, out)
    if args.trace:
        write_jsonl(curve, _out_file(args.trace))
    print(f"simulator trained for {len(curve) - 1} epochs, best val loss {min(r['val_loss'] for r in curve):.5f}; wrote {out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    ds = load_dataset(_need(args.data, "--data"))
    model = load_simulator(_need(args.sim, "--sim"))
    res = pipeline.calibrate(cfg, ds, model)
    out = _out_file(args.out)
    save_simulator(res.model, out, {"calibrated": True})
    w_path = _out_file(args.calibrator_out or str(out.with_name(out.stem + "_calibrator.json")))
    save_calibrator(res.w, w_path)
    if args.trace:
        write_jsonl(res.trace, _out_file(args.trace))
    print(f"calibration ran {len(res.trace)} rounds; wrote {out} and {w_path}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _config(args)
    ds = load_dataset(_need(args.data, "--data"))
    model = load_simulator(_need(args.sim, "--sim"))
    policy, trace = pipeline.train_decision(cfg, ds, model, cfg["variant"])
    out = _out_file(args.out)
    save_policy(policy, out, {"variant": cfg["variant"]})
    if args.trace:
        write_jsonl(trace, _out_file(args.trace))
    best = max(r["val_expected_reward"] for r in trace)
    print(f"policy ({cfg['variant']}) best val expected reward {best:.4f}; wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = load_dataset(_need(args.data, "--data"))
    model = load_simulator(_need(args.sim, "--sim"))
    policy = load_policy(_need(args.policy, "--policy"))
    rid = pipeline.run_id(cfg, cfg["variant"])
    reports = pipeline.evaluate(cfg, ds, model, policy, cfg["variant"], rid)
    paths = pipeline.write_reports(reports, Path(args.out))
    for row in reports["decision"]:
        print(
            f"{row['oracle']:>12}: timely {row['timely']:.4f} profit {row['profit']:.4f} "
            f"diff {row['diff']:.4f} overall {row['overall']:.4f}"
        )
    print(f"reports in {Path(paths['summary']).parent}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ds = load_dataset(_need(args.data, "--data"))
    model = load_simulator(_need(args.sim, "--sim"))
    policy = load_policy(_need(args.policy, "--policy"))
    rob = robustness_settings(cfg)
    oracle = pipeline.primary_oracle(ds, model)
    res = sweep(policy, model, args.kind, rob.levels, rob.runs, stage_seed(cfg["seed"], "evaluate"), ds.test.states, oracle, rob.alpha)
    rid = pipeline.run_id(cfg, cfg["variant"])
    rows = [
        {
            "run_id": rid,
            "variant": cfg["variant"],
            "kind": c.kind,
            "level": c.level,
            "run": c.run,
            "oracle": oracle.name,
            **c.metrics._asdict(),
            "cvar5": c.cvar5,
            "R": c.R,
            "gate": robustness_gate(c.R, rob.delta),
        }
        for c in res.cells
    ]
    write_jsonl(rows, _out_file(args.out))
    curve = ", ".join(f"{lv:g}: {v:.4f}" for lv, v in zip(res.levels, res.curve))
    print(f"{args.kind} curve {{{curve}}} slope {res.slope:.5f}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    res = pipeline.run_pipeline(cfg)
    man = res["manifest"]
    print(f"run {man['id']} ({man['variant']}) ok; manifest {Path(cfg['out']) / man['variant'] / 'manifest.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    res = pipeline.ablate(cfg)
    for variant, r in res["results"].items():
        nominal = next(row for row in r["reports"]["decision"])
        print(f"{variant:>9}: overall {nominal['overall']:.4f} ({nominal['oracle']})")
    print(f"wrote {res['csv']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim2act", description="Calibrated simulator and robust policy experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, out_help=None, out_dir=False, variant=False, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        if variant:
            p.add_argument("--variant", choices=VARIANTS)
        if out_help:
            p.add_argument("--out", required=out_required, help=out_help)
        p.set_defaults(func=func, out_dir=out_dir)
        return p

    add("config", cmd_config, "print the resolved configuration")
    add("gen-data", cmd_gen_data, "generate or ingest a dataset", "dataset CSV path")
    p = add("train-sim", cmd_train_sim, "pretrain the simulator", "simulator checkpoint path")
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--trace")
    p = add("calibrate", cmd_calibrate, "adversarially calibrate a simulator", "calibrated simulator checkpoint path")
    p.add_argument("--data")
    p.add_argument("--sim", help="pretrained simulator checkpoint")
    p.add_argument("--calibrator-out")
    p.add_argument("--trace")
    p = add("train-policy", cmd_train_policy, "train a policy on a simulator", "policy checkpoint path", variant=True)
    p.add_argument("--data")
    p.add_argument("--sim")
    p.add_argument("--trace")
    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "decision metrics, sweeps and simulator robustness"),
        ("sweep", cmd_sweep, "one perturbation sweep"),
    ):
        p = add(name, func, help_, "report directory" if name == "evaluate" else "JSON-lines report path", variant=True)
        p.add_argument("--data")
        p.add_argument("--sim")
        p.add_argument("--policy")
        if name == "sweep":
            p.add_argument("--kind", choices=PERTURB_KINDS, default="random_input")
    add("run", cmd_run, "full pipeline for one variant", "output directory", out_dir=True, variant=True, out_required=False)
    add("ablate", cmd_ablate, "all four variants on a shared dataset", "output directory", out_dir=True, out_required=False)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pipeline.PipelineError as exc:
        where = f" (manifest: {exc.manifest_path})" if exc.manifest_path else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
