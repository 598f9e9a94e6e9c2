"""Command-line front end: ``sphbench generate|validate|evaluate|inspect``.

Settings come from built-in defaults, then an optional YAML file
(``--config``), then explicit flags, then ``--set dotted.key=value``
overrides. The effective configuration is written next to the outputs as
``config.yaml`` and can be fed back through ``--config``.

Exit codes: 0 success, 1 validation failure, 2 bad input, 3 solver
instability. ``SPHBENCH_OUTPUT_ROOT`` sets the default output root.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shlex
import sys
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .cases import CATALOG, CASE_IDS, generate_trajectory, get_case
from .core import ContractError, Domain
from .dataio import (
    DatasetError,
    SPLIT_NAMES,
    build_metadata,
    make_splits,
    read_dataset,
    read_metadata,
    read_split,
    write_dataset,
)
from .metrics import aggregate_reports
from .rollout import (
    DEFAULT_HISTORY,
    FileExchangePredictor,
    GroundTruthPredictor,
    HistoryWindow,
    PredictorError,
    SolverPredictor,
    ZeroAccelerationPredictor,
    rollout,
)
from .sph import SolverInstabilityError
from .validation import run_suite

log = logging.getLogger("sphbench")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BAD_INPUT = 2
EXIT_INSTABILITY = 3

OUTPUT_ROOT_ENV = "SPHBENCH_OUTPUT_ROOT"

DEFAULTS = {
    "generate": {
        "case": None,
        "seed": 0,
        "trajectories": None,
        "frames": None,
        "layout": None,
        "relax_steps": 1000,
        "warmup": None,
        "warmup_max_frames": 5000,
        "out": None,
    },
    "validate": {"suite": "all", "out": None},
    "evaluate": {
        "dataset": None,
        "split": "test",
        "predictor": {"kind": "ground_truth", "command": None, "mode": "acceleration"},
        "history": DEFAULT_HISTORY,
        "steps": 20,
        "n": [5, 20],
        "max_trajectories": None,
        "metrics": {
            "sinkhorn_every": 5,
            "sinkhorn_max_particles": 512,
            "sinkhorn_epsilon_factor": 1e-3,
            "sinkhorn_max_iters": 500,
            "sinkhorn_tol": 1e-6,
        },
        "out": None,
    },
    "inspect": {"dataset": None, "json": None},
}


class BadInput(Exception):
    pass


# -- configuration -----------------------------------------------------------------


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = node[p] = {}
        node = nxt
    node[parts[-1]] = value


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(command: str, path: Optional[str], flags: dict, overrides) -> dict:
    """Effective configuration for one subcommand."""
    cfg = copy.deepcopy(DEFAULTS[command])
    if path:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except OSError as exc:
            raise BadInput(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise BadInput(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise BadInput(f"config {path} must be a mapping")
        # either a per-command section or a flat mapping for this command
        section = data.get(command, data)
        section = {k: v for k, v in section.items() if k != "command"}
        cfg = _merge(cfg, section)
    for key, value in flags.items():
        if value is not None:
            _set_dotted(cfg, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise BadInput(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(raw))
    return cfg


def _parse_value(raw: str):
    """YAML scalar, except that ``1e-3`` style numbers (strings in YAML 1.1) become floats."""
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def save_config(command: str, cfg: dict, out_dir: str) -> str:
    path = os.path.join(out_dir, "config.yaml")
    with open(path, "w") as f:
        yaml.safe_dump({"command": command, command: cfg}, f, sort_keys=True)
    return path


def _output_dir(cfg: dict, *parts) -> str:
    if cfg.get("out"):
        return cfg["out"]
    root = os.environ.get(OUTPUT_ROOT_ENV, os.path.join(os.getcwd(), "sphbench_output"))
    return os.path.join(root, *parts)


# -- generate ----------------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    if not cfg.get("case"):
        raise BadInput("generate needs a case id (--case)")
    try:
        spec = get_case(cfg["case"])
    except ContractError as exc:
        raise BadInput(str(exc)) from None
    out = _output_dir(cfg, "datasets", spec.case_id)
    cfg["out"] = out
    seed = int(cfg["seed"])
    common = dict(
        layout=cfg["layout"],
        relax_steps=int(cfg["relax_steps"]),
        warmup=cfg["warmup"],
        warmup_max_frames=int(cfg["warmup_max_frames"]),
    )
    if spec.stationary:
        frames = cfg["frames"] or sum(spec.split_lengths)
        log.info("generating %s: one trajectory of %d frames", spec.case_id, frames)
        traj = generate_trajectory(spec, seed, int(frames), **common)
        train, valid, test = make_splits(traj, "stationary")
        mode = "stationary"
        seeds = {name: [seed] for name in SPLIT_NAMES}
    else:
        count = cfg["trajectories"] or sum(spec.trajectory_counts)
        frames = cfg["frames"] or spec.trajectory_length
        log.info("generating %s: %d trajectories of %d frames", spec.case_id, count, frames)
        trajs = []
        for i in range(int(count)):
            trajs.append(generate_trajectory(spec, seed + i, int(frames), **common))
            log.info("  trajectory %d/%d done", i + 1, count)
        train, valid, test = make_splits(trajs, "episodic")
        mode = "episodic"
        a, b = len(train), len(valid)
        all_seeds = [seed + i for i in range(int(count))]
        seeds = {"train": all_seeds[:a], "valid": all_seeds[a : a + b], "test": all_seeds[a + b :]}
    splits = {"train": train, "valid": valid, "test": test}
    prov = {
        "seed": seed,
        "layout": cfg["layout"] or spec.extra.get("layout", "lattice"),
        "relax_steps": int(cfg["relax_steps"]),
        "trajectory_seeds": seeds,
        "warmup": bool(spec.stationary if cfg["warmup"] is None else cfg["warmup"]),
        "warmup_max_frames": int(cfg["warmup_max_frames"]),
        "version": __version__,
    }
    meta = build_metadata(spec, splits, mode=mode, provenance=prov)
    write_dataset(out, splits, meta)
    save_config("generate", cfg, out)
    print(f"wrote {spec.case_id} dataset to {out}")
    return EXIT_OK


# -- validate ----------------------------------------------------------------------


def cmd_validate(cfg: dict) -> int:
    out = _output_dir(cfg, "validation")
    cfg["out"] = out
    os.makedirs(out, exist_ok=True)
    try:
        results = run_suite(cfg["suite"], out)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    with open(os.path.join(out, "validation.json"), "w") as f:
        json.dump(
            [{"name": r.name, "passed": r.passed, "metrics": r.metrics, "files": r.files} for r in results],
            f,
            indent=2,
        )
    save_config("validate", cfg, out)
    for r in results:
        print(r.summary())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


# -- evaluate ----------------------------------------------------------------------


def _make_predictor(pcfg: dict, meta: dict, split: str, index: int, trajectory):
    kind = pcfg.get("kind", "ground_truth")
    if kind == "ground_truth":
        return GroundTruthPredictor(trajectory)
    if kind == "zero_acceleration":
        return ZeroAccelerationPredictor()
    if kind == "solver":
        prov = meta.get("sphbench", {})
        seeds = prov.get("trajectory_seeds", {}).get(split)
        if not seeds:
            raise BadInput("dataset metadata has no trajectory seeds for the solver predictor")
        seed = seeds[0] if meta["split_mode"] == "stationary" else seeds[index]
        if meta["split_mode"] == "stationary":
            raise BadInput("the solver predictor supports episodic datasets only")
        return SolverPredictor(
            meta["case"], seed, layout=prov.get("layout"), relax_steps=prov.get("relax_steps")
        )
    if kind == "external":
        command = pcfg.get("command")
        if not command:
            raise BadInput("external predictor needs predictor.command")
        if isinstance(command, str):
            command = shlex.split(command)
        return FileExchangePredictor(command, mode=pcfg.get("mode", "acceleration"))
    raise BadInput(f"unknown predictor kind {kind!r}")


def cmd_evaluate(cfg: dict) -> int:
    ds = cfg.get("dataset")
    if not ds:
        raise BadInput("evaluate needs --dataset")
    meta, splits = read_dataset(ds, names=[cfg["split"]])
    trajs = splits[cfg["split"]]
    if cfg.get("max_trajectories"):
        trajs = trajs[: int(cfg["max_trajectories"])]
    spec = get_case(meta["case"])
    domain = Domain([b[1] - b[0] for b in meta["bounds"]], meta["periodic_boundary_conditions"])
    if domain != spec.domain:
        raise BadInput("dataset bounds disagree with the case catalog")
    H = int(cfg["history"])
    ns = [int(n) for n in cfg["n"]]
    out = _output_dir(cfg, "evaluation", meta["case"])
    cfg["out"] = out
    os.makedirs(out, exist_ok=True)
    mcfg = dict(cfg["metrics"])
    reports = []
    for i, traj in enumerate(trajs):
        steps = min(int(cfg["steps"]), traj.num_frames - H - 1)
        if steps < 1:
            raise BadInput(f"trajectory {i} is too short for history {H}")
        window = HistoryWindow.from_trajectory(traj, domain, H, H)
        predictor = _make_predictor(cfg["predictor"], meta, cfg["split"], i, traj)
        _, report = rollout(
            predictor,
            window,
            steps,
            spec,
            traj.types,
            traj,
            metrics_kwargs={**mcfg, "mse_steps": sorted(set(ns + [1]))},
        )
        report.to_json(os.path.join(out, f"rollout_{i:05d}.json"))
        report.to_csv(os.path.join(out, f"rollout_{i:05d}.csv"))
        reports.append(report)
    agg = aggregate_reports(reports)
    agg["case"] = meta["case"]
    agg["split"] = cfg["split"]
    agg["predictor"] = cfg["predictor"].get("kind")
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(agg, f, indent=2)
    columns = [f"mse_{n}" for n in ns] + ["sinkhorn", "mse_e_kin"]
    with open(os.path.join(out, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case"] + columns)
        w.writerow([meta["case"]] + [repr(agg.get(c, float("nan"))) for c in columns])
    save_config("evaluate", cfg, out)
    print("  ".join(f"{c}={agg.get(c, float('nan')):.4g}" for c in columns))
    return EXIT_OK


# -- inspect -----------------------------------------------------------------------


def inspect_dataset(directory: str) -> dict:
    """Summary of a dataset directory, cross-checked against the catalog."""
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory not found: {directory}")
    meta = read_metadata(os.path.join(directory, "metadata.json"))
    summary = {
        "case": meta["case"],
        "dim": meta["dim"],
        "frame_dt": meta["dt"],
        "box": [b[1] - b[0] for b in meta["bounds"]],
        "periodic": meta["periodic_boundary_conditions"],
        "splits": {},
        "problems": [],
    }
    for name in SPLIT_NAMES:
        trs = read_split(os.path.join(directory, f"{name}.h5"))
        summary["splits"][name] = {
            "trajectories": len(trs),
            "frames": sorted({t.num_frames for t in trs}),
            "particles": sorted({t.num_particles for t in trs}),
            "particle_types": {str(k): int(v) for k, v in zip(*np.unique(trs[0].types, return_counts=True))}
            if trs else {},
        }
    spec = CATALOG.get(meta["case"])
    if spec is not None:
        check = summary["problems"]
        particles = {p for s in summary["splits"].values() for p in s["particles"]}
        if particles != {spec.num_particles}:
            check.append(f"particle count {sorted(particles)} differs from catalog {spec.num_particles}")
        if not np.isclose(meta["dt"], spec.frame_dt):
            check.append(f"frame dt {meta['dt']} differs from catalog {spec.frame_dt}")
        if not np.allclose(summary["box"], spec.domain.extents):
            check.append(f"box {summary['box']} differs from catalog {list(spec.domain.extents)}")
        if spec.stationary:
            frames = [summary["splits"][n]["frames"] for n in SPLIT_NAMES]
            if frames != [[n] for n in spec.split_lengths]:
                check.append(f"split lengths {frames} differ from catalog {list(spec.split_lengths)}")
        else:
            counts = [summary["splits"][n]["trajectories"] for n in SPLIT_NAMES]
            if counts != list(spec.trajectory_counts):
                check.append(f"trajectory counts {counts} differ from catalog {list(spec.trajectory_counts)}")
            lengths = {f for n in SPLIT_NAMES for f in summary["splits"][n]["frames"]}
            if lengths != {spec.trajectory_length}:
                check.append(f"trajectory length {sorted(lengths)} differs from catalog {spec.trajectory_length}")
        summary["catalog_match"] = not check
    return summary


def cmd_inspect(cfg: dict) -> int:
    if not cfg.get("dataset"):
        raise BadInput("inspect needs a dataset directory")
    summary = inspect_dataset(cfg["dataset"])
    text = json.dumps(summary, indent=2)
    if cfg.get("json"):
        with open(cfg["json"], "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "validate": cmd_validate,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sphbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable")
        sp.add_argument("--out", dest="out", help="output directory")

    g = sub.add_parser("generate", help="run the solver and write a dataset")
    common(g)
    g.add_argument("--case", choices=CASE_IDS)
    g.add_argument("--seed", type=int)
    g.add_argument("--trajectories", type=int, help="episodic cases: number of trajectories")
    g.add_argument("--frames", type=int, help="frames per trajectory (stationary: total)")
    g.add_argument("--layout", choices=["relaxed", "lattice"])
    g.add_argument("--relax-steps", dest="relax_steps", type=int)
    g.add_argument("--warmup-max-frames", dest="warmup_max_frames", type=int)

    v = sub.add_parser("validate", help="run physical validation suites")
    common(v)
    v.add_argument("--suite", choices=["all", "poiseuille", "tgv2d", "conservation"])

    e = sub.add_parser("evaluate", help="roll out a predictor on a dataset split")
    common(e)
    e.add_argument("--dataset")
    e.add_argument("--split", choices=list(SPLIT_NAMES))
    e.add_argument("--predictor", dest="predictor.kind",
                   choices=["ground_truth", "zero_acceleration", "solver", "external"])
    e.add_argument("--command", dest="predictor.command",
                   help="external predictor command with {request} and {response}")
    e.add_argument("--mode", dest="predictor.mode", choices=["acceleration", "velocity", "position"])
    e.add_argument("--history", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--n", type=int, nargs="+")
    e.add_argument("--max-trajectories", dest="max_trajectories", type=int)
    e.add_argument("--sinkhorn-every", dest="metrics.sinkhorn_every", type=int)
    e.add_argument("--sinkhorn-max-particles", dest="metrics.sinkhorn_max_particles", type=int)

    i = sub.add_parser("inspect", help="summarize a dataset directory")
    i.add_argument("dataset_pos", nargs="?", metavar="dataset")
    i.add_argument("--dataset", help="dataset directory (same as the positional)")
    i.add_argument("--config", help="YAML configuration file")
    i.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    i.add_argument("--json", help="also write the summary to this file")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    ns = vars(args)
    command = ns.pop("command")
    path = ns.pop("config", None)
    overrides = ns.pop("set", [])
    ns.pop("verbose", None)
    positional = ns.pop("dataset_pos", None)
    if positional and not ns.get("dataset"):
        ns["dataset"] = positional
    try:
        cfg = load_config(command, path, ns, overrides)
        return COMMANDS[command](cfg)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (DatasetError, ContractError, PredictorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except SolverInstabilityError as exc:
        print(f"solver instability: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
