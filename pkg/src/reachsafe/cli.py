"""``reachsafe {gen-demos|learn|solve|compare|eval} --config <path> [--set k=v]...``

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable

from . import __version__
from .concepts import SafetyConcept
from .config import (
    CompareConfig,
    EvalConfig,
    GenDemosConfig,
    LearnConfig,
    SolveConfig,
    apply_overrides,
    config_hash,
    load_json,
)
from .dynamics import ControlBox, make_dynamics
from .errors import ConfigError, NumericalAbort
from .harness import (
    HighwayConfig,
    PlannerConfig,
    ToyScenario,
    confusion,
    export_controls,
    export_levelset,
    gen_demo_corpus,
    gen_highway_log,
    ground_truth_model,
    percentile_report,
)
from .hocbf import ClassKappaFn, HocbfModel, barrier_from_dict
from .learning import DemoDataset, DisturbanceProvider, LossWeights, default_init, fit
from .solver import BoundaryFn, Grid, solve

log = logging.getLogger("reachsafe")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, doc: dict, files: list, extra: dict = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(doc),
        "config": doc,
        "outputs": {f.name: _sha256(f) for f in files},
    }
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dynamics(cfg: dict):
    try:
        return make_dynamics(cfg)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"dynamics: {e}") from None


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _dataclass_block(cls, d: dict, label: str):
    try:
        return cls(**_tuple_fields(d))
    except TypeError as e:
        raise ConfigError(f"{label}: {e}") from None


# ----------------------------------------------------------------- commands


def cmd_gen_demos(doc: dict, workers: int) -> None:
    cfg = GenDemosConfig.from_dict(doc)
    scenario = _dataclass_block(ToyScenario, cfg.scenario, "scenario")
    planner = _dataclass_block(PlannerConfig, cfg.planner, "planner")
    model = HocbfModel.from_dict(cfg.model) if cfg.model else ground_truth_model(scenario)
    ds = gen_demo_corpus(model, cfg.episodes, cfg.seed, scenario, planner)
    out = _outdir(cfg.output_dir)
    ds.to_csv(out / "demos.csv")
    _manifest(out, "gen-demos", doc, [out / "demos.csv"],
              {"episodes": len(ds.metadata["episodes"]), "samples": len(ds),
               "infeasible_steps": ds.metadata["infeasible_steps"]})


def _provider(d: dict) -> DisturbanceProvider:
    d = dict(d)
    interval = d.pop("interval", None)
    box = ControlBox.from_dict(interval) if interval else None
    try:
        return DisturbanceProvider(interval=box, **d)
    except TypeError as e:
        raise ConfigError(f"provider: {e}") from None


def cmd_learn(doc: dict, workers: int) -> None:
    cfg = LearnConfig.from_dict(doc)
    dyn = _dynamics(cfg.dynamics)
    if not Path(cfg.demos).exists():
        raise ConfigError(f"demos file not found: {cfg.demos}")
    ds = DemoDataset.load(cfg.demos)
    ds.check_boxes(dyn)
    barrier = barrier_from_dict(cfg.barrier)
    if cfg.init_params is None:
        init = default_init(barrier, cfg.alpha_kinds)
    else:
        init = HocbfModel(barrier, [ClassKappaFn.from_effective(k, p) for k, p in zip(cfg.alpha_kinds, cfg.init_params)])
    try:
        weights = LossWeights(learning_rate=cfg.lr, steps=cfg.steps, **cfg.weights)
    except TypeError as e:
        raise ConfigError(f"weights: {e}") from None
    res = fit(init, dyn, ds, weights, _provider(cfg.provider), seed=cfg.seed, momentum=cfg.momentum)
    out = _outdir(cfg.output_dir)
    (out / "model.json").write_text(res.model.dumps() + "\n")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for k, v in enumerate(res.trace):
            w.writerow([k, format(v, ".17g")])
    _manifest(out, "learn", doc, [out / "model.json", out / "loss_trace.csv"],
              {"steps": res.steps, "final_loss": float(res.trace[-1]) if len(res.trace) else None})


def cmd_solve(doc: dict, workers: int) -> None:
    cfg = SolveConfig.from_dict(doc)
    dyn = _dynamics(cfg.dynamics)
    grid_doc = dict(cfg.grid)
    grid_doc.setdefault("periodic", list(dyn.periodic))
    grid_doc.setdefault("names", list(dyn.state_names))
    grid = Grid.from_dict(grid_doc)
    boundary = BoundaryFn.from_barrier(barrier_from_dict(cfg.boundary))
    model = None
    if cfg.hamiltonian == "constrained":
        if not Path(cfg.model).exists():
            raise ConfigError(f"model file not found: {cfg.model}")
        model = HocbfModel.load(cfg.model)
    chash = config_hash(doc)
    field = solve(dyn, cfg.hamiltonian, boundary, grid, cfg.horizon, hocbf=model, scheme=cfg.scheme,
                  dissipation=cfg.dissipation, cfl=cfg.cfl, workers=workers,
                  meta={"config_hash": chash, "version": __version__})
    out = _outdir(cfg.output_dir)
    name = cfg.name or cfg.hamiltonian
    path = out / f"{name}.vf"
    field.save(path, cfg.n_slices)
    _manifest(out, "solve", doc, [path], {"steps": field.meta["steps"], "dt": field.meta["dt"],
                                          "infeasible_fraction": field.meta["infeasible_fraction"]})


def _concepts(d: dict) -> dict:
    return {k: SafetyConcept.from_dict(v) for k, v in d.items()}


def cmd_compare(doc: dict, workers: int) -> None:
    cfg = CompareConfig.from_dict(doc)
    concepts = _concepts(cfg.concepts)
    ref, cand = concepts[cfg.reference], concepts[cfg.candidate]
    if cfg.grid is not None:
        grid = Grid.from_dict({"periodic": list(ref.dyn.periodic), "names": list(ref.dyn.state_names), **cfg.grid})
    elif ref.is_hj:
        grid = ref.value_field.grid
    else:
        raise ConfigError("compare needs a grid when the reference is not an HJ concept")
    cm = confusion(ref, cand, grid, cfg.t, cfg.state_filter, cfg.threshold)
    out = _outdir(cfg.output_dir)
    files = [out / "confusion.json"]
    _write_json(files[0], cm.to_dict())
    for i, spec in enumerate(cfg.levelsets):
        c = concepts.get(spec.get("concept"))
        if c is None or not c.is_hj:
            raise ConfigError(f"levelset {i}: needs an HJ concept name")
        path = out / f"levelset_{spec.get('name', i)}.csv"
        export_levelset(c.value_field, spec.get("slice", {}), path, float(spec.get("level", 0.0)), cfg.t)
        files.append(path)
    for i, spec in enumerate(cfg.controls):
        names = spec.get("concepts", list(concepts))
        path = out / f"controls_{spec.get('name', i)}.csv"
        export_controls({n: concepts[n] for n in names}, spec["state"], path, cfg.t)
        files.append(path)
    _manifest(out, "compare", doc, files)


def cmd_eval(doc: dict, workers: int) -> None:
    cfg = EvalConfig.from_dict(doc)
    concepts = _concepts(cfg.concepts)
    if cfg.log is not None:
        if not Path(cfg.log).exists():
            raise ConfigError(f"log file not found: {cfg.log}")
        log_ds = DemoDataset.load(cfg.log)
    else:
        syn = dict(cfg.synthetic)
        try:
            n, seed = int(syn.pop("n_samples")), int(syn.pop("seed", 0))
        except KeyError:
            raise ConfigError("synthetic log needs n_samples") from None
        model = syn.pop("model", "joint6")
        log_ds = gen_highway_log(n, seed, _dataclass_block(HighwayConfig, syn, "synthetic"), model)
    names = cfg.evaluate or sorted(concepts)
    reports = {}
    for n in names:
        if n not in concepts:
            raise ConfigError(f"unknown concept {n!r}")
        rep = percentile_report(concepts[n], log_ds, cfg.t)
        vals = list(rep.percentiles.values())
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise NumericalAbort(f"percentiles of {n} are not nondecreasing")
        reports[n] = rep.to_dict()
    out = _outdir(cfg.output_dir)
    _write_json(out / "percentiles.json", reports)
    _manifest(out, "eval", doc, [out / "percentiles.json"], {"samples": len(log_ds)})


COMMANDS: dict[str, Callable] = {
    "gen-demos": cmd_gen_demos,
    "learn": cmd_learn,
    "solve": cmd_solve,
    "compare": cmd_compare,
    "eval": cmd_eval,
}


def resolve_workers(flag) -> int:
    env = os.environ.get("REACHSAFE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"REACHSAFE_THREADS must be an integer, got {env!r}") from None
    elif flag is not None:
        n = int(flag)
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("worker count must be positive")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reachsafe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"reachsafe {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--workers", type=int, default=None, help="threads for data-parallel sections")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = apply_overrides(load_json(args.config), args.set)
        COMMANDS[args.command](doc, resolve_workers(args.workers))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
