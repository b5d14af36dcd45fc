"""Compare safety concepts on the reduced car-following model.

Solves the worst-case and HOCBF-constrained reachability games on a common-
heading 4-D grid, then reports

* the confusion matrix of HOCBF-HJ against WC-HJ over the filtered nodes,
* the ordering check (nodes the constrained game flags but WC-HJ does not),
* value percentiles of every concept over a synthetic highway log,
* zero level sets at one speed slice, written as CSV.

    python scripts/highway_concepts.py --points 21 --out highway_out
"""
import argparse
import json
import logging
import time
from pathlib import Path

from reachsafe.cli import resolve_workers
from reachsafe.concepts import SafetyConcept
from reachsafe.dynamics import CommonHeading4, steering_box
from reachsafe.harness import confusion, export_levelset, gen_highway_log, ordering_violations, percentile_report
from reachsafe.hocbf import ClassKappaFn, EllipseBarrier, HocbfModel
from reachsafe.solver import BoundaryFn, Grid, solve


def run(points: int = 21, horizon: float = 2.0, alpha: float = 1.0, n_log: int = 10000, seed: int = 0,
        workers: int = 1, out: Path = None) -> dict:
    box = steering_box(-0.5, 0.5, -5.0, 3.0)
    dyn = CommonHeading4(box, box)
    bar = EllipseBarrier(5.4, 2.4)
    model = HocbfModel(bar, [ClassKappaFn.from_effective("linear", [alpha])] * 2)
    bnd = BoundaryFn.from_barrier(bar)
    grid = Grid([-30, -6, 10, 10], [30, 6, 35, 35], [points] * 4, names=("dx", "dy", "v_A", "v_B"))

    t0 = time.perf_counter()
    wc_f = solve(dyn, "worst-case", bnd, grid, horizon, workers=workers)
    t_wc = time.perf_counter() - t0
    t0 = time.perf_counter()
    hc_f = solve(dyn, "constrained", bnd, grid, horizon, hocbf=model, workers=workers)
    t_hc = time.perf_counter() - t0

    concepts = {
        "wc-hj": SafetyConcept("wc-hj", dyn, bnd, wc_f),
        "hocbf-hj": SafetyConcept("hocbf-hj", dyn, bnd, hc_f, model),
        "brake": SafetyConcept("brake", dyn, bnd, horizon=horizon),
        "constant": SafetyConcept("constant", dyn, bnd, horizon=horizon),
    }
    log = gen_highway_log(n_log, seed, model="common4")
    order = ordering_violations(wc_f, hc_f)
    rep = {
        "grid_points": points,
        "solve_seconds": {"wc-hj": t_wc, "hocbf-hj": t_hc},
        "confusion": confusion(concepts["wc-hj"], concepts["hocbf-hj"], grid).to_dict(),
        "ordering": {"raw_fraction": order.raw_fraction, "band_fraction": order.band_fraction, "nodes": order.nodes},
        "percentiles": {k: percentile_report(c, log).to_dict() for k, c in concepts.items()},
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for k, f in (("wc-hj", wc_f), ("hocbf-hj", hc_f)):
            export_levelset(f, {"v_A": 25.0, "v_B": 20.0}, out / f"levelset_{k}.csv")
        (out / "report.json").write_text(json.dumps(rep, indent=2) + "\n")
    return rep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=21, help="grid points per dimension")
    ap.add_argument("--horizon", type=float, default=2.0)
    ap.add_argument("--alpha", type=float, default=1.0, help="slope of both linear class-K functions")
    ap.add_argument("--log-samples", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    rep = run(args.points, args.horizon, args.alpha, args.log_samples, args.seed, resolve_workers(args.workers),
              args.out)
    print(json.dumps(rep, indent=2))


if __name__ == "__main__":
    main()
