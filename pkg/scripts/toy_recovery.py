"""Recover ground-truth power class-K parameters from planner demonstrations.

Generates demonstrations around the circular obstacle with the ground-truth
model, fits a power-kind model from the default initialization, and reports
the demo satisfaction rate and the IoU of the fitted unsafe set against the
ground truth (with a jittered-ground-truth baseline for scale).

    python scripts/toy_recovery.py --episodes 40 --steps 150000 --out toy.json
"""
import argparse
import json
import logging
import time

import numpy as np

from reachsafe.harness import ToyScenario, gen_demo_corpus, ground_truth_model, unsafe_set_iou
from reachsafe.hocbf import ClassKappaFn, HocbfModel
from reachsafe.learning import DisturbanceProvider, LossWeights, default_init, fit, satisfaction_rate


def jitter_baseline(gt: HocbfModel, dyn, lo, hi, rel: float = 0.05, n: int = 10, seed: int = 0) -> list:
    """IoU of the ground truth against copies with multiplicatively perturbed parameters."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        alphas = []
        for a in gt.alphas:
            p = a.effective().copy()
            p[0] *= 1 + rel * rng.normal()
            p[1] = 1 + (p[1] - 1) * (1 + rel * rng.normal())
            alphas.append(ClassKappaFn.from_effective(a.kind, p))
        out.append(unsafe_set_iou(gt, HocbfModel(gt.barrier, alphas), dyn, lo, hi, seed=seed + k))
    return out


def run(episodes: int = 40, steps: int = 150000, seed: int = 0, lr: float = 0.001) -> dict:
    sc = ToyScenario()
    gt = ground_truth_model(sc)
    dyn = sc.dynamics()
    t0 = time.perf_counter()
    ds = gen_demo_corpus(gt, episodes, seed, sc)
    t_gen = time.perf_counter() - t0
    lo, hi = ds.states.min(axis=0), ds.states.max(axis=0)
    base = jitter_baseline(gt, dyn, lo, hi)
    prov = DisturbanceProvider("worst-case")
    init = default_init(sc.barrier(), ["power", "power"])
    t0 = time.perf_counter()
    res = fit(init, dyn, ds, LossWeights(learning_rate=lr, steps=steps), prov)
    t_fit = time.perf_counter() - t0
    return {
        "episodes": episodes,
        "samples": len(ds),
        "gen_seconds": t_gen,
        "fit_seconds": t_fit,
        "steps": steps,
        "init": init.effective_params().tolist(),
        "fitted": [a.effective().tolist() for a in res.model.alphas],
        "ground_truth": [a.effective().tolist() for a in gt.alphas],
        "loss_first": float(res.trace[0]),
        "loss_last": float(res.trace[-1]),
        "satisfaction": satisfaction_rate(res.model, dyn, ds, prov),
        "gt_satisfaction_tol_1e-9": satisfaction_rate(gt, dyn, ds, prov, tol=1e-9),
        "iou": unsafe_set_iou(gt, res.model, dyn, lo, hi),
        "jitter_baseline_iou": {"mean": float(np.mean(base)), "min": float(np.min(base))},
        "state_box": [lo.tolist(), hi.tolist()],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--steps", type=int, default=150000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    rep = run(args.episodes, args.steps, args.seed)
    text = json.dumps(rep, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
