"""Fitting class-K parameters of a HOCBF to safe demonstrations.

The loss is the mean over samples of four hinge/saturation terms on the
constraint margin ``m`` and the effective CBF ``psi``, plus a squared-norm
penalty on the effective alpha parameters (added once, not per sample).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .dynamics import AffinePairwiseDynamics, ControlBox
from .errors import ConfigError, NumericalAbort
from .hocbf import ClassKappaFn, HocbfModel, LieTerms, contender_term, lie_terms

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ dataset


@dataclass
class DemoDataset:
    times: np.ndarray  # (N,)
    states: np.ndarray  # (N, n)
    ego_controls: np.ndarray  # (N, m_A)
    contender_controls: Optional[np.ndarray] = None  # (N, m_B)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.ego_controls = np.asarray(self.ego_controls, dtype=float).reshape(len(self.states), -1)
        if self.contender_controls is not None:
            self.contender_controls = np.asarray(self.contender_controls, dtype=float).reshape(len(self.states), -1)
        if not (len(self.times) == len(self.states) == len(self.ego_controls)):
            raise ConfigError("dataset columns have inconsistent lengths")
        if not np.all(np.isfinite(self.states)):
            raise ConfigError("dataset contains non-finite states")

    def __len__(self):
        return len(self.states)

    def check_boxes(self, dyn: AffinePairwiseDynamics, tol: float = 1e-9):
        if not np.all(dyn.ego_box.contains(self.ego_controls, tol)):
            raise ConfigError("ego controls outside the declared control box")
        if self.contender_controls is not None and dyn.contender_dim:
            if not np.all(dyn.contender_box.contains(self.contender_controls, tol)):
                raise ConfigError("contender controls outside the declared control box")

    def permuted(self, perm) -> "DemoDataset":
        cc = None if self.contender_controls is None else self.contender_controls[perm]
        return DemoDataset(self.times[perm], self.states[perm], self.ego_controls[perm], cc, dict(self.metadata))

    def header(self) -> list:
        n, ma = self.states.shape[1], self.ego_controls.shape[1]
        cols = ["t"] + [f"x{i}" for i in range(n)] + [f"uA{i}" for i in range(ma)]
        if self.contender_controls is not None:
            cols += [f"uB{i}" for i in range(self.contender_controls.shape[1])]
        return cols

    def rows(self):
        parts = [self.times[:, None], self.states, self.ego_controls]
        if self.contender_controls is not None:
            parts.append(self.contender_controls)
        return np.concatenate(parts, axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([format(v, ".17g") for v in row])

    def to_jsonl(self, path) -> None:
        cols = self.header()
        with open(path, "w") as fh:
            for row in self.rows():
                fh.write(json.dumps(dict(zip(cols, row.tolist()))) + "\n")

    @classmethod
    def _from_columns(cls, cols: list, data: np.ndarray, metadata: dict) -> "DemoDataset":
        if not cols or cols[0] != "t":
            raise ConfigError("dataset header must start with 't'")
        xi = [i for i, c in enumerate(cols) if c.startswith("x")]
        ai = [i for i, c in enumerate(cols) if c.startswith("uA")]
        bi = [i for i, c in enumerate(cols) if c.startswith("uB")]
        expect = ["t"] + [f"x{k}" for k in range(len(xi))] + [f"uA{k}" for k in range(len(ai))]
        expect += [f"uB{k}" for k in range(len(bi))]
        if cols != expect:
            raise ConfigError(f"unexpected dataset header {cols}")
        if not xi or not ai:
            raise ConfigError("dataset needs state and ego-control columns")
        data = data.reshape(-1, len(cols))
        return cls(
            data[:, 0], data[:, xi], data[:, ai], data[:, bi] if bi else None, metadata
        )

    @classmethod
    def from_csv(cls, path) -> "DemoDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                cols = next(reader)
            except StopIteration:
                raise ConfigError(f"{path}: empty dataset file") from None
            data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        return cls._from_columns([c.strip() for c in cols], data, {"source": str(path)})

    @classmethod
    def from_jsonl(cls, path) -> "DemoDataset":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not recs:
            raise ConfigError(f"{path}: empty dataset file")
        cols = list(recs[0].keys())
        data = np.array([[r[c] for c in cols] for r in recs], dtype=float)
        return cls._from_columns(cols, data, {"source": str(path)})

    @classmethod
    def load(cls, path) -> "DemoDataset":
        return cls.from_jsonl(path) if str(path).endswith(".jsonl") else cls.from_csv(path)


# --------------------------------------------------------------- settings


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
    beta2: float = 0.001
    beta3: float = 1.0
    beta4: float = 0.001
    beta5: float = 0.001
    learning_rate: float = 0.001
    steps: int = 10000

    def __post_init__(self):
        betas = (self.beta1, self.beta2, self.beta3, self.beta4, self.beta5)
        if any(b < 0 for b in betas):
            raise ConfigError("loss weights must be nonnegative")
        if not self.beta1 > 0:
            raise ConfigError("beta1 must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")


_MODES = ("ground-truth", "worst-case", "fixed-interval")


@dataclass(frozen=True)
class DisturbanceProvider:
    """How the contender's control enters the constraint during learning."""

    mode: str = "worst-case"
    interval: Optional[ControlBox] = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"unknown provider mode {self.mode!r}; choose from {_MODES}")
        if self.mode == "fixed-interval" and self.interval is None:
            raise ConfigError("fixed-interval provider needs an interval box")

    def contender_term(self, coeff: np.ndarray, dataset: DemoDataset, dyn: AffinePairwiseDynamics) -> np.ndarray:
        if dyn.contender_dim == 0:
            return np.zeros(len(coeff))
        if self.mode == "ground-truth":
            uB = dataset.contender_controls
            if uB is None or uB.shape[1] != dyn.contender_dim:
                raise ConfigError("ground-truth provider needs recorded contender controls of matching size")
            return contender_term(coeff, uB)
        if self.mode == "fixed-interval":
            if self.interval.dim != dyn.contender_dim:
                raise ConfigError("provider interval dimension does not match the contender controls")
            return contender_term(coeff, self.interval)
        return contender_term(coeff, "worst-case", dyn.contender_box)


# ------------------------------------------------------------- loss/grad


@dataclass
class Prepared:
    """Sample quantities that do not depend on the alpha parameters."""

    terms: LieTerms
    fixed_margin: np.ndarray  # ego influence + contender influence

    @classmethod
    def build(cls, model: HocbfModel, dyn, dataset: DemoDataset, provider: DisturbanceProvider) -> "Prepared":
        if len(dataset) == 0:
            raise ConfigError("dataset is empty")
        if dataset.states.shape[1] != dyn.state_dim or dataset.ego_controls.shape[1] != dyn.ego_dim:
            raise ConfigError("dataset dimensions do not match the dynamics")
        T = lie_terms(model.barrier, dyn, dataset.states)
        if model.relative_degree == 1:
            ego, cont = T.Lgb, T.Lhb
        else:
            ego, cont = T.LgLfb, T.LhLfb
        fixed = np.sum(ego * dataset.ego_controls, axis=1) + provider.contender_term(cont, dataset, dyn)
        return cls(T, fixed)


def _margin_and_psi(model: HocbfModel, P: Prepared):
    T = P.terms
    a1 = model.alphas[0]
    if model.relative_degree == 1:
        psi = T.b
        m = P.fixed_margin + T.Lfb + a1(T.b)
    else:
        a2 = model.alphas[1]
        psi = T.Lfb + a1(T.b)
        m = P.fixed_margin + T.Lf2b + a1.deriv(T.b) * T.Lfb + a2(psi)
    return m, psi


def _per_sample(m, psi, w: LossWeights):
    return {
        "violation": -w.beta1 * np.minimum(m, 0.0),
        "satisfaction": w.beta2 * np.maximum(np.tanh(m), 0.0),
        "cbf_violation": -w.beta3 * np.minimum(psi, 0.0),
        "cbf_satisfaction": w.beta4 * np.maximum(np.tanh(psi), 0.0),
    }


@dataclass
class LossValue:
    total: float
    breakdown: dict


def _evaluate(model: HocbfModel, P: Prepared, weights: LossWeights, with_grad: bool):
    T = P.terms
    m, psi = _margin_and_psi(model, P)
    terms = {k: float(np.mean(v)) for k, v in _per_sample(m, psi, weights).items()}
    p = model.effective_params()
    terms["regularization"] = float(weights.beta5 * (p @ p))
    total = sum(terms[k] for k in ("violation", "satisfaction", "cbf_violation", "cbf_satisfaction"))
    value = LossValue(total + terms["regularization"], terms)
    if not with_grad:
        return value, None
    # one-sided subgradients; ties at zero take the inactive branch
    dm = np.where(m < 0, -weights.beta1, np.where(m > 0, weights.beta2 * (1.0 - np.tanh(m) ** 2), 0.0))
    dpsi = np.where(psi < 0, -weights.beta3, np.where(psi > 0, weights.beta4 * (1.0 - np.tanh(psi) ** 2), 0.0))
    a1 = model.alphas[0]
    if model.relative_degree == 1:
        per = dm[:, None] * a1.grad_value(T.b)
    else:
        a2 = model.alphas[1]
        g1 = a1.grad_value(T.b)  # dpsi/draw1
        dm1 = a1.grad_deriv(T.b) * T.Lfb[:, None] + a2.deriv(psi)[:, None] * g1
        dm2 = a2.grad_value(psi)
        per = np.concatenate([dm[:, None] * dm1 + dpsi[:, None] * g1, dm[:, None] * dm2], axis=1)
    grad = np.mean(per, axis=0)
    chain = np.concatenate([expit(a.raw) for a in model.alphas])
    return value, grad + weights.beta5 * 2.0 * p * chain


def loss_prepared(model: HocbfModel, P: Prepared, weights: LossWeights) -> LossValue:
    return _evaluate(model, P, weights, False)[0]


def gradient_prepared(model: HocbfModel, P: Prepared, weights: LossWeights) -> np.ndarray:
    return _evaluate(model, P, weights, True)[1]


def loss_and_gradient_prepared(model: HocbfModel, P: Prepared, weights: LossWeights):
    return _evaluate(model, P, weights, True)


def loss(model: HocbfModel, dyn, dataset: DemoDataset, weights: LossWeights, provider: DisturbanceProvider) -> LossValue:
    """Mean data loss plus regularizer, with a per-term breakdown."""
    return loss_prepared(model, Prepared.build(model, dyn, dataset, provider), weights)


def gradient(model: HocbfModel, dyn, dataset: DemoDataset, weights: LossWeights, provider: DisturbanceProvider) -> np.ndarray:
    """Exact (sub)gradient of :func:`loss` with respect to the raw parameters."""
    return gradient_prepared(model, Prepared.build(model, dyn, dataset, provider), weights)


def margins(model: HocbfModel, dyn, dataset: DemoDataset, provider: DisturbanceProvider):
    """Per-sample constraint margin ``m`` and effective CBF ``psi``."""
    return _margin_and_psi(model, Prepared.build(model, dyn, dataset, provider))


def satisfaction_rate(model, dyn, dataset, provider, tol: float = 0.0) -> float:
    m, _ = margins(model, dyn, dataset, provider)
    return float(np.mean(m >= -tol))


# ------------------------------------------------------------------- fit


@dataclass
class FitResult:
    model: HocbfModel
    trace: np.ndarray  # loss before each step, then the final loss
    steps: int


def fit(
    init: HocbfModel,
    dyn: AffinePairwiseDynamics,
    dataset: DemoDataset,
    weights: LossWeights,
    provider: DisturbanceProvider,
    seed: int = 0,
    momentum: float = 0.0,
    init_jitter: float = 0.0,
    log_every: int = 0,
) -> FitResult:
    """Full-batch gradient descent on the raw alpha parameters.

    ``seed`` only matters when ``init_jitter > 0`` (Gaussian noise added to the
    raw initial parameters). Raises :class:`NumericalAbort` carrying the last
    finite :class:`FitResult` if the loss stops being finite.
    """
    P = Prepared.build(init, dyn, dataset, provider)
    raw = init.raw_params.copy()
    if init_jitter > 0:
        raw = raw + np.random.default_rng(seed).normal(0.0, init_jitter, raw.shape)
    model = init.with_raw(raw) if init_jitter > 0 else init
    vel = np.zeros_like(raw)
    trace = np.empty(weights.steps + 1)
    for k in range(weights.steps):
        lv, g = loss_and_gradient_prepared(model, P, weights)
        val = lv.total
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            raise NumericalAbort(f"non-finite loss at step {k}", FitResult(model, trace[:k], k))
        trace[k] = val
        vel = momentum * vel - weights.learning_rate * g
        new = model.with_raw(model.raw_params + vel)
        if not np.all(np.isfinite(new.effective_params())):
            raise NumericalAbort(f"non-finite parameters at step {k}", FitResult(model, trace[: k + 1], k))
        model = new
        if log_every and k % log_every == 0:
            log.info("step %d loss %.6g params %s", k, val, model.effective_params())
    final = loss_prepared(model, P, weights).total
    if not np.isfinite(final):
        raise NumericalAbort("non-finite final loss", FitResult(model, trace[:-1], weights.steps))
    trace[-1] = final
    return FitResult(model, trace, weights.steps)


# Small initial parameters make the data violate the constraint, so the
# violation term drives the fit instead of the weak saturation terms.
DEFAULT_INIT = {"linear": [0.1], "cubic": [1e-4], "power": [0.3, 1.05], "lc": [0.1, 0.1, 1.0, 1e-4]}


def default_init(barrier, kinds) -> HocbfModel:
    return HocbfModel(barrier, [ClassKappaFn.from_effective(k, DEFAULT_INIT[k]) for k in kinds])


def fit_config_defaults() -> dict:
    """Fit settings block with the default weights, as written into run configs."""
    w = LossWeights()
    return {
        "weights": {k: getattr(w, k) for k in ("beta1", "beta2", "beta3", "beta4", "beta5")},
        "lr": w.learning_rate,
        "steps": w.steps,
        "provider": {"mode": "worst-case"},
        "alpha_kinds": ["power", "power"],
        "seed": 0,
    }


__all__ = [
    "DemoDataset",
    "LossWeights",
    "DisturbanceProvider",
    "LossValue",
    "FitResult",
    "loss",
    "gradient",
    "fit",
    "margins",
    "satisfaction_rate",
    "Prepared",
    "loss_and_gradient_prepared",
    "default_init",
    "DEFAULT_INIT",
]
