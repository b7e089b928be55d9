"""Monte Carlo harness: scenario generation, level/power and interval coverage runs.

Each repetition is independent and seeded from ``(seed, rep_index)``. When an
output directory is given, every finished repetition is written to its own
JSON file so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import inference, robust
from .errors import ConfigError, RobSurError
from .model import SurDataset
from .robust import FitConfig, RestrictionSpec

log = logging.getLogger(__name__)

TESTS = ("Lambda_S", "Lambda_MM", "Lambda_MLE", "LM_S", "LM_MM", "LM_MLE")
CI_METHODS = ("AS", "BP", "BCa")
SIGMA_KINDS = ("equicorrelation", "single_pair", "identity")
ERROR_KINDS = ("normal", "t3")


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 100
    m: int = 3
    p_j: tuple = (3, 3, 3)          # regressors per block, intercept included
    d: float = 0.0                  # value of the last coefficient
    sigma: str = "equicorrelation"
    tau: float = 0.5
    errors: str = "normal"
    contamination: float = 0.0
    seed: int = 0
    repetitions: int = 300
    N_bootstrap: int = 500

    def __post_init__(self):
        object.__setattr__(self, "p_j", tuple(int(v) for v in self.p_j))
        if len(self.p_j) != self.m:
            raise ConfigError("p_j needs one entry per block")
        if min(self.p_j) < 1:
            raise ConfigError("every block needs at least the intercept")
        if self.sigma not in SIGMA_KINDS:
            raise ConfigError(f"sigma must be one of {SIGMA_KINDS}")
        if self.errors not in ERROR_KINDS:
            raise ConfigError(f"errors must be one of {ERROR_KINDS}")
        if not 0 <= self.contamination < 0.5:
            raise ConfigError("contamination fraction must lie in [0, 0.5)")
        if self.sigma != "identity" and self.m > 1 and not -1 / (self.m - 1) < self.tau < 1:
            raise ConfigError("tau outside the positive definite range")
        if self.repetitions < 1 or self.N_bootstrap < 0:
            raise ConfigError("repetitions must be >= 1 and N_bootstrap >= 0")

    @property
    def p(self) -> int:
        return sum(self.p_j)

    @property
    def beta(self) -> np.ndarray:
        b = np.ones(self.p)
        b[-1] = self.d
        return b

    @property
    def Sigma(self) -> np.ndarray:
        m = self.m
        if self.sigma == "identity":
            return np.eye(m)
        if self.sigma == "equicorrelation":
            return np.full((m, m), self.tau) + (1 - self.tau) * np.eye(m)
        S = np.eye(m)
        S[0, 1] = S[1, 0] = self.tau
        return S

    def cell(self) -> dict:
        d = asdict(self)
        d.pop("repetitions")
        d["p_j"] = list(self.p_j)
        return d

    def key(self) -> str:
        return hashlib.sha1(json.dumps(self.cell(), sort_keys=True).encode()).hexdigest()[:12]


def _rng(spec: ScenarioSpec, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(rep,)))


def generate_scenario(spec: ScenarioSpec, rep_index: int) -> SurDataset:
    """One simulated data set; the first ``ceil(fraction n)`` rows are bad leverage points."""
    rng = _rng(spec, rep_index)
    n, m = spec.n, spec.m
    L = np.linalg.cholesky(spec.Sigma)
    Z = rng.standard_normal((n, m))
    if spec.errors == "t3":
        Z = Z / np.sqrt(rng.chisquare(3, size=n) / 3)[:, None]
    E = Z @ L.T
    beta = spec.beta
    offs = np.concatenate([[0], np.cumsum(spec.p_j)])
    n_bad = math.ceil(spec.contamination * n) if spec.contamination > 0 else 0
    blocks = []
    for j in range(m):
        pj = spec.p_j[j]
        X = np.column_stack([np.ones(n), rng.standard_normal((n, pj - 1))])
        y = X @ beta[offs[j]:offs[j + 1]] + E[:, j]
        if n_bad:
            X[:n_bad, 1:] = rng.uniform(-10, -5, size=(n_bad, pj - 1))
            y[:n_bad] += rng.normal(20.0, 1.0, size=n_bad)
        blocks.append((X, y))
    return SurDataset(tuple(blocks))


@dataclass
class ExperimentResult:
    cell: dict
    quantity: str                   # test name or interval method
    rate: float                     # rejection rate or coverage
    se: float
    repetitions: int
    failures: int = 0
    mean_length: Optional[float] = None
    runtime: float = 0.0
    per_rep: list = field(default_factory=list, repr=False)   # p-value or (coverage, length) per rep

    def as_dict(self) -> dict:
        out = dict(self.cell)
        out.update({"quantity": self.quantity, "rate": self.rate, "se": self.se,
                    "repetitions": self.repetitions, "failures": self.failures,
                    "mean_length": self.mean_length, "runtime": self.runtime})
        return out


def _binom_se(r: float, reps: int) -> float:
    return math.sqrt(r * (1 - r) / reps) if reps else float("nan")


# --------------------------------------------------------------------------
# single repetitions


def last_coefficient_restriction(p: int) -> RestrictionSpec:
    R = np.zeros((1, p))
    R[0, -1] = 1.0
    return RestrictionSpec(R=R)


def _rep_tests(spec: ScenarioSpec, rep: int, tests: Sequence[str], config: FitConfig,
               tuning) -> dict:
    """p-values of the requested tests for one repetition (MLE tests: asymptotic)."""
    data = generate_scenario(spec, rep)
    cfg = replace(config, seed=int(np.random.SeedSequence(spec.seed, spawn_key=(rep, 1))
                                   .generate_state(1)[0]))
    out = {}
    full = None
    rs = last_coefficient_restriction(spec.p)
    lam_r = None
    N, seed = spec.N_bootstrap, rep
    for t in tests:
        try:
            if t in ("Lambda_S", "Lambda_MM", "LM_S", "LM_MM") and full is None:
                full = robust.fit(data, cfg, tuning)
            if t in ("Lambda_S", "Lambda_MM"):
                if lam_r is None:
                    lam_r = robust.fit(data, cfg, tuning, restriction=rs,
                                       starts=[(full.beta_s, full.s.Sigma),
                                               (full.beta_mm, full.mm.Sigma)])
                res = inference.lr_test_coef(data, rs, t.split("_")[1], N, seed, cfg, tuning,
                                             fit=full, restricted=lam_r)
                out[t] = res.p_bootstrap if N else res.p_asymptotic
            elif t in ("LM_S", "LM_MM"):
                res = inference.lm_diag_test(data, t.split("_")[1], N, seed, cfg, tuning, fit=full)
                out[t] = res.p_bootstrap if N else res.p_asymptotic
            elif t == "Lambda_MLE":
                out[t] = inference.lr_test_mle(data, rs).p_asymptotic
            elif t == "LM_MLE":
                out[t] = inference.lm_test_mle(data).p_asymptotic
            else:
                raise ConfigError(f"unknown test {t!r}")
        except RobSurError as exc:
            log.warning("rep %d, %s failed: %s", rep, t, exc)
            out[t] = None
    return out


def _rep_coverage(spec: ScenarioSpec, rep: int, methods: Sequence[str], config: FitConfig,
                  tuning) -> dict:
    data = generate_scenario(spec, rep)
    cfg = replace(config, seed=int(np.random.SeedSequence(spec.seed, spawn_key=(rep, 1))
                                   .generate_state(1)[0]))
    beta = spec.beta
    offs = np.concatenate([[0], np.cumsum(spec.p_j)])
    slopes = [k for j in range(spec.m) for k in range(offs[j] + 1, offs[j + 1])]
    try:
        f = robust.fit(data, cfg, tuning)
        cis = inference.frb_intervals(f, data, spec.N_bootstrap, rep, 0.95, methods,
                                      labels=[str(i) for i in range(spec.p)])
    except RobSurError as exc:
        log.warning("rep %d coverage failed: %s", rep, exc)
        return {mth: None for mth in methods}
    out = {}
    for mth in methods:
        sel = [c for c in cis if c.method == mth and int(c.parameter) in slopes]
        cov = [c.covers(beta[int(c.parameter)]) for c in sel]
        out[mth] = {"coverage": float(np.mean(cov)), "length": float(np.mean([c.length for c in sel]))}
    return out


# --------------------------------------------------------------------------
# runners


def _rep_path(out_dir, kind: str, spec: ScenarioSpec, what: Sequence[str], rep: int) -> Optional[Path]:
    if out_dir is None:
        return None
    tag = hashlib.sha1(json.dumps([kind, list(what)]).encode()).hexdigest()[:8]
    return Path(out_dir) / f"{kind}-{spec.key()}-{tag}" / f"rep{rep:05d}.json"


def _run_reps(kind, spec, what, config, tuning, out_dir, workers):
    fn = _rep_tests if kind == "level" else _rep_coverage
    results = {}
    todo = []
    for rep in range(spec.repetitions):
        path = _rep_path(out_dir, kind, spec, what, rep)
        if path is not None and path.exists():
            results[rep] = json.loads(path.read_text())
        else:
            todo.append(rep)

    def store(rep, res):
        results[rep] = res
        path = _rep_path(out_dir, kind, spec, what, rep)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(res))

    if workers and workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {rep: ex.submit(fn, spec, rep, what, config, tuning) for rep in todo}
            for rep in todo:
                store(rep, futs[rep].result())
    else:
        for rep in todo:
            store(rep, fn(spec, rep, what, config, tuning))
    return [results[r] for r in range(spec.repetitions)]


def run_level_power(specs: Sequence[ScenarioSpec], tests: Sequence[str], *, alpha: float = 0.05,
                    config: FitConfig = FitConfig(), out_dir=None, workers: int = 1) -> list:
    """Rejection rates at level ``alpha`` for every (scenario, test) cell.

    Robust tests use FRB p-values (``N_bootstrap`` replicates); the Gaussian
    tests use their chi-squared p-values.
    """
    for t in tests:
        if t not in TESTS:
            raise ConfigError(f"unknown test {t!r}; choose from {TESTS}")
    out = []
    for spec in specs:
        tuning = robust.tuning_for(spec.m)
        t0 = time.time()
        reps = _run_reps("level", spec, tuple(tests), config, tuning, out_dir, workers)
        dt = time.time() - t0
        for t in tests:
            ps = [r[t] for r in reps if r.get(t) is not None]
            fails = len(reps) - len(ps)
            rate = float(np.mean(np.array(ps) < alpha)) if ps else float("nan")
            out.append(ExperimentResult(spec.cell(), t, rate, _binom_se(rate, len(ps)),
                                        len(ps), fails, None, dt, [r.get(t) for r in reps]))
    return out


def run_coverage(specs: Sequence[ScenarioSpec], methods: Sequence[str] = CI_METHODS, *,
                 config: FitConfig = FitConfig(), out_dir=None,
                 workers: int = 1) -> list:
    """Coverage and mean length of 95% MM intervals for the slopes, averaged over slopes."""
    for mth in methods:
        if mth not in CI_METHODS:
            raise ConfigError(f"unknown interval method {mth!r}")
    out = []
    for spec in specs:
        tuning = robust.tuning_for(spec.m)
        t0 = time.time()
        reps = _run_reps("coverage", spec, tuple(methods), config, tuning, out_dir, workers)
        dt = time.time() - t0
        for mth in methods:
            vals = [r[mth] for r in reps if r.get(mth) is not None]
            cov = float(np.mean([v["coverage"] for v in vals])) if vals else float("nan")
            length = float(np.mean([v["length"] for v in vals])) if vals else float("nan")
            out.append(ExperimentResult(spec.cell(), mth, cov,
                                        _binom_se(cov, len(vals)), len(vals),
                                        len(reps) - len(vals), length, dt,
                                        [r.get(mth) for r in reps]))
    return out


def write_results_csv(results: Sequence[ExperimentResult], path):
    rows = [r.as_dict() for r in results]
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v)
                        for k, v in r.items()})


def write_repetitions_csv(results: Sequence[ExperimentResult], path):
    """One row per cell, quantity and repetition."""
    with open(path, "w", newline="") as fh:
        w = None
        for res in results:
            for rep, v in enumerate(res.per_rep):
                row = {k: (json.dumps(x) if isinstance(x, list) else x) for k, x in res.cell.items()}
                row.update({"quantity": res.quantity, "rep": rep})
                if isinstance(v, dict):
                    row.update({"p_value": None, "coverage": v["coverage"], "length": v["length"]})
                else:
                    row.update({"p_value": v, "coverage": None, "length": None})
                if w is None:
                    w = csv.DictWriter(fh, fieldnames=list(row))
                    w.writeheader()
                w.writerow(row)


def summary_json(results: Sequence[ExperimentResult]) -> str:
    return json.dumps([r.as_dict() for r in results], indent=2)
