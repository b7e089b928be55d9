"""Command line front end.

    robsur fit        --estimator mm
    robsur ci         --N 1000 --seed 0
    robsur test-coef  --restrict "equal 1:Shares 2:Shares" --restrict "equal 1:Capital 2:Capital"
    robsur test-diag  --estimator mm --N 1000 --seed 42
    robsur diagnose
    robsur simulate   --kind level --n 100 --reps 300 --N 500

Without ``--data`` the bundled Grunfeld investment data is used. Settings come
from an optional JSON file (``--config``) and are overridden by flags. The JSON
report embeds the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import __version__, diagnostics, inference, robust, simulation
from .errors import ConfigError, RobSurError
from .io import GRUNFELD_BLOCKS, dataset_from_columns, grunfeld_path, read_csv_columns
from .model import SurDataset, as_design, mle_fit
from .rho import tuning_for

log = logging.getLogger("robsur")

COMMANDS = ("fit", "ci", "test-coef", "test-diag", "diagnose", "simulate")
ESTIMATORS = ("mle", "s", "mm")


@dataclass
class RunConfig:
    command: str = "fit"
    dataset: Optional[str] = None           # None: bundled Grunfeld data
    blocks: Optional[list] = None           # list of block dicts; None with bundled data
    label_column: Optional[str] = None
    estimator: str = "mm"
    breakdown: float = 0.5
    efficiency: float = 0.9
    N: int = 1000
    seed: int = 0
    n_subsamples: int = 500
    level: float = 0.95
    methods: list = field(default_factory=lambda: list(inference.METHODS))
    quantile: float = 0.975
    restrict: list = field(default_factory=list)
    R: Optional[list] = None
    q: Optional[list] = None
    output: Optional[str] = None
    csv: Optional[str] = None
    threads: int = 1
    # simulate
    kind: str = "level"
    scenarios: Optional[list] = None
    tests: list = field(default_factory=lambda: list(simulation.TESTS))
    out_dir: Optional[str] = None

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if not 0 < self.breakdown <= 0.5:
            raise ConfigError("breakdown must lie in (0, 0.5]")
        if not 0 < self.efficiency < 1:
            raise ConfigError("efficiency must lie in (0, 1)")
        if self.N < 0 or self.n_subsamples < 1 or self.threads < 1:
            raise ConfigError("N must be >= 0, n_subsamples and threads >= 1")
        if self.dataset is not None and not self.blocks:
            raise ConfigError("a dataset path needs a block specification")
        if self.kind not in ("level", "coverage"):
            raise ConfigError("kind must be 'level' or 'coverage'")
        if self.q is not None and self.R is None:
            raise ConfigError("q given without R")
        return self


def _config_from_file(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return d


# --------------------------------------------------------------------------
# report formatting


def _num(x):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.ndarray):
        return [_num(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {str(k): _num(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    return x


class _Encoder(json.JSONEncoder):
    def iterencode(self, o, _one_shot=False):
        return super().iterencode(_num(o), _one_shot)

    def default(self, o):
        if hasattr(o, "as_dict"):
            return _num(o.as_dict())
        return super().default(o)


def format_report(report: dict) -> str:
    # floats are written with the shortest repr that round-trips exactly
    return json.dumps(report, cls=_Encoder, indent=2, sort_keys=False) + "\n"


# --------------------------------------------------------------------------
# commands


def _load(cfg: RunConfig):
    if cfg.dataset is None:
        cols = read_csv_columns(grunfeld_path())
        blocks = [b.as_dict() for b in GRUNFELD_BLOCKS] if cfg.blocks is None else cfg.blocks
        label_col = cfg.label_column or "year"
    else:
        cols = read_csv_columns(cfg.dataset)
        blocks, label_col = cfg.blocks, cfg.label_column
    data = dataset_from_columns(cols, blocks)
    labels = None
    if label_col is not None:
        if label_col not in cols:
            raise ConfigError(f"label column {label_col!r} not in dataset")
        v = cols[label_col]
        labels = [str(int(x)) if float(x).is_integer() else str(x) for x in v]
    return data, labels, [b if isinstance(b, dict) else b.as_dict() for b in blocks]


def _fit_config(cfg: RunConfig) -> robust.FitConfig:
    return robust.FitConfig(n_subsamples=cfg.n_subsamples, seed=cfg.seed)


def _restriction(cfg: RunConfig, data: SurDataset):
    if cfg.R is not None:
        R = np.atleast_2d(np.asarray(cfg.R, dtype=float))
        q = np.zeros(R.shape[0]) if cfg.q is None else np.asarray(cfg.q, dtype=float)
        if R.shape[1] != data.p:
            raise ConfigError(f"R has {R.shape[1]} columns, model has p = {data.p}")
        return robust.RestrictionSpec(R=R, q=q)
    if not cfg.restrict:
        raise ConfigError("test-coef needs --restrict or R/q in the config")
    return inference.parse_restriction(cfg.restrict, data)


def _coef_table(data, beta):
    return {lab: float(b) for lab, b in zip(data.coef_labels(), beta)}


def _cov_block(Sigma):
    Sigma = np.asarray(Sigma)
    s = np.sqrt(np.diag(Sigma))
    return {"Sigma": Sigma, "correlation": Sigma / np.outer(s, s)}


def cmd_fit(cfg, data, tuning):
    if cfg.estimator == "mle":
        f = mle_fit(data)
        return {"estimator": "mle", "coefficients": _coef_table(data, f.beta),
                **_cov_block(f.Sigma), "loglik": f.loglik, "iterations": f.iterations}
    f = robust.fit(data, _fit_config(cfg), tuning)
    if cfg.estimator == "s":
        return {"estimator": "s", "coefficients": _coef_table(data, f.beta_s),
                **_cov_block(f.s.Sigma), "scale": f.s.scale, "Gamma": f.s.Gamma,
                "iterations": f.s.iterations, "weights": f.s.weights}
    return {"estimator": "mm", "coefficients": _coef_table(data, f.beta_mm),
            **_cov_block(f.mm.Sigma), "scale": f.mm.scale, "s_scale": f.mm.s_scale,
            "Gamma": f.mm.Gamma, "iterations": f.mm.iterations, "weights": f.mm.weights,
            "s_estimate": {"coefficients": _coef_table(data, f.beta_s), "Sigma": f.s.Sigma}}


def _mle_intervals(data, level):
    f = mle_fit(data)
    design = as_design(data)
    Sinv = np.linalg.inv(f.Sigma)
    A = np.einsum("nip,ij,njq->pq", design.x, Sinv, design.x)
    se = np.sqrt(np.diag(np.linalg.inv(A)))
    z = stats.norm.ppf(0.5 + level / 2)
    return [{"parameter": lab, "method": "AS", "level": level, "estimate": b,
             "lower": b - z * s, "upper": b + z * s}
            for lab, b, s in zip(data.coef_labels(), f.beta, se)]


def cmd_ci(cfg, data, tuning):
    if cfg.estimator == "s":
        raise ConfigError("intervals are available for the mm and mle estimators")
    if cfg.estimator == "mle":
        return {"estimator": "mle", "intervals": _mle_intervals(data, cfg.level)}
    f = robust.fit(data, _fit_config(cfg), tuning)
    reps = None
    if "BP" in cfg.methods or "BCa" in cfg.methods:
        reps = inference.frb_replicates(f, data, cfg.N, cfg.seed, coef_labels=data.coef_labels())
        if cfg.csv:
            reps.to_csv(cfg.csv)
    cis = inference.frb_intervals(f, data, cfg.N, cfg.seed, cfg.level, cfg.methods,
                                  replicates=reps)
    out = {"estimator": "mm", "intervals": [c.as_dict() for c in cis]}
    if reps is not None:
        out["N_effective"] = reps.n_effective
    return out


def _test_report(res, cfg):
    if cfg.csv and res.replicate_statistics.size:
        res.to_csv(cfg.csv)
    return {"test": json.loads(res.to_json())}


def cmd_test_coef(cfg, data, tuning):
    rs = _restriction(cfg, data)
    if cfg.estimator == "mle":
        res = inference.lr_test_mle(data, rs, cfg.N, cfg.seed)
    else:
        res = inference.lr_test_coef(data, rs, cfg.estimator.upper(), cfg.N, cfg.seed,
                                     _fit_config(cfg), tuning)
    out = _test_report(res, cfg)
    out["restriction"] = {"R": rs.R, "q": rs.q}
    return out


def cmd_test_diag(cfg, data, tuning):
    if cfg.estimator == "mle":
        res = inference.lm_test_mle(data, cfg.N, cfg.seed)
    else:
        res = inference.lm_diag_test(data, cfg.estimator.upper(), cfg.N, cfg.seed,
                                     _fit_config(cfg), tuning)
    return _test_report(res, cfg)


def cmd_diagnose(cfg, data, tuning, labels):
    if cfg.estimator != "mm":
        raise ConfigError("diagnostics use the mm estimator")
    f = robust.fit(data, _fit_config(cfg), tuning)
    rep = diagnostics.diagnose(f, data, _fit_config(cfg), cfg.quantile, labels)
    if cfg.csv:
        rep.to_csv(cfg.csv)
    out = rep.as_dict()
    out["flagged"] = {cls: [r.label if r.label is not None else r.index for r in rep.flagged(cls)]
                      for cls in (diagnostics.VERTICAL, diagnostics.BAD_LEVERAGE,
                                  diagnostics.GOOD_LEVERAGE)}
    return out


def cmd_simulate(cfg):
    specs = [simulation.ScenarioSpec(**s) for s in (cfg.scenarios or [{}])]
    fc = robust.FitConfig(n_subsamples=cfg.n_subsamples)
    if cfg.kind == "level":
        res = simulation.run_level_power(specs, cfg.tests, config=fc, out_dir=cfg.out_dir,
                                         workers=cfg.threads)
    else:
        res = simulation.run_coverage(specs, cfg.methods, config=fc, out_dir=cfg.out_dir,
                                      workers=cfg.threads)
    if cfg.csv:
        simulation.write_repetitions_csv(res, cfg.csv)
    return {"cells": [r.as_dict() for r in res]}


def run_command(cfg: RunConfig) -> dict:
    cfg.validate()
    report = {"robsur_version": __version__, "command": cfg.command}
    if cfg.command == "simulate":
        specs = [simulation.ScenarioSpec(**s) for s in (cfg.scenarios or [{}])]
        resolved = asdict(cfg)
        resolved["scenarios"] = [asdict(s) for s in specs]
        resolved["tuning"] = {str(m): tuning_for(m).as_dict() for m in sorted({s.m for s in specs})}
        report["config"] = resolved
        report["result"] = cmd_simulate(cfg)
        return report
    data, labels, blocks = _load(cfg)
    tuning = tuning_for(data.m, cfg.breakdown, cfg.efficiency)
    resolved = asdict(cfg)
    resolved["blocks"] = blocks
    resolved["dataset"] = cfg.dataset or "bundled:grunfeld.csv"
    resolved["tuning"] = tuning.as_dict()
    resolved["n"], resolved["m"], resolved["p"] = data.n, data.m, data.p
    report["config"] = resolved
    if cfg.command == "fit":
        report["result"] = cmd_fit(cfg, data, tuning)
    elif cfg.command == "ci":
        report["result"] = cmd_ci(cfg, data, tuning)
    elif cfg.command == "test-coef":
        report["result"] = cmd_test_coef(cfg, data, tuning)
    elif cfg.command == "test-diag":
        report["result"] = cmd_test_diag(cfg, data, tuning)
    else:
        report["result"] = cmd_diagnose(cfg, data, tuning, labels)
    return report


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robsur", description="Robust SUR estimation and inference")
    p.add_argument("--version", action="version", version=f"robsur {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file; flags override its entries")
        sp.add_argument("--data", dest="dataset", help="wide CSV, one row per observation")
        sp.add_argument("--blocks", help="block spec as JSON list or path to a JSON file")
        sp.add_argument("--label-column")
        sp.add_argument("--estimator", choices=ESTIMATORS)
        sp.add_argument("--breakdown", type=float)
        sp.add_argument("--efficiency", type=float)
        sp.add_argument("--N", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-subsamples", type=int)
        sp.add_argument("--level", type=float)
        sp.add_argument("--methods", nargs="+", choices=inference.METHODS)
        sp.add_argument("--quantile", type=float)
        sp.add_argument("--restrict", action="append",
                        help='"equal A:x B:x" or "coef A:x = 0"; repeat for more rows')
        sp.add_argument("--output", "-o", help="write the JSON report here instead of stdout")
        sp.add_argument("--csv", help="CSV sidecar (replicates, diagnostics or repetitions)")
        sp.add_argument("--threads", type=int)
        if name == "simulate":
            sp.add_argument("--kind", choices=("level", "coverage"))
            sp.add_argument("--tests", nargs="+", choices=simulation.TESTS)
            sp.add_argument("--out-dir", help="per-repetition result files (resumable)")
            sp.add_argument("--n", type=int, nargs="+", help="sample sizes")
            sp.add_argument("--reps", type=int)
            sp.add_argument("--d", type=float, nargs="+")
            sp.add_argument("--tau", type=float, nargs="+")
            sp.add_argument("--sigma", choices=simulation.SIGMA_KINDS)
            sp.add_argument("--errors", choices=simulation.ERROR_KINDS)
            sp.add_argument("--contamination", type=float, nargs="+")
            sp.add_argument("--sim-seed", type=int)
            sp.add_argument("--paper-scale", action="store_true",
                            help="1000 repetitions and 1000 bootstrap samples")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


_SIM_FLAGS = ("n", "reps", "d", "tau", "sigma", "errors", "contamination", "sim_seed",
              "paper_scale")


def _scenario_grid(args, base: Optional[list], N: Optional[int]) -> list:
    grid = base or [{}]
    axes = {"n": args.n, "d": args.d, "tau": args.tau, "contamination": args.contamination}
    for key, values in axes.items():
        if values:
            grid = [dict(g, **{key: v}) for g in grid for v in values]
    for g in grid:
        if args.sigma:
            g["sigma"] = args.sigma
        if args.errors:
            g["errors"] = args.errors
        if args.sim_seed is not None:
            g["seed"] = args.sim_seed
        if args.reps:
            g["repetitions"] = args.reps
        if N is not None:
            g["N_bootstrap"] = N
        if args.paper_scale:
            g["repetitions"], g["N_bootstrap"] = 1000, 1000
    return grid


def config_from_args(args) -> RunConfig:
    d = _config_from_file(args.config) if args.config else {}
    d["command"] = args.command
    for f in fields(RunConfig):
        if f.name in ("command", "scenarios", "blocks", "restrict"):
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    if args.restrict:
        d["restrict"] = args.restrict
    if args.blocks:
        text = args.blocks
        if Path(text).exists():
            text = Path(text).read_text()
        try:
            d["blocks"] = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--blocks is not valid JSON: {exc}") from exc
    if args.command == "simulate":
        d["scenarios"] = _scenario_grid(args, d.get("scenarios"), args.N)
    try:
        cfg = RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        report = run_command(cfg)
    except RobSurError as exc:
        err = {"error": exc.category, "type": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(err) + "\n")
        return exc.exit_code
    text = format_report(report)
    if cfg.output:
        Path(cfg.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
