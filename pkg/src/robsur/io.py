"""CSV ingestion and the bundled Grunfeld data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .model import SurDataset

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class BlockSpec:
    """Response column plus ``(label, column)`` predictor pairs for one block."""

    name: str
    response: str
    predictors: tuple = ()
    intercept: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        try:
            name, response = d.get("name", d["response"]), d["response"]
        except KeyError as exc:
            raise ConfigError(f"block spec needs a 'response' entry: {d}") from exc
        preds = d.get("predictors", [])
        if isinstance(preds, dict):
            pairs = tuple((str(k), str(v)) for k, v in preds.items())
        else:
            pairs = tuple((str(c), str(c)) for c in preds)
        return cls(str(name), str(response), pairs, bool(d.get("intercept", True)))

    def as_dict(self) -> dict:
        return {"name": self.name, "response": self.response,
                "predictors": {k: v for k, v in self.predictors},
                "intercept": self.intercept}


def read_csv_columns(path) -> dict:
    """Read a headed CSV into ``{column: float array}`` with strict parsing."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise ConfigError(f"{path}: duplicate column names")
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DimensionError(f"{path}: row {lineno} has {len(row)} cells, "
                                     f"header has {len(header)}")
            for h, cell in zip(header, row):
                try:
                    cols[h].append(float(cell))
                except ValueError:
                    raise ConfigError(f"{path}: non-numeric value {cell!r} at row "
                                      f"{lineno}, column {h!r}") from None
    return {h: np.array(v) for h, v in cols.items()}


def dataset_from_columns(columns: dict, blocks) -> SurDataset:
    specs = [b if isinstance(b, BlockSpec) else BlockSpec.from_dict(b) for b in blocks]
    if not specs:
        raise ConfigError("no blocks specified")
    n = len(next(iter(columns.values())))
    out, pred_names = [], []
    for spec in specs:
        needed = [spec.response] + [c for _, c in spec.predictors]
        missing = [c for c in needed if c not in columns]
        if missing:
            raise ConfigError(f"block {spec.name!r}: missing column(s) {missing}")
        parts, labels = [], []
        if spec.intercept:
            parts.append(np.ones(n))
            labels.append(INTERCEPT)
        for label, col in spec.predictors:
            parts.append(columns[col])
            labels.append(label)
        if not parts:
            raise ConfigError(f"block {spec.name!r} has no regressors")
        out.append((np.column_stack(parts), columns[spec.response]))
        pred_names.append(tuple(labels))
    return SurDataset(tuple(out), tuple(s.name for s in specs), tuple(pred_names))


def load_dataset(path, blocks) -> SurDataset:
    """Load a SUR dataset from a wide CSV (one row per observation)."""
    return dataset_from_columns(read_csv_columns(path), blocks)


GRUNFELD_BLOCKS = tuple(
    BlockSpec(tag, f"{tag}_Investment",
              (("Shares", f"{tag}_Shares"), ("Capital", f"{tag}_Capital")))
    for tag in ("GE", "W", "DM"))


def grunfeld_path() -> Path:
    return Path(str(resources.files("robsur") / "data" / "grunfeld.csv"))


def grunfeld(with_years: bool = False):
    """Investment data for General Electric, Westinghouse and Diamond Match, 1935-1954."""
    cols = read_csv_columns(grunfeld_path())
    data = dataset_from_columns(cols, GRUNFELD_BLOCKS)
    if with_years:
        return data, cols["year"].astype(int)
    return data
