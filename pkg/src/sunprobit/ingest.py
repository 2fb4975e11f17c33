"""CSV ingestion and predictor preprocessing for the command line interface."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, MalformedCsv, NonNumericPredictor, UnknownLabel
from .models import Dataset, Family, ModelSpec

TARGET_SD = 0.5
INTERCEPT = "(intercept)"


@dataclass
class Table:
    header: list
    rows: list

    @property
    def n(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        try:
            j = self.header.index(name)
        except ValueError:
            raise MalformedCsv(f"missing column {name!r}") from None
        return [r[j] for r in self.rows]

    def has(self, name: str) -> bool:
        return name in self.header


def read_table(path) -> Table:
    """Header plus rows of strings; blank lines are skipped."""
    try:
        with open(Path(path), newline="") as fh:
            records = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    except csv.Error as exc:
        raise MalformedCsv(f"{path}: {exc}") from exc
    if not records:
        raise MalformedCsv(f"{path}: no header")
    header = [c.strip() for c in records[0]]
    if len(set(header)) != len(header) or any(not c for c in header):
        raise MalformedCsv(f"{path}: empty or duplicate column names")
    rows = []
    for k, r in enumerate(records[1:], start=2):
        if len(r) != len(header):
            raise MalformedCsv(f"{path} line {k}: {len(r)} fields, header has {len(header)}")
        rows.append([c.strip() for c in r])
    return Table(header, rows)


def _numeric(values: list, name: str) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        try:
            out[i] = float(v)
        except ValueError:
            raise NonNumericPredictor(f"column {name!r} row {i + 1}: {v!r} is not numeric") from None
        if not math.isfinite(out[i]):
            raise NonNumericPredictor(f"column {name!r} row {i + 1}: {v!r} is not finite")
    return out


def _is_int(v: str) -> bool:
    try:
        int(v)
    except ValueError:
        return False
    return True


@dataclass
class Preprocessor:
    """Everything needed to map a new table onto the fitted design."""

    family: Family
    L: int
    columns: list
    attributes: list | None = None
    label_map: list | None = None
    center: list | None = None
    scale: list | None = None
    intercept: bool = False
    report: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        if self.family is Family.DISCRETE_CHOICE:
            return len(self.columns)
        return len(self.columns) + int(self.intercept)

    @property
    def coefficient_names(self) -> list:
        names = ([INTERCEPT] if self.intercept else []) + list(self.columns)
        if self.family is Family.DISCRETE_CHOICE:
            return names
        # coefficient blocks run over the L-1 free classes
        return [f"{c}[{k}]" for k in range(1, self.L) for c in names]

    def labels(self, values: list) -> np.ndarray:
        if self.label_map is None:
            out = []
            for v in values:
                if not _is_int(v) or not 1 <= int(v) <= self.L:
                    raise UnknownLabel(f"label {v!r} outside 1..{self.L}")
                out.append(int(v))
            return np.array(out, dtype=int)
        index = {lab: k + 1 for k, lab in enumerate(self.label_map)}
        try:
            return np.array([index[v] for v in values], dtype=int)
        except KeyError as exc:
            raise UnknownLabel(f"label {exc.args[0]!r} not seen in training data") from None

    def raw_design(self, table: Table) -> np.ndarray:
        if self.family is Family.DISCRETE_CHOICE:
            X = np.empty((table.n, self.L, len(self.columns)))
            for j, a in enumerate(self.columns):
                for k in range(self.L):
                    X[:, k, j] = _numeric(table.column(f"{a}_{k + 1}"), f"{a}_{k + 1}")
            return X
        X = np.empty((table.n, len(self.columns)))
        for j, c in enumerate(self.columns):
            X[:, j] = _numeric(table.column(c), c)
        return X

    def design(self, table: Table) -> np.ndarray:
        X = self.raw_design(table)
        if self.center is not None:
            X = (X - np.asarray(self.center)) / np.asarray(self.scale)
        if self.intercept and self.family is not Family.DISCRETE_CHOICE:
            X = np.column_stack([np.ones(table.n), X])
        return X

    def spec(self, Sigma=None) -> ModelSpec:
        return ModelSpec(self.family, self.L, self.p, Sigma)

    def to_json(self) -> dict:
        return {
            "family": self.family.value, "L": self.L, "columns": self.columns,
            "attributes": self.attributes, "label_map": self.label_map,
            "center": self.center, "scale": self.scale, "intercept": self.intercept,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Preprocessor":
        return cls(family=Family.parse(doc["family"]), L=int(doc["L"]), columns=list(doc["columns"]),
                   attributes=doc.get("attributes"), label_map=doc.get("label_map"),
                   center=doc.get("center"), scale=doc.get("scale"),
                   intercept=bool(doc.get("intercept", False)))


def _label_setup(values: list, L: int | None):
    if all(_is_int(v) for v in values):
        ints = [int(v) for v in values]
        L = L if L is not None else max(max(ints), 2)
        return None, L
    label_map = list(dict.fromkeys(values))
    if L is None:
        L = max(len(label_map), 2)
    if len(label_map) > L:
        raise UnknownLabel(f"{len(label_map)} distinct labels but L = {L}")
    return label_map, L


def fit_preprocessor(table: Table, cfg: RunConfig) -> Preprocessor:
    """Infer labels, columns and standardization from training data."""
    family = cfg.family
    if family is None:
        family = Family.DISCRETE_CHOICE if cfg.attributes else Family.SEQUENTIAL
    if family is Family.DISCRETE_CHOICE and not cfg.attributes:
        raise ConfigError("DiscreteChoice needs 'attributes' naming per-class columns")
    if not table.has(cfg.response):
        raise MalformedCsv(f"response column {cfg.response!r} not in header")
    y_raw = table.column(cfg.response)
    if not y_raw and cfg.L is None:
        raise ConfigError("L must be given when the training data has no rows")
    label_map, L = _label_setup(y_raw, cfg.L)
    report = {"n": table.n, "L": L, "dropped": [], "standardized": False}
    if label_map is not None:
        report["label_map"] = {lab: k + 1 for k, lab in enumerate(label_map)}

    if family is Family.DISCRETE_CHOICE:
        columns = list(cfg.attributes)
    elif cfg.predictors is not None:
        columns = list(cfg.predictors)
    else:
        columns = [c for c in table.header if c != cfg.response]
    pre = Preprocessor(family=family, L=L, columns=columns,
                       attributes=list(cfg.attributes) if cfg.attributes else None,
                       label_map=label_map,
                       intercept=cfg.intercept and family is not Family.DISCRETE_CHOICE,
                       report=report)
    pre.labels(y_raw)
    X = pre.raw_design(table)
    if table.n >= 1:
        flat = X.reshape(-1, len(columns)) if family is Family.DISCRETE_CHOICE else X
        keep = []
        for j, c in enumerate(columns):
            col = flat[:, j]
            if np.all(col == 0):
                report["dropped"].append({"column": c, "reason": "all zero"})
            elif cfg.standardize and table.n >= 2 and np.all(col == col[0]):
                report["dropped"].append({"column": c, "reason": "constant"})
            else:
                keep.append(j)
        pre.columns = [columns[j] for j in keep]
        flat = flat[:, keep]
        if cfg.standardize and table.n >= 2 and keep:
            center = flat.mean(axis=0)
            scale = flat.std(axis=0, ddof=1) / TARGET_SD
            pre.center, pre.scale = center.tolist(), scale.tolist()
            report["standardized"] = True
        elif cfg.standardize and keep:
            report["standardize_skipped"] = "fewer than two rows"
    if pre.p < 1:
        raise NonNumericPredictor("no usable predictors remain after preprocessing")
    report["columns"] = pre.columns
    return pre


def ingest(path, cfg: RunConfig) -> tuple[Dataset, Preprocessor]:
    """Read training data and return the dataset with its preprocessing record."""
    table = read_table(path)
    pre = fit_preprocessor(table, cfg)
    data = Dataset(pre.labels(table.column(cfg.response)), pre.design(table))
    return data, pre


def ingest_new(path, pre: Preprocessor, response: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Design for new rows plus their labels when the response column is present."""
    table = read_table(path)
    X = pre.design(table)
    y = pre.labels(table.column(response)) if table.has(response) else None
    return X, y
