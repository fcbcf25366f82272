"""Dataset ingestion, schema handling, leakage-safe splits and the invertible
mixed-type preprocessing (Gaussian quantile map for numerics, integer codes
for categoricals).

Encoded matrices always put the numeric columns first (schema order) followed
by the categorical columns (schema order); ``Preprocessor.numeric_columns`` and
``Preprocessor.categorical_columns`` give the exact layout.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

log = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"
FORMAT_VERSION = 1
_MISSING_TOKENS = {"", "nan", "NaN", "NA", "N/A", "null", "None", "inf", "-inf", "Infinity", "-Infinity"}


class DataError(ValueError):
    """Raised for malformed input data (missing files, bad cells, schema mismatch)."""


class LeakageError(RuntimeError):
    """Raised when a fitted transform is asked to fit on a non-train split."""


@dataclass
class FeatureSchema:
    columns: list[tuple[str, str]]
    vocab: dict[str, list[str]] = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        self.columns = [(str(n), str(k)) for n, k in self.columns]
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in schema: {names}")
        for name, kind in self.columns:
            if kind not in (NUMERIC, CATEGORICAL):
                raise DataError(f"column {name!r}: unknown kind {kind!r}")
            if kind == CATEGORICAL:
                values = self.vocab.get(name)
                if values is None:
                    raise DataError(f"categorical column {name!r} has no vocabulary")
                if len(set(values)) != len(values):
                    raise DataError(f"vocabulary of {name!r} has repeated values")
        if self.label is not None and self.label not in names:
            raise DataError(f"label column {self.label!r} not among columns")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def kind(self, name: str) -> str:
        return dict(self.columns)[name]

    @property
    def feature_columns(self) -> list[str]:
        return [n for n, _ in self.columns if n != self.label]

    @property
    def numeric_features(self) -> list[str]:
        return [n for n, k in self.columns if k == NUMERIC and n != self.label]

    @property
    def categorical_features(self) -> list[str]:
        return [n for n, k in self.columns if k == CATEGORICAL and n != self.label]

    def validate(self, frame: pd.DataFrame, features_only: bool = False) -> int:
        """Count schema violations (unknown categories, non-finite numerics)."""
        cols = self.feature_columns if features_only else self.names
        missing = [c for c in cols if c not in frame.columns]
        if missing:
            raise DataError(f"columns missing from frame: {missing}")
        bad = 0
        for name in cols:
            if self.kind(name) == NUMERIC:
                bad += int((~np.isfinite(frame[name].to_numpy(dtype=float))).sum())
            else:
                bad += int((~frame[name].astype(str).isin(self.vocab[name])).sum())
        return bad

    def to_dict(self) -> dict:
        return {
            "format": "mmsynth.schema",
            "version": FORMAT_VERSION,
            "columns": [{"name": n, "kind": k} for n, k in self.columns],
            "vocab": {k: list(v) for k, v in self.vocab.items()},
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        _check_format(d, "mmsynth.schema")
        return cls(
            columns=[(c["name"], c["kind"]) for c in d["columns"]],
            vocab={k: list(v) for k, v in d["vocab"].items()},
            label=d.get("label"),
        )


def _check_format(d: Mapping, expected: str) -> None:
    if d.get("format") != expected:
        raise DataError(f"expected a {expected!r} document, got {d.get('format')!r}")
    if d.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported {expected} version {d.get('version')!r}")


def _parse_float(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(
    path: str | os.PathLike,
    schema: FeatureSchema | None = None,
    label: str | None = None,
    categorical_threshold: int = 2,
) -> tuple[pd.DataFrame, FeatureSchema]:
    """Read a headed CSV into a frame of float numerics and string categoricals.

    Without ``schema`` one is inferred: a column is categorical when any cell
    fails to parse as a finite number or when it has at most
    ``categorical_threshold`` distinct values. The label column is always
    categorical. Missing cells are rejected with their row/column position.
    """
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    raw.columns = [c.strip() for c in raw.columns]
    if raw.columns.duplicated().any():
        raise DataError(f"{path}: duplicate header names")

    for col in raw.columns:
        values = raw[col].str.strip()
        raw[col] = values
        bad = values.isin(_MISSING_TOKENS - {"inf", "-inf", "Infinity", "-Infinity"})
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            # +2: one for the header line, one for 1-based numbering
            raise DataError(f"{path}: missing value at line {row + 2}, column {col!r}")

    if schema is None:
        if label is not None and label not in raw.columns:
            raise DataError(f"{path}: label column {label!r} not found")
        columns, vocab = [], {}
        for col in raw.columns:
            parsed = [_parse_float(v) for v in raw[col]]
            numeric_ok = all(p is not None for p in parsed)
            distinct = raw[col].nunique()
            if col == label or not numeric_ok or distinct <= categorical_threshold:
                columns.append((col, CATEGORICAL))
                vocab[col] = sorted(raw[col].unique().tolist())
            else:
                columns.append((col, NUMERIC))
        schema = FeatureSchema(columns=columns, vocab=vocab, label=label)
    else:
        if list(raw.columns) != schema.names:
            raise DataError(
                f"{path}: columns {list(raw.columns)} do not match schema {schema.names}"
            )

    frame = pd.DataFrame(index=raw.index)
    for name, kind in schema.columns:
        if kind == NUMERIC:
            out = np.empty(len(raw))
            for i, cell in enumerate(raw[name]):
                v = _parse_float(cell)
                if v is None:
                    raise DataError(
                        f"{path}: unparseable numeric cell {cell!r} at line {i + 2}, column {name!r}"
                    )
                out[i] = v
            frame[name] = out
        else:
            frame[name] = raw[name].astype(str)
    return frame, schema


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split index sets overlap")

    def indices(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def split(n_rows: int, seed: int, fractions: tuple[float, float] = (0.70, 0.15)) -> DatasetSplit:
    """Random 70/15/15 partition of ``range(n_rows)``; remainder rows go to test."""
    if n_rows < 10:
        raise DataError(f"need at least 10 rows to split, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(math.floor(fractions[0] * n_rows + 1e-9))
    n_val = int(math.floor(fractions[1] * n_rows + 1e-9))
    return DatasetSplit(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
    )


@dataclass
class QuantileMap:
    """Monotone piecewise-linear map between data values and N(0,1) quantiles."""

    xs: np.ndarray  # strictly increasing data grid
    gs: np.ndarray  # Gaussian values at the grid, same length
    constant: bool = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.constant:
            return np.zeros_like(x)
        return np.interp(x, self.xs, self.gs)

    def inverse(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if self.constant:
            return np.full_like(g, self.xs[0])
        return np.interp(g, self.gs, self.xs)

    @property
    def spacing(self) -> float:
        return float(np.diff(self.xs).max()) if len(self.xs) > 1 else 0.0


def fit_quantile_map(values: np.ndarray, max_grid: int = 1000) -> QuantileMap:
    """Empirical-CDF quantile map, ``x_(r) -> Phi^-1(r / (n + 1))``.

    Tied values share their mean rank so the grid stays strictly increasing.
    With more than ``max_grid`` distinct values the grid is thinned evenly.
    """
    values = np.sort(np.asarray(values, dtype=float))
    n = len(values)
    uniq, first, counts = np.unique(values, return_index=True, return_counts=True)
    if len(uniq) == 1:
        return QuantileMap(xs=uniq.copy(), gs=np.zeros(1), constant=True)
    mean_rank = first + (counts + 1) / 2.0  # 1-based mean rank of each tie group
    gs = ndtri(mean_rank / (n + 1))
    if len(uniq) > max_grid:
        keep = np.unique(np.linspace(0, len(uniq) - 1, max_grid).round().astype(int))
        uniq, gs = uniq[keep], gs[keep]
    return QuantileMap(xs=uniq, gs=gs)


@dataclass
class Preprocessor:
    schema: FeatureSchema
    quantile_maps: dict[str, QuantileMap]
    categories: dict[str, list[str]]
    fit_split: str = "train"
    unknown: str = "reject"

    @property
    def numeric_columns(self) -> list[str]:
        return self.schema.numeric_features

    @property
    def categorical_columns(self) -> list[str]:
        return self.schema.categorical_features

    @property
    def cardinalities(self) -> list[int]:
        return [len(self.categories[c]) for c in self.categorical_columns]

    @property
    def n_features(self) -> int:
        return len(self.numeric_columns) + len(self.categorical_columns)

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        return transform(self, frame)

    def inverse_transform(self, encoded: np.ndarray) -> pd.DataFrame:
        return inverse_transform(self, encoded)

    def to_dict(self) -> dict:
        return {
            "format": "mmsynth.preprocessor",
            "version": FORMAT_VERSION,
            "fit_split": self.fit_split,
            "unknown": self.unknown,
            "schema": self.schema.to_dict(),
            "numeric": {
                name: {"xs": qm.xs.tolist(), "gs": qm.gs.tolist(), "constant": qm.constant}
                for name, qm in self.quantile_maps.items()
            },
            "categorical": {name: list(v) for name, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Preprocessor":
        _check_format(d, "mmsynth.preprocessor")
        return cls(
            schema=FeatureSchema.from_dict(d["schema"]),
            quantile_maps={
                name: QuantileMap(np.asarray(q["xs"], float), np.asarray(q["gs"], float), q["constant"])
                for name, q in d["numeric"].items()
            },
            categories={k: list(v) for k, v in d["categorical"].items()},
            fit_split=d["fit_split"],
            unknown=d["unknown"],
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Preprocessor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_preprocessor(
    rows: pd.DataFrame,
    schema: FeatureSchema,
    split_name: str = "train",
    unknown: str = "reject",
    max_grid: int = 1000,
) -> Preprocessor:
    if split_name != "train":
        raise LeakageError(f"preprocessor may only be fitted on the train split, not {split_name!r}")
    if unknown not in ("reject", "unknown"):
        raise ValueError(f"unknown-category policy must be 'reject' or 'unknown', got {unknown!r}")
    maps = {}
    for name in schema.numeric_features:
        values = rows[name].to_numpy(dtype=float)
        maps[name] = fit_quantile_map(values, max_grid=max_grid)
        if maps[name].constant:
            log.warning("numeric column %r is constant on train; encoding it as zeros", name)
    # vocabularies are re-derived from the train rows so nothing outside train leaks in
    categories = {name: sorted(rows[name].astype(str).unique().tolist()) for name in schema.categorical_features}
    vocab = {**schema.vocab, **categories}
    fitted_schema = FeatureSchema(columns=list(schema.columns), vocab=vocab, label=schema.label)
    return Preprocessor(schema=fitted_schema, quantile_maps=maps, categories=categories,
                        fit_split=split_name, unknown=unknown)


def transform(pre: Preprocessor, frame: pd.DataFrame) -> np.ndarray:
    missing = [c for c in pre.schema.feature_columns if c not in frame.columns]
    if missing:
        raise DataError(f"frame lacks schema columns {missing}")
    out = np.empty((len(frame), pre.n_features))
    for j, name in enumerate(pre.numeric_columns):
        out[:, j] = pre.quantile_maps[name].forward(frame[name].to_numpy(dtype=float))
    offset = len(pre.numeric_columns)
    for j, name in enumerate(pre.categorical_columns):
        lookup = {v: i for i, v in enumerate(pre.categories[name])}
        values = frame[name].astype(str).to_numpy()
        codes = np.empty(len(values))
        for i, v in enumerate(values):
            code = lookup.get(v)
            if code is None:
                if pre.unknown == "reject":
                    raise DataError(f"unseen category {v!r} in column {name!r} (row {i})")
                code = len(lookup)
            codes[i] = code
        out[:, offset + j] = codes
    return out


def inverse_transform(pre: Preprocessor, encoded: np.ndarray) -> pd.DataFrame:
    encoded = np.asarray(encoded, dtype=float)
    if encoded.ndim != 2 or encoded.shape[1] != pre.n_features:
        raise DataError(f"encoded matrix must have {pre.n_features} columns, got shape {encoded.shape}")
    data = {}
    for j, name in enumerate(pre.numeric_columns):
        data[name] = pre.quantile_maps[name].inverse(encoded[:, j])
    offset = len(pre.numeric_columns)
    for j, name in enumerate(pre.categorical_columns):
        vocab = np.asarray(pre.categories[name] + ["<unknown>"], dtype=object)
        codes = np.rint(encoded[:, offset + j]).astype(int)
        if codes.size and (codes.min() < 0 or codes.max() >= len(vocab)):
            raise DataError(f"category code out of range in column {name!r}")
        data[name] = vocab[codes].astype(str)
    frame = pd.DataFrame(data)
    return frame[pre.schema.feature_columns]


def one_hot(pre: Preprocessor, encoded: np.ndarray) -> np.ndarray:
    """Expand categorical codes of an encoded matrix into one-hot blocks."""
    n_num = len(pre.numeric_columns)
    parts = [encoded[:, :n_num]]
    for j, card in enumerate(pre.cardinalities):
        codes = np.rint(encoded[:, n_num + j]).astype(int)
        block = np.zeros((len(encoded), card))
        inside = (codes >= 0) & (codes < card)
        block[np.flatnonzero(inside), codes[inside]] = 1.0
        parts.append(block)
    return np.concatenate(parts, axis=1)


def labels_of(frame: pd.DataFrame, schema: FeatureSchema) -> np.ndarray:
    if schema.label is None:
        raise DataError("schema has no label column")
    return frame[schema.label].astype(str).to_numpy()


def save_json(obj, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def write_indices(indices: Iterable[int], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(i)) for i in indices))
        fh.write("\n")


def read_indices(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=int)


def subset(frame: pd.DataFrame, idx: Sequence[int]) -> pd.DataFrame:
    return frame.iloc[np.asarray(idx, dtype=int)].reset_index(drop=True)
