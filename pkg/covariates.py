"""
Center-side derivation of the covariate matrix Y from a covariate table.

Terms:
- intercept      -> column of ones
- age            -> the numeric column `age`
- age^2          -> `age` squared
- age*sex        -> elementwise product
- sex            -> two-level text columns are encoded 0/1 by sorted level
"""

import re
from typing import Mapping, Sequence

import numpy as np

from exceptions import ConfigError, ShapeMismatch

_POWER = re.compile(r"^(?P<name>[A-Za-z_][\w.]*)\^(?P<power>\d+)$")


def encode_column(name: str, values) -> np.ndarray:
    column = np.asarray(values)
    if column.ndim != 1:
        raise ShapeMismatch(f"covariate '{name}' must be one-dimensional")
    if np.issubdtype(column.dtype, np.number) or column.dtype == bool:
        return column.astype(np.float64)
    levels = sorted(set(column.tolist()))
    if len(levels) > 2:
        raise ConfigError(
            f"covariate '{name}' has {len(levels)} levels {levels}; only two-level "
            "categorical covariates can be encoded"
        )
    return (column == levels[-1]).astype(np.float64) if len(levels) == 2 else np.zeros(column.shape)


def _lookup(table: Mapping[str, Sequence], name: str) -> np.ndarray:
    if name not in table:
        raise ConfigError(f"covariate '{name}' not found; table has {sorted(table)}")
    return encode_column(name, table[name])


def _term(table: Mapping[str, Sequence], term: str, n_rows: int) -> np.ndarray:
    term = term.strip()
    if term == "intercept":
        return np.ones(n_rows)
    if "*" in term:
        product = np.ones(n_rows)
        for factor in term.split("*"):
            product = product * _term(table, factor, n_rows)
        return product
    match = _POWER.match(term)
    if match:
        return _lookup(table, match["name"]) ** int(match["power"])
    return _lookup(table, term)


def derive_covariates(table: Mapping[str, Sequence], spec: Sequence[str]) -> np.ndarray:
    """Build the N x len(spec) covariate matrix described by `spec`."""
    if not spec:
        raise ConfigError("covariate spec is empty")
    lengths = {len(np.asarray(values)) for values in table.values()}
    if len(lengths) != 1:
        raise ShapeMismatch(f"covariate columns have different lengths: {sorted(lengths)}")
    n_rows = lengths.pop()
    return np.column_stack([_term(table, term, n_rows) for term in spec])
