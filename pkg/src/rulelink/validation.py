"""Input validation helpers used by the estimator and pipeline entry points.

These raise on bad input; :func:`rulelink.corpus.validate_dataset` is the
report-only variant.
"""
from __future__ import annotations

import numpy as np

from .corpus import Dataset, validate_dataset
from .errors import DatasetError, FeatureError
from .simfeatures import FeatureTable


def check_dataset(ds: Dataset) -> Dataset:
    """Raise DatasetError listing every invariant violation, if any."""
    report = validate_dataset(ds)
    if report.violations:
        raise DatasetError(
            f"dataset {ds.name!r} has {len(report.violations)} violations: "
            + "; ".join(report.violations[:5])
        )
    return ds


def check_table_covers(table: FeatureTable, ds: Dataset, names=None) -> FeatureTable:
    """Raise FeatureError unless the table has a row for every pair and
    a column for every requested feature name."""
    for name in names or []:
        if name not in table.feature_names:
            raise FeatureError(f"feature table lacks column {name!r}")
    for inst in ds.instances:
        for cand in inst.candidates:
            if (inst.mention.id, cand.id) not in table.rows:
                raise FeatureError(
                    f"feature table lacks row ({inst.mention.id!r}, {cand.id!r})"
                )
    return table


def check_unit_interval(values, what: str):
    arr = np.asarray(values, dtype=float)
    if arr.size and (np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(~np.isfinite(arr))):
        raise ValueError(f"{what} must lie in [0, 1]")
    return arr
