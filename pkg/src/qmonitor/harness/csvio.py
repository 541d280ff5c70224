"""Deterministic CSV persistence for time series."""

import numpy as np


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(series, path):
    """Write ``{column: 1-D array}`` as CSV: header row, then one row per grid time.

    Values use 17 significant digits so :func:`read_csv` restores them exactly.
    An empty mapping (or zero-length columns) gives a header-only file.
    """
    names = list(series)
    cols = [np.asarray(series[n], dtype=float) for n in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    rows = [",".join(names)]
    for values in zip(*cols):
        rows.append(",".join(_fmt(v) for v in values))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def read_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    names = lines[0].split(",") if lines and lines[0] else []
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(names))
    return {n: data[:, k] for k, n in enumerate(names)}
