"""Deterministic text formats: CSV matrices, design sidecars, JSON.

Floats are written with ``repr`` (shortest string that round-trips to the
same double), comma separated, ``\\n`` line endings, so writing what was
read reproduces the file byte for byte.
"""

import csv
import io
import json
import logging
import math
from pathlib import Path
import warnings

import numpy as np

from .errors import InvalidInputError, ParseError
from .model import Hypothesis, ParamSet, StimulusDesign

log = logging.getLogger(__name__)

RANGE_LIMIT = 4.0


class RangeWarning(UserWarning):
    """BOLD data span more than the expected scaled range."""


def fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, matrix, header=None):
    """Write a 2-D numeric array; ``header`` is an optional list of labels."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    lines = []
    if header is not None:
        if len(header) != a.shape[1]:
            raise InvalidInputError("header length does not match the column count")
        buf = io.StringIO()
        # names like A[1,2] contain commas and get quoted
        csv.writer(buf, lineterminator="").writerow([str(h) for h in header])
        lines.append(buf.getvalue())
    lines.extend(",".join(fmt(v) for v in row) for row in a)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_csv(path, header="auto"):
    """Strictly parse a numeric CSV.

    Parameters
    ----------
    header : {"auto", True, False}
        ``"auto"`` treats the first row as a header when any cell in it is
        non-numeric.

    Returns
    -------
    names : list of str or None
    data : (n, k) ndarray

    Raises
    ------
    ParseError
        Empty file, ragged rows or non-numeric cells (with the line number).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row and any(c.strip() for c in row)]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    names = None
    first = rows[0][1]
    has_header = header is True or (header == "auto" and not all(_is_number(c) for c in first))
    if has_header:
        names = [c.strip() for c in first]
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(names) if names else len(rows[0][1])
    data = np.empty((len(rows), width))
    for k, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                data[k, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value {cell!r} in column {j + 1}") from None
    return names, data


def read_bold_csv(path):
    """BOLD matrix (n x d) and ROI names; warns if ``range(Y) > 4``."""
    names, Y = read_csv(path, header=True)
    if not np.all(np.isfinite(Y)):
        raise ParseError(f"{path}: non-finite values in BOLD data")
    span = float(Y.max() - Y.min())
    if span > RANGE_LIMIT:
        msg = f"{path}: BOLD range {span:.3g} exceeds {RANGE_LIMIT:g}; consider rescaling"
        warnings.warn(msg, RangeWarning, stacklevel=2)
        log.warning(msg)
    return Y, names


def sidecar_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def read_design(csv_path, json_path=None):
    """Stimulus matrix CSV plus its sidecar ``{tr_seconds, prescan_rest}``."""
    names, U = read_csv(csv_path)
    json_path = Path(json_path) if json_path else sidecar_path(csv_path)
    meta = read_json(json_path)
    if "tr_seconds" not in meta:
        raise ParseError(f"{json_path}: missing 'tr_seconds'")
    return StimulusDesign(U, float(meta["tr_seconds"]), bool(meta.get("prescan_rest", True)))


def write_design(csv_path, design, names=None):
    names = names or [f"u{i + 1}" for i in range(design.m)]
    lines = [",".join(names)] + [",".join(str(int(v)) for v in row) for row in design.U]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    write_json(sidecar_path(csv_path), {"tr_seconds": design.r, "prescan_rest": design.prescan_rest})


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path, obj):
    """Sorted keys, two-space indent, non-finite numbers as ``null``."""
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None


def read_hypothesis(path):
    return Hypothesis.from_dict(read_json(path))


def read_params(path, hypothesis):
    return ParamSet.from_dict(read_json(path), hypothesis)


def write_draws(path, pd):
    """One row per draw: ``chain``, parameter columns, ``lp__``."""
    cols = [pd.chain.astype(float)[:, None], pd.draws]
    header = ["chain"] + list(pd.names)
    if pd.lp is not None:
        cols.append(np.asarray(pd.lp, dtype=float)[:, None])
        header.append("lp__")
    write_csv(path, np.hstack(cols), header)


def read_draws(path):
    """Inverse of :func:`write_draws`: ``(names, draws, chain, lp)``."""
    names, data = read_csv(path, header=True)
    chain = np.zeros(data.shape[0], dtype=np.int64)
    lp = None
    keep = list(range(len(names)))
    if "chain" in names:
        j = names.index("chain")
        chain = data[:, j].astype(np.int64)
        keep.remove(j)
    if "lp__" in names:
        j = names.index("lp__")
        lp = data[:, j]
        keep.remove(j)
    return [names[j] for j in keep], data[:, keep], chain, lp
