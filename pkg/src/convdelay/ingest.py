"""Criteo-format click logs: parsing, one-hot encoding, splitting, storage.

Input lines are tab separated: click timestamp and conversion timestamp in
integer seconds (the latter empty for unconverted clicks), 8 integer
features, then 9 categorical tokens.  Empty fields are missing values.

Dataset text format
-------------------
:func:`write_dataset` stores a :class:`~convdelay.core.ClickData` as::

    # convdelay-dataset 1
    # k=<design width>
    # columns=<space-separated feature names>   (optional)
    click_time<TAB>conversion_time<TAB>features
    0.25<TAB>1.5<TAB>0:1 3:1 17:-0.42
    ...

Times are days, the conversion time is empty for unconverted clicks, and
``features`` lists the non-zero design entries as ``index:value``.
"""

import gzip
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import ClickData
from .exceptions import DataError, EmptyInput, FileUnreadable, TooManyMalformedLines

logger = logging.getLogger(__name__)

N_INTEGER = 8
N_CATEGORICAL = 9
N_FIELDS = 2 + N_INTEGER + N_CATEGORICAL
SECONDS_PER_DAY = 86400.0
# conversions stamped in the same second as their click are moved this far
# after it, so that every delay is positive
SAME_SECOND_OFFSET = 0.5
OTHER = "__other__"
DATASET_MAGIC = "# convdelay-dataset 1"


@dataclass(frozen=True)
class CriteoRow:
    click_timestamp: int
    conversion_timestamp: Optional[int]
    integer_features: tuple
    categorical_features: tuple

    def __post_init__(self):
        if self.conversion_timestamp is not None and self.conversion_timestamp < self.click_timestamp:
            raise ValueError("conversion timestamp precedes click timestamp")
        if len(self.integer_features) != N_INTEGER:
            raise ValueError(f"expected {N_INTEGER} integer features")
        if len(self.categorical_features) != N_CATEGORICAL:
            raise ValueError(f"expected {N_CATEGORICAL} categorical features")

    @property
    def converted(self):
        return self.conversion_timestamp is not None


@dataclass
class ParseReport:
    lines: int = 0
    rows: int = 0
    malformed: list = field(default_factory=list)

    def add(self, line_no, reason):
        self.malformed.append((line_no, reason))

    def summary(self):
        return {"lines": self.lines, "rows": self.rows, "malformed": len(self.malformed),
                "first_malformed": self.malformed[:10]}


def _int_or_none(text, what):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{what}: not an integer: {text!r}") from None


def parse_line(line):
    """Parse one tab-separated line into a :class:`CriteoRow`.

    Raises ``ValueError`` with a reason for malformed input.
    """
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != N_FIELDS:
        raise ValueError(f"expected {N_FIELDS} fields, found {len(parts)}")
    click = _int_or_none(parts[0], "click timestamp")
    if click is None:
        raise ValueError("click timestamp is missing")
    if click < 0:
        raise ValueError("click timestamp is negative")
    conv = _int_or_none(parts[1], "conversion timestamp")
    if conv is not None and conv < click:
        raise ValueError("conversion timestamp precedes click timestamp")
    ints = tuple(_int_or_none(p, f"integer feature {j}") for j, p in enumerate(parts[2:2 + N_INTEGER]))
    cats = tuple(p if p != "" else None for p in parts[2 + N_INTEGER:])
    return CriteoRow(click, conv, ints, cats)


def _open_text(path):
    try:
        if str(path).endswith(".gz"):
            return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"{path}: {exc.strerror or exc}") from None


def iter_criteo(path, *, max_malformed=100, limit=None, report=None):
    """Stream :class:`CriteoRow` objects from a file.

    Malformed lines are skipped and recorded in ``report`` (a
    :class:`ParseReport`); once more than ``max_malformed`` have been seen
    :class:`TooManyMalformedLines` is raised.  Blank lines are ignored.
    """
    report = report if report is not None else ParseReport()
    fh = _open_text(path)
    try:
        with fh:
            for line_no, line in enumerate(fh, start=1):
                if limit is not None and report.rows >= limit:
                    break
                if not line.strip():
                    continue
                report.lines += 1
                try:
                    row = parse_line(line)
                except ValueError as exc:
                    report.add(line_no, str(exc))
                    if len(report.malformed) > max_malformed:
                        raise TooManyMalformedLines(
                            f"{path}: more than {max_malformed} malformed lines "
                            f"(last at line {line_no}: {exc})"
                        ) from None
                    continue
                report.rows += 1
                yield row
    except UnicodeDecodeError as exc:
        raise FileUnreadable(f"{path}: not UTF-8 text ({exc.reason})") from None


def parse_criteo(path, *, max_malformed=100, limit=None):
    """Read a whole file.  Returns ``(rows, report)``."""
    report = ParseReport()
    rows = list(iter_criteo(path, max_malformed=max_malformed, limit=limit, report=report))
    if report.malformed:
        logger.warning("%s: skipped %d malformed lines", path, len(report.malformed))
    return rows, report


# --- encoding ---------------------------------------------------------------

@dataclass
class EncoderVocabulary:
    """Fitted one-hot and standardisation parameters.

    Column 0 of the encoded design is the intercept.  Each selected
    categorical column gets one indicator per retained token plus an
    ``other`` indicator (rare, unseen and missing tokens); each selected
    integer column gets a standardised value and a missingness indicator.
    """

    categorical_columns: tuple
    integer_columns: tuple
    tokens: dict            # categorical column -> {token: design index}
    other_index: dict       # categorical column -> design index
    integer_stats: dict     # integer column -> (mean, sd, value index, missing index)
    time_origin: int
    min_count: int
    feature_names: list

    @property
    def k(self):
        return len(self.feature_names)

    def to_dict(self):
        return {
            "categorical_columns": list(self.categorical_columns),
            "integer_columns": list(self.integer_columns),
            "tokens": {str(c): m for c, m in self.tokens.items()},
            "other_index": {str(c): i for c, i in self.other_index.items()},
            "integer_stats": {str(c): list(s) for c, s in self.integer_stats.items()},
            "time_origin": self.time_origin,
            "min_count": self.min_count,
            "feature_names": self.feature_names,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["categorical_columns"]),
            tuple(d["integer_columns"]),
            {int(c): dict(m) for c, m in d["tokens"].items()},
            {int(c): int(i) for c, i in d["other_index"].items()},
            {int(c): tuple(s) for c, s in d["integer_stats"].items()},
            int(d["time_origin"]),
            int(d["min_count"]),
            list(d["feature_names"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _columns(selected, n, kind):
    cols = tuple(range(n)) if selected is None else tuple(int(c) for c in selected)
    for c in cols:
        if not 0 <= c < n:
            raise ValueError(f"{kind} column {c} out of range 0..{n - 1}")
    if len(set(cols)) != len(cols):
        raise ValueError(f"duplicate {kind} columns")
    return cols


def fit_vocabulary(rows, categorical_columns=None, integer_columns=None, *, min_count=50,
                   time_origin=None):
    """Fit the encoder on training rows.

    Tokens seen fewer than ``min_count`` times fold into the column's
    ``other`` indicator.  ``time_origin`` (seconds) defaults to the earliest
    click among ``rows``.
    """
    rows = list(rows)
    if not rows:
        raise EmptyInput("cannot fit a vocabulary on zero rows")
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    cat_cols = _columns(categorical_columns, N_CATEGORICAL, "categorical")
    int_cols = _columns(integer_columns, N_INTEGER, "integer")
    names = ["intercept"]
    tokens, other, stats = {}, {}, {}
    for c in cat_cols:
        counts = Counter(r.categorical_features[c] for r in rows)
        counts.pop(None, None)
        kept = sorted(t for t, n in counts.items() if n >= min_count)
        tokens[c] = {}
        for t in kept:
            tokens[c][t] = len(names)
            names.append(f"cat{c}={t}")
        other[c] = len(names)
        names.append(f"cat{c}={OTHER}")
    for c in int_cols:
        vals = np.array([r.integer_features[c] for r in rows if r.integer_features[c] is not None],
                        dtype=np.float64)
        mean = float(vals.mean()) if vals.size else 0.0
        sd = float(vals.std()) if vals.size else 0.0
        stats[c] = (mean, sd if sd > 0 else 1.0, len(names), len(names) + 1)
        names += [f"int{c}", f"int{c}_missing"]
    origin = min(r.click_timestamp for r in rows) if time_origin is None else int(time_origin)
    return EncoderVocabulary(cat_cols, int_cols, tokens, other, stats, origin, int(min_count), names)


def seconds_to_days(seconds, origin):
    return (np.asarray(seconds, dtype=np.float64) - origin) / SECONDS_PER_DAY


def decode_timestamps(days, vocab):
    """Inverse of the time conversion used by :func:`encode` (seconds, float)."""
    return np.asarray(days, dtype=np.float64) * SECONDS_PER_DAY + vocab.time_origin


def encode(rows, vocab):
    """Encode rows into :class:`ClickData` with a CSR design.

    Times are days since ``vocab.time_origin``.  The vocabulary is not
    modified.
    """
    rows = list(rows)
    if not rows:
        raise EmptyInput("no rows to encode")
    indptr, indices, data = [0], [], []
    click = np.empty(len(rows))
    conv = np.full(len(rows), np.nan)
    for i, r in enumerate(rows):
        if r.click_timestamp < vocab.time_origin:
            raise DataError(
                f"row {i}: click at {r.click_timestamp}s precedes the time origin "
                f"{vocab.time_origin}s"
            )
        click[i] = r.click_timestamp
        if r.conversion_timestamp is not None:
            conv[i] = r.conversion_timestamp
            if r.conversion_timestamp == r.click_timestamp:
                conv[i] += SAME_SECOND_OFFSET
        entries = [(0, 1.0)]
        for c in vocab.categorical_columns:
            entries.append((vocab.tokens[c].get(r.categorical_features[c], vocab.other_index[c]), 1.0))
        for c in vocab.integer_columns:
            mean, sd, j_val, j_miss = vocab.integer_stats[c]
            v = r.integer_features[c]
            if v is None:
                entries.append((j_miss, 1.0))
            else:
                z = (v - mean) / sd
                if z != 0.0:
                    entries.append((j_val, z))
        entries.sort()
        indices.extend(j for j, _ in entries)
        data.extend(v for _, v in entries)
        indptr.append(len(indices))
    X = sp.csr_matrix((np.array(data), np.array(indices), np.array(indptr)),
                      shape=(len(rows), vocab.k))
    origin = vocab.time_origin
    return ClickData(seconds_to_days(click, origin), seconds_to_days(conv, origin), X)


# --- splitting --------------------------------------------------------------

def split(n, train_fraction, seed):
    """Random train/test partition of ``range(n)``.

    Each row joins the training set independently with probability
    ``train_fraction``.  Returns sorted ``(train_idx, test_idx)``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = int(n)
    mask = np.random.default_rng(seed).random(n) < train_fraction
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def repeated_splits(n, train_fraction, n_repeats, seed):
    """Yield ``(repeat, train_idx, test_idx)`` with independent seeded streams."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be positive")
    for r in range(int(n_repeats)):
        ss = np.random.SeedSequence(int(seed), spawn_key=(r,))
        yield (r,) + split(n, train_fraction, np.random.default_rng(ss))


# --- dataset text format ----------------------------------------------------

def write_dataset(path, data, feature_names=None):
    X = sp.csr_matrix(data.X)
    with open(path, "w") as fh:
        fh.write(DATASET_MAGIC + "\n")
        fh.write(f"# k={X.shape[1]}\n")
        if feature_names is not None:
            if len(feature_names) != X.shape[1]:
                raise ValueError("feature_names length differs from design width")
            fh.write("# columns=" + " ".join(str(n).replace(" ", "_") for n in feature_names) + "\n")
        fh.write("click_time\tconversion_time\tfeatures\n")
        for i in range(data.n):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j}:{v:.17g}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
            cv = data.conversion_time[i]
            fh.write(f"{data.click_time[i]:.17g}\t{'' if math.isnan(cv) else f'{cv:.17g}'}\t{feats}\n")


def read_dataset(path):
    """Read a file written by :func:`write_dataset`.

    Returns ``(ClickData, feature_names or None)``.
    """
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"{path}: {exc.strerror or exc}") from None
    with fh:
        if fh.readline().rstrip("\n") != DATASET_MAGIC:
            raise DataError(f"{path}: not a convdelay dataset file")
        k, names = None, None
        line = fh.readline()
        while line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "k":
                k = int(val)
            elif key == "columns":
                names = val.split(" ")
            line = fh.readline()
        if k is None:
            raise DataError(f"{path}: missing '# k=' header")
        click, conv, indptr, indices, values = [], [], [0], [], []
        for line_no, line in enumerate(fh, start=3):
            if not line.strip():
                continue
            try:
                t, c, feats = line.rstrip("\n").split("\t")
                click.append(float(t))
                conv.append(float(c) if c else np.nan)
                for item in feats.split():
                    j, v = item.split(":")
                    indices.append(int(j))
                    values.append(float(v))
            except ValueError:
                raise DataError(f"{path}:{line_no}: malformed dataset line") from None
            indptr.append(len(indices))
    if not click:
        raise EmptyInput(f"{path}: dataset has no rows")
    X = sp.csr_matrix((np.array(values), np.array(indices, dtype=np.int64),
                       np.array(indptr)), shape=(len(click), k))
    try:
        return ClickData(np.array(click), np.array(conv), X), names
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
