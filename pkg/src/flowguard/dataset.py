"""Flow-feature datasets.

CSV loading, identity-column removal, [0,1] min-max scaling, stratified
splits, and a synthetic traffic generator used as a desk-scale stand-in for
large flow captures.  All objects are immutable after construction and safe
to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllFeaturesDropped,
    ArityMismatch,
    ClassTooSmall,
    EmptyDataset,
    MissingLabelColumn,
    ParseError,
)

NUMERIC = "numeric"
CATEGORICAL = "categorical-encoded"
IDENTITY = "identity"

_KINDS = (NUMERIC, CATEGORICAL, IDENTITY)

# Columns that identify a flow rather than describe its behaviour.  They are
# stripped before any model sees the data; the set mirrors common flow-export
# headers and is matched against lowercased column names.
IDENTITY_BLOCKLIST = frozenset({
    "timestamp", "flow_start", "flow_end",
    "src_ip", "dst_ip", "src_port", "dst_port", "flow_id",
})

DEFAULT_LABEL_COLUMN = "label"


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = NUMERIC
    mutable: bool = False
    valid_range: tuple[float, float] | None = None
    integral: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == IDENTITY and self.mutable:
            raise ValueError(f"identity column {self.name!r} cannot be mutable")
        if self.valid_range is not None:
            lo, hi = self.valid_range
            if not lo <= hi:
                raise ValueError(f"column {self.name!r}: valid_range lo > hi")


class FeatureSchema:
    """Ordered feature columns with mutability / identity metadata."""

    def __init__(self, columns):
        columns = tuple(columns)
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        self.columns = columns

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def arity(self):
        return len(self.columns)

    def mutable_mask(self):
        return np.array([c.mutable for c in self.columns], dtype=bool)

    def integral_mask(self):
        return np.array([c.integral for c in self.columns], dtype=bool)

    def identity_indices(self):
        """Indices of columns dropped by drop_identity_features."""
        out = []
        for i, c in enumerate(self.columns):
            if c.kind == IDENTITY or c.name.lower() in IDENTITY_BLOCKLIST:
                out.append(i)
        return out

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.columns == other.columns

    def __repr__(self):
        return f"FeatureSchema({[c.name for c in self.columns]})"

    def to_dict(self):
        return {
            "columns": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "mutable": c.mutable,
                    "valid_range": list(c.valid_range) if c.valid_range else None,
                    "integral": c.integral,
                }
                for c in self.columns
            ]
        }

    @classmethod
    def from_dict(cls, d):
        cols = []
        for c in d["columns"]:
            rng = c.get("valid_range")
            cols.append(Column(
                name=c["name"],
                kind=c.get("kind", NUMERIC),
                mutable=bool(c.get("mutable", False)),
                valid_range=tuple(rng) if rng else None,
                integral=bool(c.get("integral", False)),
            ))
        return cls(cols)


def load_schema_json(path):
    """Read a schema sidecar (JSON listing columns with kind/mutable/... fields)."""
    with open(path, "r", encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def save_schema_json(schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class FlowRecord:
    values: np.ndarray
    label: int


class Dataset:
    """Labeled feature matrix bound to a FeatureSchema.

    Backed by a read-only (n, d) float matrix plus an int label vector;
    ``records`` materialises FlowRecord views on demand.
    """

    def __init__(self, schema, X, y, label_map):
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != schema.arity:
            raise ArityMismatch(
                f"matrix has {X.shape[1] if X.ndim == 2 else '?'} columns, "
                f"schema has {schema.arity}")
        if y.shape != (X.shape[0],):
            raise ValueError("label vector length does not match record count")
        label_map = list(label_map)
        if y.size and (y.min() < 0 or y.max() >= len(label_map)):
            raise ValueError("label index outside label_map")
        X.flags.writeable = False
        y.flags.writeable = False
        self.schema = schema
        self.X = X
        self.y = y
        self.label_map = label_map

    @classmethod
    def from_records(cls, schema, records, label_map):
        X = np.array([r.values for r in records], dtype=np.float64)
        y = np.array([r.label for r in records], dtype=np.int64)
        if len(records) == 0:
            X = np.empty((0, schema.arity))
        return cls(schema, X, y, label_map)

    @property
    def records(self):
        return [FlowRecord(self.X[i].copy(), int(self.y[i]))
                for i in range(self.num_records)]

    @property
    def num_records(self):
        return self.X.shape[0]

    @property
    def num_features(self):
        return self.X.shape[1]

    @property
    def num_classes(self):
        return len(self.label_map)

    def with_values(self, X):
        """Same schema, labels and label_map over a replaced value matrix."""
        return Dataset(self.schema, X, self.y.copy(), self.label_map)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.schema, self.X[idx].copy(), self.y[idx].copy(),
                       self.label_map)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

def _parse_float(token):
    try:
        return float(token)
    except ValueError:
        return None


def load_csv(path, schema=None, label_column=DEFAULT_LABEL_COLUMN):
    """Load a flow CSV (UTF-8, comma-separated, first row header).

    Without a schema, every non-label column is inferred numeric and mutable,
    except blocklisted identity names (timestamps, IPs, ports, flow ids),
    which become immutable identity columns; supply a sidecar schema to
    restrict mutability or mark integral columns.  Labels map to indices by
    lexicographic order of the class names.  Non-numeric values in identity
    columns are encoded as stable first-appearance integer codes so that
    string IPs survive loading (they are dropped before modeling anyway).
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise MissingLabelColumn(
                f"{path}: no {label_column!r} column in header {header}")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]

        if schema is None:
            cols = []
            for name in feature_names:
                if name.lower() in IDENTITY_BLOCKLIST:
                    cols.append(Column(name, kind=IDENTITY, mutable=False))
                else:
                    cols.append(Column(name, kind=NUMERIC, mutable=True))
            schema = FeatureSchema(cols)
        else:
            if schema.names != feature_names:
                raise ValueError(
                    f"schema columns {schema.names} do not match CSV feature "
                    f"columns {feature_names}")

        identity_codes = [dict() for _ in schema.columns]
        rows, labels = [], []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ParseError(row_num, "",
                                 f"expected {len(header)} fields, got {len(row)}")
            labels.append(row[label_idx].strip())
            vec = np.empty(len(feature_names))
            fi = 0
            for ci, token in enumerate(row):
                if ci == label_idx:
                    continue
                col = schema.columns[fi]
                token = token.strip()
                val = _parse_float(token)
                if val is None:
                    if col.kind == IDENTITY:
                        codes = identity_codes[fi]
                        val = codes.setdefault(token, float(len(codes)))
                    else:
                        raise ParseError(row_num, col.name,
                                         f"cannot parse {token!r} as a number")
                vec[fi] = val
                fi += 1
            rows.append(vec)

    if not rows:
        raise EmptyDataset(f"{path}: header only, no data rows")

    label_map = sorted(set(labels))
    label_to_idx = {name: i for i, name in enumerate(label_map)}
    y = np.array([label_to_idx[s] for s in labels], dtype=np.int64)
    return Dataset(schema, np.array(rows), y, label_map)


def save_csv(dataset, path, label_column=DEFAULT_LABEL_COLUMN):
    """Write a dataset back to the CSV format load_csv accepts."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.schema.names + [label_column])
        integral = dataset.schema.integral_mask()
        for i in range(dataset.num_records):
            row = []
            for j, v in enumerate(dataset.X[i]):
                row.append(str(int(v)) if integral[j] else repr(float(v)))
            row.append(dataset.label_map[dataset.y[i]])
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Identity-feature removal
# ---------------------------------------------------------------------------

def drop_identity_features(dataset):
    """Drop identity-kind columns and blocklisted names; returns a new Dataset.

    Idempotent; the input dataset is left untouched.
    """
    dropped = set(dataset.schema.identity_indices())
    if not dropped:
        return dataset
    keep = [i for i in range(dataset.schema.arity) if i not in dropped]
    if not keep:
        raise AllFeaturesDropped("every column is an identity column")
    schema = FeatureSchema([dataset.schema.columns[i] for i in keep])
    return Dataset(schema, dataset.X[:, keep].copy(), dataset.y.copy(),
                   dataset.label_map)


# ---------------------------------------------------------------------------
# Min-max scaling
# ---------------------------------------------------------------------------

class Scaler:
    """Per-feature min-max transform fitted on training data.

    Maps fitted ranges onto [0,1]; constant features (max == min) transform
    to 0.0 and are excluded from attack coordinates.  Out-of-fit values clip
    to [0,1] so downstream box constraints always hold.
    """

    def __init__(self, mins, maxs):
        mins = np.asarray(mins, dtype=np.float64)
        maxs = np.asarray(maxs, dtype=np.float64)
        if mins.shape != maxs.shape or mins.ndim != 1:
            raise ValueError("mins/maxs must be matching 1-d arrays")
        if np.any(mins > maxs):
            raise ValueError("scaler min > max")
        self.mins = mins
        self.maxs = maxs
        self.spans = maxs - mins

    @property
    def arity(self):
        return self.mins.shape[0]

    def constant_mask(self):
        return self.spans == 0.0

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.arity:
            raise ArityMismatch(f"vector arity {x.shape[-1]} != scaler arity {self.arity}")
        return x

    def transform(self, x):
        x = self._check(x)
        span = np.where(self.spans == 0.0, 1.0, self.spans)
        z = (x - self.mins) / span
        z = np.where(self.spans == 0.0, 0.0, z)
        return np.clip(z, 0.0, 1.0)

    def inverse(self, z):
        z = self._check(z)
        return self.mins + z * self.spans

    def to_dict(self):
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mins"]), np.array(d["maxs"]))


def fit_scaler(train):
    if train.num_records == 0:
        raise EmptyDataset("cannot fit a scaler on an empty dataset")
    return Scaler(train.X.min(axis=0), train.X.max(axis=0))


def scale_dataset(dataset, scaler):
    """Dataset with values mapped into the scaler's [0,1] space."""
    return dataset.with_values(scaler.transform(dataset.X))


# ---------------------------------------------------------------------------
# Stratified split
# ---------------------------------------------------------------------------

def split(dataset, test_fraction, seed):
    """Deterministic stratified split; test gets round(count * fraction) per
    class, at least 1 and at most count - 1."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == cls)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ClassTooSmall(
                f"class {dataset.label_map[cls]!r} has {members.size} record(s), "
                "need at least 2 to split")
        n_test = int(math.floor(members.size * test_fraction + 0.5))
        n_test = max(1, min(n_test, members.size - 1))
        perm = rng.permutation(members)
        test_idx.extend(perm[:n_test].tolist())
    test_mask = np.zeros(dataset.num_records, dtype=bool)
    test_mask[test_idx] = True
    train = dataset.subset(np.flatnonzero(~test_mask))
    test = dataset.subset(np.flatnonzero(test_mask))
    return train, test


# ---------------------------------------------------------------------------
# Synthetic flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_records: int = 1000
    num_features: int = 10
    num_classes: int = 2
    class_separation: float = 6.0
    mutable_fraction: float = 0.5
    # realism knobs: a little label ambiguity and rare traffic bursts, both
    # ubiquitous in real flow captures (heavy-tailed features, noisy labels)
    label_noise: float = 0.03
    burst_fraction: float = 0.004


# Name cycles for generated features; mutable names first (the parameters an
# attacker can actually change on the wire), immutable names for the rest.
_MUTABLE_NAMES = ("pkt_len", "iat_mean", "rate", "ttl", "dscp")
_IMMUTABLE_NAMES = ("duration", "pkt_count", "win_size", "hdr_len", "payload_entropy")
_INTEGRAL_BASES = ("ttl", "dscp", "pkt_count", "win_size", "hdr_len")

# Raw-unit affine per base name: value -> base + spread * value.
_RAW_AFFINE = {
    "pkt_len": (900.0, 120.0),
    "iat_mean": (50.0, 6.0),
    "rate": (400.0, 60.0),
    "ttl": (128.0, 8.0),
    "dscp": (32.0, 4.0),
    "duration": (30.0, 4.0),
    "pkt_count": (220.0, 30.0),
    "win_size": (8000.0, 900.0),
    "hdr_len": (40.0, 5.0),
    "payload_entropy": (5.0, 0.6),
}

_FACTOR_RANK = 2          # shared low-rank noise factors per record
_RESIDUAL_SIGMA = 0.1     # iid noise on top of the shared factors
_BURST_RANGE = (25.0, 50.0)  # burst magnitude in within-class sigmas


def _cycle_names(bases, count, offset=0):
    names = []
    for i in range(count):
        base = bases[(offset + i) % len(bases)]
        rep = (offset + i) // len(bases)
        names.append(base if rep == 0 else f"{base}_{rep + 1}")
    return names


def _class_offsets(num_classes, axes, separation):
    """Centroid offset vectors with pairwise distance >= separation.

    Class 0 sits at the origin; each later class is displaced along a pair of
    axis features with unequal 2:1 components (or a single axis when only one
    is available), alternating sign and growing magnitude as pairs run out.
    """
    pairs = [tuple(axes[i:i + 2]) for i in range(0, len(axes) - 1, 2)]
    if not pairs:
        pairs = [(axes[0],)]
    offsets = [np.zeros(0)]  # placeholder; resized by caller
    vectors = [None] * num_classes
    for k in range(1, num_classes):
        slot = (k - 1) % len(pairs)
        rep = (k - 1) // len(pairs)
        sign = 1.0 if rep % 2 == 0 else -1.0
        mult = 1.0 + (rep // 2)
        pair = pairs[slot]
        if len(pair) == 2:
            direction = {pair[0]: 2.0 / math.sqrt(5.0), pair[1]: 1.0 / math.sqrt(5.0)}
        else:
            direction = {pair[0]: 1.0}
        vectors[k] = {ax: sign * mult * separation * w for ax, w in direction.items()}
    vectors[0] = {}
    return vectors


def synth_flows(config, seed):
    """Generate Gaussian class clusters over flow-style features.

    Within-class noise is a shared rank-2 factor model plus a small iid
    residual, so features co-vary the way flow statistics do; class signal
    lives on mutable axis features with centroid pairwise distance at least
    ``class_separation`` (in within-class standard deviations).  A small
    fraction of labels is confused and a few records carry heavy-tailed
    bursts, mirroring real captures.  Bitwise deterministic for a fixed
    (config, seed).
    """
    if config.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if config.num_features < 2:
        raise ValueError("num_features must be >= 2")
    if not 0.0 <= config.mutable_fraction <= 1.0:
        raise ValueError("mutable_fraction must be in [0, 1]")
    if not 0.0 <= config.label_noise < 0.5:
        raise ValueError("label_noise must be in [0, 0.5)")
    if not 0.0 <= config.burst_fraction < 0.5:
        raise ValueError("burst_fraction must be in [0, 0.5)")

    d = config.num_features
    n = config.num_records
    k = config.num_classes
    n_mut = math.ceil(config.mutable_fraction * d)
    names = (_cycle_names(_MUTABLE_NAMES, n_mut)
             + _cycle_names(_IMMUTABLE_NAMES, d - n_mut))

    def base_of(name):
        return name.split("_")[0] if name.split("_")[-1].isdigit() else name

    # ttl / dscp style counters are integers on the wire
    integral = [base_of(nm) in _INTEGRAL_BASES for nm in names]
    columns = [
        Column(nm, kind=NUMERIC, mutable=(i < n_mut), integral=integral[i])
        for i, nm in enumerate(names)
    ]
    schema = FeatureSchema(columns)

    axes = list(range(n_mut)) if n_mut >= 1 else list(range(d))
    offsets = _class_offsets(k, axes, config.class_separation)
    centroids = np.zeros((k, d))
    for c, vec in enumerate(offsets):
        for ax, val in vec.items():
            centroids[c, ax] = val
    dists = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    off_diag = dists[~np.eye(k, dtype=bool)]
    assert off_diag.min() >= config.class_separation - 1e-9

    rng = np.random.default_rng(seed)
    # frozen draw order: mixing matrix, factors, residuals, shuffle, label
    # flips, burst selection/shape
    rank = min(_FACTOR_RANK, d - 1)
    mix = rng.standard_normal((d, rank))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    counts = [n // k] * k
    for c in range(n % k):
        counts[c] += 1
    y = np.repeat(np.arange(k), counts)
    factors = rng.standard_normal((n, rank))
    resid = rng.standard_normal((n, d)) * _RESIDUAL_SIGMA
    # rank-2 mix expanded without BLAS so results ignore thread count
    values = centroids[y] + resid
    for r in range(rank):
        values += factors[:, r:r + 1] * mix[:, r][None, :]
    perm = rng.permutation(n)
    values, y = values[perm], y[perm]

    if config.label_noise > 0:
        flip = rng.random(n) < config.label_noise
        shifted = (y + rng.integers(1, k, size=n)) % k
        y = np.where(flip, shifted, y)
    if config.burst_fraction > 0:
        n_burst = max(1, int(round(config.burst_fraction * n)))
        burst_idx = rng.choice(n, size=n_burst, replace=False)
        for i in burst_idx:
            hit = rng.random(d) < 0.5
            hit[rng.integers(0, d)] = True
            signs = np.where(rng.random(d) < 0.5, -1.0, 1.0)
            mags = rng.uniform(*_BURST_RANGE, size=d)
            values[i, hit] += (signs * mags)[hit]

    base = np.array([_RAW_AFFINE[base_of(nm)][0] for nm in names])
    spread = np.array([_RAW_AFFINE[base_of(nm)][1] for nm in names])
    raw = base + spread * values
    int_mask = np.array(integral)
    raw[:, int_mask] = np.round(raw[:, int_mask])

    label_map = [f"class_{c}" for c in range(k)]
    return Dataset(schema, raw, y, label_map)
