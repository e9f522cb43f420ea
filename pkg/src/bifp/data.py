"""Dataset ingestion, stratified splitting, and a synthetic biased generator.

A dataset is features [n x d] plus a label column in {-1, +1} and a binary
sensitive attribute in {+1 (favorable), -1 (unfavorable)}. Features are
standardized at ingestion; each dataset remembers the affine parameters so
raw values can be recovered exactly.

The synthetic generator plants two Gaussian class clusters and makes the
unfavorable group intrinsically harder through a higher label-flip rate and,
tied to that asymmetry, an inflated noise covariance. This is what lets a
pruning run exhibit a measurable accuracy gap at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


# extra noise std per unit of label-noise asymmetry for the unfavorable group
COV_GAIN = 2.0


@dataclass
class GroupedBatch:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    stats: object = None  # GroupStats of the split this batch was drawn from


@dataclass
class GroupedDataset:
    """Immutable feature/label/sensitive triple with standardization params."""

    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    split_tag: str = "full"
    mu: np.ndarray = None
    sigma: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
        n = self.features.shape[0]
        if len(self.labels) != n or len(self.sensitive) != n:
            raise DataError(
                f"column lengths differ: {n} features, {len(self.labels)} labels, "
                f"{len(self.sensitive)} sensitive"
            )
        if not set(np.unique(self.labels)) <= {-1, 1}:
            raise DataError("labels must be in {-1, +1}")
        if not set(np.unique(self.sensitive)) <= {-1, 1}:
            raise DataError("sensitive values must be in {-1, +1}")
        if self.mu is None:
            self.mu = np.zeros(self.features.shape[1])
        if self.sigma is None:
            self.sigma = np.ones(self.features.shape[1])

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def group_counts(self):
        return int((self.sensitive == 1).sum()), int((self.sensitive == -1).sum())

    def raw_features(self) -> np.ndarray:
        """Undo standardization: raw = standardized * sigma + mu."""
        return self.features * self.sigma + self.mu

    def subset(self, idx, tag: str) -> "GroupedDataset":
        return GroupedDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            sensitive=self.sensitive[idx],
            split_tag=tag,
            mu=self.mu.copy(),
            sigma=self.sigma.copy(),
        )

    def as_batch(self, stats=None) -> GroupedBatch:
        return GroupedBatch(self.features, self.labels, self.sensitive, stats)


@dataclass(frozen=True)
class Splits:
    train: GroupedDataset
    val: GroupedDataset
    test: GroupedDataset


@dataclass(frozen=True)
class CsvSchema:
    """Which CSV columns hold the label and sensitive attribute, and which of
    their two values maps to +1."""

    label_col: str
    sensitive_col: str
    positive_label: str
    positive_group: str


def _standardize(raw: np.ndarray):
    mu = raw.mean(axis=0)
    sigma = raw.std(axis=0)
    if np.any(sigma == 0):
        cols = np.flatnonzero(sigma == 0)
        raise DataError(f"constant feature column(s) {cols.tolist()} cannot be standardized")
    return (raw - mu) / sigma, mu, sigma


def _map_binary(values, positive, what: str) -> np.ndarray:
    distinct = sorted(set(values))
    if len(distinct) == 1:
        raise DataError(f"{what} column has a single value {distinct[0]!r}; need two groups")
    if len(distinct) > 2:
        raise DataError(f"{what} column has {len(distinct)} distinct values; need exactly two")
    if positive not in distinct:
        raise DataError(f"{what} value {positive!r} not found (column has {distinct})")
    return np.array([1 if v == positive else -1 for v in values], dtype=np.int64)


def load_csv(path, schema: CsvSchema) -> GroupedDataset:
    """Read a headered CSV into a standardized GroupedDataset.

    All columns except the label and sensitive ones must be numeric features.
    Labels and groups are mapped to {-1, +1} by the schema; features are
    z-scored with the file's own statistics.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    for col in (schema.label_col, schema.sensitive_col):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r} (header: {header})")

    label_i = header.index(schema.label_col)
    sens_i = header.index(schema.sensitive_col)
    feature_is = [i for i in range(len(header)) if i not in (label_i, sens_i)]
    if not feature_is:
        raise DataError(f"{path}: no feature columns besides label and sensitive")

    raw = np.empty((len(rows), len(feature_is)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")
        for c, i in enumerate(feature_is):
            try:
                raw[r, c] = float(row[i])
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell at row {r + 2}, column {header[i]!r}: {row[i]!r}"
                ) from None

    labels = _map_binary([row[label_i] for row in rows], schema.positive_label, "label")
    sensitive = _map_binary([row[sens_i] for row in rows], schema.positive_group, "sensitive")
    if not (sensitive == 1).any() or not (sensitive == -1).any():
        raise DataError(f"{path}: only one sensitive group present")

    features, mu, sigma = _standardize(raw)
    return GroupedDataset(features, labels, sensitive, split_tag="full", mu=mu, sigma=sigma)


def split(data: GroupedDataset, ratios, seed: int) -> Splits:
    """Three-way split stratified jointly by (label, sensitive).

    Deterministic for a given seed. Standardization is redone with the train
    split's raw statistics and applied to all three splits, so no statistic
    leaks from validation or test into training.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise DataError(f"ratios must be three positive fractions summing to 1, got {ratios}")

    rng = np.random.default_rng(seed)
    parts = _stratified_partition(data.labels, data.sensitive, ratios, rng)

    raw = data.raw_features()
    train_raw = raw[parts[0]]
    _, mu, sigma = _standardize(train_raw)

    out = []
    for idx, tag in zip(parts, ("train", "val", "test")):
        ds = GroupedDataset(
            features=(raw[idx] - mu) / sigma,
            labels=data.labels[idx],
            sensitive=data.sensitive[idx],
            split_tag=tag,
            mu=mu.copy(),
            sigma=sigma.copy(),
        )
        if not (ds.sensitive == 1).any() or not (ds.sensitive == -1).any():
            raise DataError(f"{tag} split lost a sensitive group; use different ratios or seed")
        out.append(ds)
    return Splits(*out)


def _stratified_partition(labels, sensitive, ratios, rng):
    """Allocate each (label, sensitive) cell across splits.

    Within a cell, indices are shuffled and handed out by a running-deficit
    largest-remainder rule, which keeps every split's total within one sample
    of its ideal share and every cell's proportions within one sample too.
    """
    cells = {}
    for i, (y, s) in enumerate(zip(labels, sensitive)):
        cells.setdefault((int(y), int(s)), []).append(i)

    k = len(ratios)
    for key, idx in sorted(cells.items()):
        if len(idx) < k:
            raise DataError(
                f"cell (label={key[0]}, sensitive={key[1]}) has {len(idx)} samples, "
                f"fewer than the {k} splits"
            )

    parts = [[] for _ in range(k)]
    assigned = np.zeros(k)
    ideal = np.zeros(k)
    for key in sorted(cells):
        idx = np.array(cells[key])
        idx = idx[rng.permutation(len(idx))]
        ideal += len(idx) * np.asarray(ratios)
        base = np.floor(ideal - assigned).astype(int)
        base = np.maximum(base, 1)  # every cell feeds every split
        while base.sum() > len(idx):
            base[int(np.argmax(base))] -= 1
        rem = len(idx) - base.sum()
        deficits = (ideal - assigned) - base
        order = np.argsort(-deficits, kind="stable")
        t = 0
        while rem > 0:
            base[order[t % k]] += 1
            rem -= 1
            t += 1
        pos = 0
        for j in range(k):
            parts[j].extend(idx[pos: pos + base[j]].tolist())
            pos += base[j]
        assigned += base
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the synthetic biased classification task."""

    n: int = 2000
    d: int = 20
    group_ratio: float = 0.5
    label_noise_pos: float = 0.05
    label_noise_neg: float = 0.25
    class_sep: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.n < 8 or self.d < 1:
            raise DataError(f"need n >= 8 and d >= 1, got n={self.n}, d={self.d}")
        if not 0 < self.group_ratio < 1:
            raise DataError(f"group_ratio must be in (0, 1), got {self.group_ratio}")
        for rate in (self.label_noise_pos, self.label_noise_neg):
            if not 0 <= rate < 0.5:
                raise DataError(f"label noise rates must be in [0, 0.5), got {rate}")


def generate_synthetic(spec: SyntheticSpec) -> GroupedDataset:
    """Two Gaussian class clusters, with the unfavorable group made harder.

    Class centers sit at +/- class_sep/2 along a random unit direction. Group
    -1 receives its own label-flip rate and, when that rate exceeds the
    favorable group's, a noise-std inflation of 1 + COV_GAIN * (rate gap).
    All randomness flows from spec.seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)

    y_true = rng.integers(0, 2, spec.n) * 2 - 1
    sensitive = np.where(rng.random(spec.n) < spec.group_ratio, 1, -1)
    noise = rng.standard_normal((spec.n, spec.d))

    inflation = 1.0 + COV_GAIN * max(0.0, spec.label_noise_neg - spec.label_noise_pos)
    noise_scale = np.where(sensitive == -1, inflation, 1.0)
    raw = y_true[:, None] * (spec.class_sep / 2.0) * direction + noise * noise_scale[:, None]

    flip_rate = np.where(sensitive == 1, spec.label_noise_pos, spec.label_noise_neg)
    flips = rng.random(spec.n) < flip_rate
    labels = np.where(flips, -y_true, y_true)

    if not (sensitive == 1).any() or not (sensitive == -1).any():
        raise DataError("synthetic draw produced a single group; adjust n or group_ratio")

    features, mu, sigma = _standardize(raw)
    return GroupedDataset(features, labels, sensitive, split_tag="full", mu=mu, sigma=sigma)


def stratified_batches(data: GroupedDataset, batch_size: int, rng, stats=None):
    """One epoch of shuffled batches, each containing both sensitive groups.

    Indices of each group are shuffled independently and dealt into batches
    proportionally, so a batch can never be single-group as long as the batch
    count does not exceed the smaller group's size (enforced by widening the
    batches if needed).
    """
    pos = np.flatnonzero(data.sensitive == 1)
    neg = np.flatnonzero(data.sensitive == -1)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("both groups are required for stratified batches")
    n_batches = max(1, data.n // max(1, batch_size))
    n_batches = min(n_batches, len(pos), len(neg))

    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    pos_parts = np.array_split(pos, n_batches)
    neg_parts = np.array_split(neg, n_batches)
    for p, q in zip(pos_parts, neg_parts):
        idx = np.concatenate([p, q])
        yield GroupedBatch(data.features[idx], data.labels[idx], data.sensitive[idx], stats)
